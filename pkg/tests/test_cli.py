from __future__ import annotations

import json

import pytest
from click.testing import CliRunner

from prefmem.cli import main
from prefmem.selftest import golden_dir


@pytest.fixture
def runner():
    return CliRunner()


def transcript_file(tmp_path, point):
    path = tmp_path / f"{point.point_id}.json"
    path.write_text(
        json.dumps(
            {
                "conversation_id": point.point_id,
                "turns": [{"speaker": t.speaker, "text": t.text} for t in point.extraction_conversation.turns],
            }
        ),
        encoding="utf-8",
    )
    return str(path)


def test_help_lists_commands(runner):
    out = runner.invoke(main, ["--help"]).output
    for cmd in ("extract", "ingest", "retrieve", "eval", "serve", "selftest"):
        assert cmd in out
    assert runner.invoke(main, ["extract", "--help"]).exit_code == 0


def test_eval_retrieval_matches_golden(runner):
    r = runner.invoke(main, ["eval", "--experiment", "retrieval", "--mock"])
    assert r.exit_code == 0, r.output
    assert r.output == (golden_dir() / "retrieval.txt").read_text(encoding="utf-8")


def test_eval_writes_all_formats(runner, tmp_path):
    out = tmp_path / "out"
    r = runner.invoke(main, ["--mock", "eval", "--out", str(out)])
    assert r.exit_code == 0, r.output
    assert (out / "report.table.txt").read_text(encoding="utf-8") == (golden_dir() / "report.txt").read_text(encoding="utf-8")
    assert (out / "report.json.json").read_text(encoding="utf-8") == (golden_dir() / "report.json").read_text(encoding="utf-8")
    assert (out / "report.matrix.txt").read_text(encoding="utf-8") == (golden_dir() / "matrix.txt").read_text(encoding="utf-8")


def test_eval_split(runner):
    r = runner.invoke(main, ["eval", "--mock", "--experiment", "in-schema", "--split", "first", "--format", "json"])
    assert r.exit_code == 0, r.output
    assert json.loads(r.output)["in_schema"]["n_points"] == 10


def test_extract_ingest_retrieve(runner, tmp_path, corpus):
    store = str(tmp_path / "store")
    p = next(x for x in corpus if x.point_id == "p01")
    path = transcript_file(tmp_path, p)
    r = runner.invoke(main, ["--mock", "extract", path])
    assert r.exit_code == 0, r.output
    assert [c["value"] for c in json.loads(r.output)["candidates"]] == ["Italian"]
    r = runner.invoke(main, ["--mock", "ingest", "u1", path, "--store", store])
    assert r.exit_code == 0, r.output
    assert json.loads(r.output)["mutations"][0]["action"] == "append"
    r = runner.invoke(main, ["--mock", "retrieve", "u1", "somewhere to eat", "-k", "1", "--store", store])
    assert r.exit_code == 0, r.output
    assert json.loads(r.output)["results"][0]["preference"]["value"] == "Italian"
    r = runner.invoke(main, ["--mock", "retrieve", "u1", "x", "-k", "0", "--store", store])
    assert r.exit_code == 2


def test_malformed_transcript(runner, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json", encoding="utf-8")
    r = runner.invoke(main, ["--mock", "extract", str(path)])
    assert r.exit_code == 2 and "malformed transcript" in r.output


def test_bad_config_is_usage_error(runner, tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("retrieval_k: -1\n", encoding="utf-8")
    r = runner.invoke(main, ["--config", str(path), "selftest"])
    assert r.exit_code == 2 and "invalid configuration" in r.output


def test_selftest_exits_zero(runner):
    r = runner.invoke(main, ["selftest"])
    assert r.exit_code == 0, r.output
    lines = [l for l in r.output.splitlines() if l.startswith("[")]
    assert len(lines) == 10
    assert all(l.startswith(("[PASS]", "[SKIP]")) for l in lines)
