"""Acceptance criteria, one test each; every test prints a single PASS/FAIL/SKIP line."""

from __future__ import annotations

import pytest

from prefmem import selftest


def _check(result: selftest.CriterionResult, capsys) -> None:
    with capsys.disabled():
        print("\n" + result.line())
    if result.skipped:
        pytest.skip(result.line())
    assert result.passed, result.line()


def test_criterion_1_schema_fidelity(capsys):
    _check(selftest.criterion_schema_fidelity(), capsys)


def test_criterion_2_out_of_schema_boundedness(capsys):
    _check(selftest.criterion_boundedness(), capsys)


def test_criterion_3_maintenance_state_machine(capsys):
    _check(selftest.criterion_maintenance_state_machine(), capsys)


def test_criterion_4_metric_oracle(capsys):
    _check(selftest.criterion_metric_oracle(), capsys)


def test_criterion_5_retrieval_oracle(capsys):
    _check(selftest.criterion_retrieval_oracle(), capsys)


def test_criterion_6_dynamic_n(capsys):
    _check(selftest.criterion_dynamic_n(), capsys)


def test_criterion_7_dataset_round_trip(capsys):
    _check(selftest.criterion_dataset_round_trip(), capsys)


def test_criterion_8_distinct_n(capsys):
    _check(selftest.criterion_distinct_n(), capsys)


def test_criterion_9_end_to_end_offline(capsys):
    _check(selftest.criterion_end_to_end(), capsys)


def test_criterion_10_live_smoke(capsys):
    _check(selftest.criterion_live_smoke(), capsys)
