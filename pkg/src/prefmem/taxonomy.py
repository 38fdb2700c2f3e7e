"""Hierarchical preference taxonomy and the extraction tool schema built from it.

The taxonomy has three levels (main -> sub -> detail). Detail categories are the
leaves a preference is stored under; each is typed SP (single preference) or MP
(multiple preferences). The bundled default lives in ``data/taxonomy.yaml``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Iterator

import yaml

SENTINEL = "no_or_other_preference"
SENTENCE_FIELD = "user_sentence_preference_revealed"
VALUE_FIELD = "user_preference"

EXTRACTION_FUNCTION_NAME = "extract_user_preference"
EXTRACTION_FUNCTION_DESCRIPTION = (
    "A function that extracts personal preferences of the user from the conversation. "
    "Only fill in a category if the user clearly revealed a lasting preference for it; "
    "leave every other parameter empty. Preferences that do not fit any category go "
    f"into '{SENTINEL}'."
)

_IDENT = re.compile(r"^[a-z][a-z0-9_]*$")


class TaxonomyError(ValueError):
    """Raised when a taxonomy document is malformed or inconsistent."""


class DetailType(str, Enum):
    SP = "SP"
    MP = "MP"


@dataclass(frozen=True)
class CategoryPath:
    main: str
    sub: str
    detail: str

    def prefix(self, level: str) -> tuple[str, ...]:
        """Path truncated to ``level`` ("main", "sub" or "detail")."""
        depth = LEVELS.index(level) + 1
        return (self.main, self.sub, self.detail)[:depth]

    def __str__(self) -> str:
        return f"{self.main}/{self.sub}/{self.detail}"

    @classmethod
    def parse(cls, text: str) -> CategoryPath:
        parts = text.split("/")
        if len(parts) != 3:
            raise ValueError(f"expected main/sub/detail, got {text!r}")
        return cls(*parts)


LEVELS = ("main", "sub", "detail")


@dataclass(frozen=True)
class DetailCategory:
    id: str
    display_name: str
    type: DetailType
    attributes: tuple[str, ...]
    examples: tuple[str, ...] = ()


@dataclass(frozen=True)
class SubCategory:
    id: str
    display_name: str
    details: tuple[DetailCategory, ...]


@dataclass(frozen=True)
class MainCategory:
    id: str
    display_name: str
    subs: tuple[SubCategory, ...]


@dataclass(frozen=True)
class CategoryTaxonomy:
    mains: tuple[MainCategory, ...]
    version: str
    _index: dict[CategoryPath, DetailCategory] = field(
        default_factory=dict, compare=False, repr=False
    )

    def __post_init__(self) -> None:
        _check_unique(self)
        index = {
            CategoryPath(m.id, s.id, d.id): d
            for m in self.mains
            for s in m.subs
            for d in s.details
        }
        object.__setattr__(self, "_index", index)

    def paths(self) -> Iterator[CategoryPath]:
        return iter(self._index)

    def detail(self, path: CategoryPath) -> DetailCategory:
        try:
            return self._index[path]
        except KeyError:
            raise KeyError(f"unknown category path {path}") from None

    def subs(self) -> Iterator[tuple[MainCategory, SubCategory]]:
        for m in self.mains:
            for s in m.subs:
                yield m, s

    def sub_ids(self) -> list[str]:
        return [s.id for _, s in self.subs()]

    def counts(self) -> tuple[int, int, int]:
        n_sub = sum(len(m.subs) for m in self.mains)
        return len(self.mains), n_sub, len(self._index)

    def find_detail(self, detail_id: str) -> CategoryPath:
        for path in self._index:
            if path.detail == detail_id:
                return path
        raise KeyError(detail_id)


def _check_unique(taxonomy: CategoryTaxonomy) -> None:
    main_ids: set[str] = set()
    sub_ids: set[str] = set()
    detail_ids: set[str] = set()
    for m in taxonomy.mains:
        _claim(main_ids, m.id, "main")
        for s in m.subs:
            _claim(sub_ids, s.id, "sub")
            for d in s.details:
                _claim(detail_ids, d.id, "detail")


def _claim(seen: set[str], ident: str, level: str) -> None:
    if ident == SENTINEL:
        raise TaxonomyError(f"{level} category may not be named {SENTINEL!r}")
    if ident in seen:
        raise TaxonomyError(f"duplicate {level} identifier {ident!r}")
    seen.add(ident)


# -- loading -----------------------------------------------------------------


def default_taxonomy_text() -> str:
    return resources.files("prefmem").joinpath("data/taxonomy.yaml").read_text("utf-8")


def load_default_taxonomy() -> CategoryTaxonomy:
    return load_taxonomy(default_taxonomy_text())


def load_taxonomy(source: str | Path) -> CategoryTaxonomy:
    """Parse and validate a taxonomy document.

    ``source`` is either YAML text or a path to a YAML file.
    """
    if isinstance(source, Path):
        source = source.read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(source)
    except yaml.YAMLError as exc:
        raise TaxonomyError(f"taxonomy does not parse: {exc}") from exc
    if not isinstance(doc, dict):
        raise TaxonomyError("taxonomy document is empty or not a mapping")
    mains_doc = doc.get("mains")
    if not isinstance(mains_doc, list) or not mains_doc:
        raise TaxonomyError("taxonomy needs a non-empty 'mains' list")
    version = str(doc.get("version", "unversioned"))
    mains = tuple(_parse_main(m) for m in mains_doc)
    return CategoryTaxonomy(mains=mains, version=version)


def _node(doc: Any, level: str) -> tuple[str, str]:
    if not isinstance(doc, dict):
        raise TaxonomyError(f"{level} entry must be a mapping, got {doc!r}")
    ident = doc.get("id")
    if not isinstance(ident, str) or not _IDENT.match(ident):
        raise TaxonomyError(f"malformed {level} identifier {ident!r}")
    name = doc.get("name")
    if not isinstance(name, str) or not name.strip():
        raise TaxonomyError(f"{level} {ident!r} has no display name")
    return ident, name.strip()


def _children(doc: dict, key: str, owner: str) -> list:
    items = doc.get(key)
    if not isinstance(items, list) or not items:
        raise TaxonomyError(f"{owner} needs a non-empty {key!r} list")
    return items


def _parse_main(doc: Any) -> MainCategory:
    ident, name = _node(doc, "main")
    subs = tuple(_parse_sub(s) for s in _children(doc, "subs", ident))
    return MainCategory(ident, name, subs)


def _parse_sub(doc: Any) -> SubCategory:
    ident, name = _node(doc, "sub")
    details = tuple(_parse_detail(d) for d in _children(doc, "details", ident))
    return SubCategory(ident, name, details)


def _parse_detail(doc: Any) -> DetailCategory:
    ident, name = _node(doc, "detail")
    raw_type = doc.get("type")
    try:
        dtype = DetailType(raw_type)
    except ValueError:
        raise TaxonomyError(
            f"detail {ident!r} must be tagged SP or MP, got {raw_type!r}"
        ) from None
    attrs = doc.get("attributes")
    if not isinstance(attrs, list) or not attrs:
        raise TaxonomyError(f"detail {ident!r} has an empty attribute list")
    attributes = tuple(str(a).strip() for a in attrs)
    folded = [a.casefold() for a in attributes]
    if len(set(folded)) != len(folded) or "" in folded:
        raise TaxonomyError(f"detail {ident!r} has duplicate or blank attributes")
    examples = tuple(str(e) for e in doc.get("examples") or ())
    return DetailCategory(ident, name, dtype, attributes, examples)


def dump_taxonomy(taxonomy: CategoryTaxonomy) -> str:
    doc = {
        "version": taxonomy.version,
        "mains": [
            {
                "id": m.id,
                "name": m.display_name,
                "subs": [
                    {
                        "id": s.id,
                        "name": s.display_name,
                        "details": [_dump_detail(d) for d in s.details],
                    }
                    for s in m.subs
                ],
            }
            for m in taxonomy.mains
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False, allow_unicode=True)


def _dump_detail(d: DetailCategory) -> dict:
    out: dict[str, Any] = {
        "id": d.id,
        "name": d.display_name,
        "type": d.type.value,
        "attributes": list(d.attributes),
    }
    if d.examples:
        out["examples"] = list(d.examples)
    return out


# -- filtering -----------------------------------------------------------------


def opt_out(taxonomy: CategoryTaxonomy, excluded: Iterable[str]) -> CategoryTaxonomy:
    """Return a copy of ``taxonomy`` without the given sub-categories.

    A main category left with no subs is dropped as well. The version string
    is kept: opt-out narrows what is extracted, it does not change the
    meaning of stored paths.
    """
    excluded = set(excluded)
    unknown = excluded - set(taxonomy.sub_ids())
    if unknown:
        raise TaxonomyError(f"unknown sub-categories: {sorted(unknown)}")
    if not excluded:
        return taxonomy
    mains = []
    for m in taxonomy.mains:
        subs = tuple(s for s in m.subs if s.id not in excluded)
        if subs:
            mains.append(replace(m, subs=subs))
    if not mains:
        raise TaxonomyError("opt-out would remove every category")
    return CategoryTaxonomy(mains=tuple(mains), version=taxonomy.version)


def validate_path(taxonomy: CategoryTaxonomy, path: CategoryPath) -> bool:
    return path in taxonomy._index


# -- schema compilation ---------------------------------------------------------


def _output_record() -> dict[str, Any]:
    return {
        "type": "object",
        "properties": {
            SENTENCE_FIELD: {
                "type": "string",
                "description": "user sentence where the user revealed the preference.",
            },
            VALUE_FIELD: {
                "type": "string",
                "description": "The preference of the user.",
            },
        },
    }


def _sentinel(scope: str) -> dict[str, Any]:
    return {
        "type": "array",
        "description": (
            f"Preferences about {scope} that fit none of the other parameters, "
            "or an explicit statement that there is no preference. Leave empty otherwise."
        ),
        "items": _output_record(),
    }


def _leaf(detail: DetailCategory) -> dict[str, Any]:
    examples = list(detail.examples or detail.attributes)
    if detail.type is DetailType.MP:
        return {
            "type": "array",
            "description": f"The user's preferences for '{detail.display_name}'. "
            "Several preferences are allowed.",
            "items": _output_record(),
            "examples": examples,
        }
    leaf = _output_record()
    leaf["description"] = (
        f"The user's single preference for '{detail.display_name}'."
    )
    leaf["examples"] = examples
    return leaf


@dataclass(frozen=True)
class CompiledSchema:
    function_name: str
    function_description: str
    parameter_tree: dict[str, Any]
    taxonomy: CategoryTaxonomy

    def tool_definition(self) -> dict[str, Any]:
        return {
            "type": "function",
            "function": {
                "name": self.function_name,
                "description": self.function_description,
                "parameters": self.parameter_tree,
            },
        }

    def tool_json(self) -> str:
        """Canonical serialization of the tool definition, as sent on the wire."""
        return dump_json(self.tool_definition())

    def parameter_name(self, path: CategoryPath) -> str:
        if not validate_path(self.taxonomy, path):
            raise KeyError(f"{path} is not part of this schema")
        return f"{path.main}.{path.sub}.{path.detail}"

    def path_for(self, parameter_name: str) -> CategoryPath:
        path = CategoryPath(*parameter_name.split("."))
        if not validate_path(self.taxonomy, path):
            raise KeyError(parameter_name)
        return path

    def leaf_names(self) -> list[str]:
        return [self.parameter_name(p) for p in self.taxonomy.paths()]


def dump_json(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def compile_schema(taxonomy: CategoryTaxonomy) -> CompiledSchema:
    """Build the nested tool-call parameter schema mirroring ``taxonomy``.

    Mains and subs become optional objects, details become optional leaves
    (an array of output records for MP, a single record for SP). Every main
    object and every sub object gets a ``no_or_other_preference`` slot.
    Nothing is marked required.
    """
    main_props: dict[str, Any] = {}
    for m in taxonomy.mains:
        sub_props: dict[str, Any] = {SENTINEL: _sentinel(m.display_name)}
        for s in m.subs:
            detail_props: dict[str, Any] = {SENTINEL: _sentinel(s.display_name)}
            for d in s.details:
                detail_props[d.id] = _leaf(d)
            sub_props[s.id] = {
                "type": "object",
                "description": f"The user's preferences in the category '{s.display_name}'.",
                "properties": detail_props,
            }
        main_props[m.id] = {
            "type": "object",
            "description": f"The user's preferences in the category '{m.display_name}'.",
            "properties": sub_props,
        }
    tree = {"type": "object", "properties": main_props}
    return CompiledSchema(
        function_name=EXTRACTION_FUNCTION_NAME,
        function_description=EXTRACTION_FUNCTION_DESCRIPTION,
        parameter_tree=tree,
        taxonomy=taxonomy,
    )


def iter_parameters(tree: dict[str, Any], prefix: tuple[str, ...] = ()) -> Iterator[tuple[tuple[str, ...], dict]]:
    """Yield ``(name_path, descriptor)`` for every named parameter in a tree."""
    for name, desc in tree.get("properties", {}).items():
        path = prefix + (name,)
        yield path, desc
        if len(path) < 3 and name != SENTINEL and desc.get("type") == "object":
            yield from iter_parameters(desc, path)
