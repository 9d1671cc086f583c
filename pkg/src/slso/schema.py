"""Validated domain types and the canonical JSON codec for jaw-cyst structured data.

The seven interpretation categories and their closed vocabularies are the
single source of truth for every other module: prompt builders render them,
the consistency engine compares them, and the evaluator scores them.  The
canonical JSON emitted by :func:`emit_structured_json` is the on-disk contract
for ground-truth files and run outputs.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

# Closed vocabularies for the six enum categories, in canonical key order.
# "none" covers negative anatomical relations ("no association with the
# maxillary sinus"), which generated findings must be able to state.
FIELD_VOCABULARIES: dict[str, tuple[str, ...]] = {
    "radiolucency": ("radiolucent", "radiopaque"),
    "internal_structure": ("unilocular", "multilocular"),
    "boundary": ("well-defined", "ill-defined"),
    "root_resorption": ("no", "mild", "severe"),
    "tooth_displacement": ("no", "mild", "severe"),
    "anatomical_relation": ("none", "contact", "displacement", "invasion"),
}

# Fixed key order of the canonical JSON document.
STRUCTURED_FIELD_ORDER: tuple[str, ...] = (*FIELD_VOCABULARIES, "affected_teeth")


class SchemaError(Exception):
    """Base class for schema validation failures."""


class InvalidFdi(SchemaError):
    """Token is not a valid permanent-dentition FDI tooth number."""

    def __init__(self, token: str):
        self.token = token
        super().__init__(f"invalid FDI tooth number: {token!r}")


class ToothParseError(SchemaError):
    """A tooth-list response contained a token that is not an FDI number."""

    def __init__(self, token: str):
        self.token = token
        super().__init__(f"cannot parse tooth token: {token!r}")


class MalformedJson(SchemaError):
    """Candidate text is not a JSON object."""


class UnknownField(SchemaError):
    """Document carries a key outside the schema."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown field: {name!r}")


class MissingField(SchemaError):
    """Document lacks a required schema key."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing field: {name!r}")


class InvalidValue(SchemaError):
    """Field value is outside its vocabulary."""

    def __init__(self, field_name: str, value: object):
        self.field_name = field_name
        self.value = value
        super().__init__(f"invalid value for {field_name}: {value!r}")


class EmptyToothList(SchemaError):
    """affected_teeth must name at least one tooth."""

    def __init__(self) -> None:
        super().__init__("affected_teeth must not be empty")


class InvalidFinding(SchemaError):
    """Finding text violates the finding-format contract."""


@dataclass(frozen=True, order=True)
class FdiTooth:
    """One permanent tooth in FDI two-digit notation (quadrant 1-4, position 1-8)."""

    quadrant: int
    position: int

    def __post_init__(self) -> None:
        if self.quadrant not in (1, 2, 3, 4) or self.position not in range(1, 9):
            raise InvalidFdi(f"{self.quadrant}{self.position}")

    @property
    def label(self) -> str:
        """Canonical two-digit form, e.g. ``"47"``."""
        return f"{self.quadrant}{self.position}"

    def __str__(self) -> str:
        return self.label


def parse_fdi_tooth(token: str) -> FdiTooth:
    """Parse a single FDI token; an optional leading ``#`` is accepted.

    Raises :class:`InvalidFdi` unless the token is exactly two digits with
    quadrant 1-4 and position 1-8.
    """
    text = token.strip()
    if text.startswith("#"):
        text = text[1:]
    if len(text) != 2 or not text.isdigit():
        raise InvalidFdi(token)
    quadrant, position = int(text[0]), int(text[1])
    if quadrant not in (1, 2, 3, 4) or position not in range(1, 9):
        raise InvalidFdi(token)
    return FdiTooth(quadrant, position)


class ToothSet:
    """Deduplicated set of FDI teeth with deterministic ascending emission."""

    __slots__ = ("_teeth",)

    def __init__(self, teeth: Iterable[FdiTooth] = ()):
        self._teeth = frozenset(teeth)

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "ToothSet":
        return cls(parse_fdi_tooth(label) for label in labels)

    def sorted(self) -> list[FdiTooth]:
        return sorted(self._teeth)

    def labels(self) -> list[str]:
        """Canonical two-digit labels in ascending order."""
        return [tooth.label for tooth in self.sorted()]

    def issubset(self, other: "ToothSet") -> bool:
        return self._teeth <= other._teeth

    def __sub__(self, other: "ToothSet") -> "ToothSet":
        return ToothSet(self._teeth - other._teeth)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ToothSet):
            return NotImplemented
        return self._teeth == other._teeth

    def __hash__(self) -> int:
        return hash(self._teeth)

    def __iter__(self) -> Iterator[FdiTooth]:
        return iter(self.sorted())

    def __len__(self) -> int:
        return len(self._teeth)

    def __contains__(self, tooth: object) -> bool:
        return tooth in self._teeth

    def __bool__(self) -> bool:
        return bool(self._teeth)

    def __repr__(self) -> str:
        return f"ToothSet({{{', '.join(self.labels())}}})"


def parse_tooth_list(text: str) -> ToothSet:
    """Parse a free-text tooth enumeration such as ``"33, 34, 35, 36"``.

    Brackets and quotes are stripped; an empty or whitespace-only response
    yields an empty set (the model found no affected teeth).  Any non-FDI
    token raises :class:`ToothParseError`.
    """
    cleaned = text.strip().strip("[](){}")
    if not cleaned.strip():
        return ToothSet()
    teeth = []
    for raw in re.split(r"[,\s]+", cleaned):
        token = raw.strip().strip("\"'")
        if not token:
            continue
        try:
            teeth.append(parse_fdi_tooth(token))
        except InvalidFdi:
            raise ToothParseError(token) from None
    return ToothSet(teeth)


@dataclass(frozen=True)
class CystStructuredData:
    """One validated record of the seven interpretation categories."""

    radiolucency: str
    internal_structure: str
    boundary: str
    root_resorption: str
    tooth_displacement: str
    anatomical_relation: str
    affected_teeth: ToothSet

    def __post_init__(self) -> None:
        for name, vocabulary in FIELD_VOCABULARIES.items():
            value = getattr(self, name)
            if value not in vocabulary:
                raise InvalidValue(name, value)
        if not isinstance(self.affected_teeth, ToothSet):
            raise InvalidValue("affected_teeth", self.affected_teeth)
        if not self.affected_teeth:
            raise EmptyToothList()

    def value(self, field_name: str) -> str:
        """Canonical value of one of the six enum categories."""
        if field_name not in FIELD_VOCABULARIES:
            raise KeyError(field_name)
        return getattr(self, field_name)


@dataclass(frozen=True)
class FindingText:
    """Natural-language findings with a language tag.

    The body must be non-empty and end in a terminal period (``.`` or the
    ideographic ``。``), matching the report style the pipeline targets.
    """

    body: str
    language: str = "en"

    def __post_init__(self) -> None:
        stripped = self.body.strip()
        if not stripped:
            raise InvalidFinding("finding body is empty")
        if not stripped.endswith((".", "。")):
            raise InvalidFinding("finding must end with a period")
        if not self.language.strip():
            raise InvalidFinding("language tag is empty")


_FENCE_RE = re.compile(r"^```[\w-]*\s*\n(.*?)\n?```\s*$", re.DOTALL)


def strip_code_fences(text: str) -> str:
    """Remove one surrounding Markdown code fence, if present."""
    match = _FENCE_RE.match(text.strip())
    return match.group(1) if match else text


def parse_structured_json(
    text: str,
    normalizer: Callable[[str, str], str] | None = None,
) -> CystStructuredData:
    """Parse and validate a candidate structured-data document.

    Surrounding code fences are stripped, values are case-folded before
    vocabulary matching and unknown keys are rejected.  ``normalizer`` may
    map near-miss surface forms (synonyms) onto vocabulary members; it must
    raise on unmappable input, which is surfaced as :class:`InvalidValue`.
    """
    candidate = strip_code_fences(text)
    try:
        document = json.loads(candidate)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedJson(f"not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise MalformedJson("top-level JSON value is not an object")

    unknown = [key for key in document if key not in STRUCTURED_FIELD_ORDER]
    if unknown:
        raise UnknownField(sorted(unknown)[0])
    for key in STRUCTURED_FIELD_ORDER:
        if key not in document:
            raise MissingField(key)

    values: dict[str, str] = {}
    for name, vocabulary in FIELD_VOCABULARIES.items():
        raw = document[name]
        if not isinstance(raw, str):
            raise InvalidValue(name, raw)
        folded = raw.strip().casefold()
        if folded not in vocabulary and normalizer is not None:
            try:
                folded = normalizer(name, folded)
            except Exception:
                raise InvalidValue(name, raw) from None
        if folded not in vocabulary:
            raise InvalidValue(name, raw)
        values[name] = folded

    teeth_raw = document["affected_teeth"]
    if not isinstance(teeth_raw, list):
        raise InvalidValue("affected_teeth", teeth_raw)
    if not teeth_raw:
        raise EmptyToothList()
    teeth = []
    for item in teeth_raw:
        if not isinstance(item, (str, int)):
            raise InvalidValue("affected_teeth", item)
        try:
            teeth.append(parse_fdi_tooth(str(item)))
        except InvalidFdi:
            raise InvalidValue("affected_teeth", item) from None

    return CystStructuredData(affected_teeth=ToothSet(teeth), **values)


def emit_structured_json(data: CystStructuredData) -> str:
    """Emit the canonical, byte-stable JSON document for a record.

    Keys appear in the fixed schema order and teeth in ascending canonical
    order, so equal records always serialize to identical bytes.
    """
    document: dict[str, object] = {
        name: data.value(name) for name in FIELD_VOCABULARIES
    }
    document["affected_teeth"] = data.affected_teeth.labels()
    return json.dumps(document, indent=2)


def structured_data_hash(data: CystStructuredData) -> str:
    """SHA-256 hex digest of the canonical encoding."""
    return hashlib.sha256(emit_structured_json(data).encode("utf-8")).hexdigest()


def structured_output_schema() -> dict:
    """JSON-schema descriptor of the record, for constrained decoding."""
    properties: dict[str, object] = {
        name: {"type": "string", "enum": list(vocabulary)}
        for name, vocabulary in FIELD_VOCABULARIES.items()
    }
    properties["affected_teeth"] = {
        "type": "array",
        "items": {"type": "string", "pattern": "^[1-4][1-8]$"},
        "minItems": 1,
    }
    return {
        "type": "object",
        "properties": properties,
        "required": list(STRUCTURED_FIELD_ORDER),
        "additionalProperties": False,
    }
