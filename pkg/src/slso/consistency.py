"""Consistency checks between generated artifacts.

Two checks drive the self-correction loops: the tooth-number inclusion check
comparing structured data against the teeth extracted from the image, and the
round-trip check comparing the approved structured data against the record
re-extracted from the generated findings.  Both return machine-readable
verdicts whose diffs feed the feedback prompts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .schema import FIELD_VOCABULARIES, CystStructuredData, ToothSet

TOOTH_MATCH = "match"
TOOTH_MISMATCH = "mismatch"
ROUNDTRIP_CONSISTENT = "consistent"
ROUNDTRIP_INCONSISTENT = "inconsistent"


class UnmappableValue(Exception):
    """Surface form cannot be mapped onto the category's vocabulary."""

    def __init__(self, category: str, raw: str):
        self.category = category
        self.raw = raw
        super().__init__(f"no mapping for {category} value {raw!r}")


class SynonymTableError(Exception):
    """Synonym table file is malformed."""


class SynonymTable:
    """Case-insensitive mapping of surface forms to vocabulary values.

    File format: plain UTF-8, one ``category | surface form | canonical``
    mapping per line, ``#`` comments and blank lines ignored.
    """

    def __init__(self, mapping: dict[tuple[str, str], str]):
        for (category, _surface), canonical in mapping.items():
            vocabulary = FIELD_VOCABULARIES.get(category)
            if vocabulary is None:
                raise SynonymTableError(f"unknown category: {category!r}")
            if canonical not in vocabulary:
                raise SynonymTableError(
                    f"{canonical!r} is not a {category} vocabulary value"
                )
        self._mapping = dict(mapping)

    @classmethod
    def parse(cls, text: str) -> "SynonymTable":
        mapping: dict[tuple[str, str], str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = [part.strip() for part in stripped.split("|")]
            if len(parts) != 3 or not all(parts):
                raise SynonymTableError(f"line {lineno}: expected 'category | surface | canonical'")
            category, surface, canonical = parts
            mapping[(category, surface.casefold())] = canonical
        return cls(mapping)

    @classmethod
    def load(cls, path: str | Path) -> "SynonymTable":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "SynonymTable":
        """Table shipped with the package."""
        text = resources.files("slso").joinpath("data/synonyms.txt").read_text("utf-8")
        return cls.parse(text)

    def normalize(self, category: str, raw: str) -> str:
        folded = raw.strip().casefold()
        if folded in FIELD_VOCABULARIES.get(category, ()):
            return folded
        try:
            return self._mapping[(category, folded)]
        except KeyError:
            raise UnmappableValue(category, raw) from None


_DEFAULT_TABLE: SynonymTable | None = None


def default_synonym_table() -> SynonymTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = SynonymTable.default()
    return _DEFAULT_TABLE


def normalize_value(category: str, raw: str, table: SynonymTable | None = None) -> str:
    """Map a surface form onto its canonical vocabulary value.

    Vocabulary members map to themselves, so the function is idempotent.
    Raises :class:`UnmappableValue` when no mapping exists.
    """
    return (table or default_synonym_table()).normalize(category, raw)


@dataclass(frozen=True)
class ToothVerdict:
    """Outcome of the tooth-number inclusion check."""

    status: str
    missing_from_structured: ToothSet = field(default_factory=ToothSet)
    extra_in_structured: ToothSet = field(default_factory=ToothSet)

    @property
    def is_match(self) -> bool:
        return self.status == TOOTH_MATCH

    def to_dict(self) -> dict:
        return {
            "type": "tooth",
            "status": self.status,
            "missing_from_structured": self.missing_from_structured.labels(),
            "extra_in_structured": self.extra_in_structured.labels(),
        }


@dataclass(frozen=True)
class FieldDiff:
    """One category disagreement between original and restructured data.

    Tooth differences are encoded per tooth: ``found is None`` marks a tooth
    missing from the restructured record, ``expected is None`` a surplus one.
    """

    category: str
    expected: str | None
    found: str | None

    def __post_init__(self) -> None:
        if self.expected == self.found:
            raise ValueError("diff requires expected != found")

    def to_dict(self) -> dict:
        return {"category": self.category, "expected": self.expected, "found": self.found}


@dataclass(frozen=True)
class RoundTripVerdict:
    """Outcome of the structured-data round-trip check."""

    status: str
    diffs: tuple[FieldDiff, ...] = ()

    @property
    def is_consistent(self) -> bool:
        return self.status == ROUNDTRIP_CONSISTENT

    def to_dict(self) -> dict:
        return {
            "type": "roundtrip",
            "status": self.status,
            "diffs": [diff.to_dict() for diff in self.diffs],
        }


def check_tooth_consistency(structured: ToothSet, extracted: ToothSet) -> ToothVerdict:
    """Inclusion check between structured-data teeth and image-extracted teeth.

    A match requires the structured set to be non-empty and fully included in
    the extracted set (the extraction may name additional teeth).  A
    structured tooth absent from the extraction is a hallucination signal and
    forces a mismatch, as does an empty structured set.
    """
    if structured and structured.issubset(extracted):
        return ToothVerdict(TOOTH_MATCH)
    return ToothVerdict(
        TOOTH_MISMATCH,
        missing_from_structured=extracted - structured,
        extra_in_structured=structured - extracted,
    )


def check_roundtrip(
    original: CystStructuredData, restructured: CystStructuredData
) -> RoundTripVerdict:
    """Field-by-field comparison of the approved record and its round trip.

    Both inputs are validated records, so values are already canonical
    (synonym normalization happens when the restructured record is parsed).
    Teeth are compared as sets; every absent or surplus tooth yields its own
    diff.  Diffs follow the canonical field order, teeth last in ascending
    order with absent teeth before surplus ones.
    """
    diffs: list[FieldDiff] = []
    for name in FIELD_VOCABULARIES:
        expected, found = original.value(name), restructured.value(name)
        if expected != found:
            diffs.append(FieldDiff(name, expected, found))
    for tooth in original.affected_teeth - restructured.affected_teeth:
        diffs.append(FieldDiff("affected_teeth", tooth.label, None))
    for tooth in restructured.affected_teeth - original.affected_teeth:
        diffs.append(FieldDiff("affected_teeth", None, tooth.label))
    if diffs:
        return RoundTripVerdict(ROUNDTRIP_INCONSISTENT, tuple(diffs))
    return RoundTripVerdict(ROUNDTRIP_CONSISTENT)
