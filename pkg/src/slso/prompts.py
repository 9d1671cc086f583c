"""Deterministic builders for every prompt the pipeline sends.

Templates ship as embedded package resources and can be overridden per file
through a templates directory (plain text with ``{name}`` placeholders).
Each built bundle carries a template id derived from the template bytes, so
transcripts stay interpretable after wording changes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .consistency import FieldDiff
from .schema import (
    FIELD_VOCABULARIES,
    CystStructuredData,
    FindingText,
    ToothSet,
    emit_structured_json,
)

EXPECTS_STRUCTURED_JSON = "structured_json"
EXPECTS_TOOTH_LIST = "tooth_list"
EXPECTS_FINDING_TEXT = "finding_text"

# Step kinds name the artifact a call produces; feedback and retry prompts
# share the kind of the artifact they regenerate (mock scripts key on this).
STEP_STRUCTURED_GENERATION = "structured_generation"
STEP_TOOTH_EXTRACTION = "tooth_extraction"
STEP_FINDING_GENERATION = "finding_generation"
STEP_RESTRUCTURE = "restructure"
STEP_COT = "cot"

TEMPLATE_NAMES = (
    "system",
    "structured_generation",
    "tooth_extraction",
    "tooth_feedback",
    "finding_generation",
    "restructure",
    "finding_feedback",
    "structured_retry",
    "finding_retry",
    "cot",
)

_LANGUAGE_NAMES = {"en": "English", "ja": "Japanese"}


@dataclass(frozen=True)
class PromptBundle:
    """One ready-to-send prompt with its expected response shape."""

    system_text: str
    user_text: str
    expects: str
    step_kind: str
    template_id: str


def _render(template: str, **values: str) -> str:
    """Fill ``{name}`` placeholders, leaving unknown ones untouched."""
    result = template
    for key, value in values.items():
        result = result.replace(f"{{{key}}}", value)
    return result


def _and_join(items: Sequence[str]) -> str:
    """``["11","12","13"]`` becomes ``"11, 12, and 13"``."""
    if not items:
        return ""
    if len(items) == 1:
        return items[0]
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return f"{', '.join(items[:-1])}, and {items[-1]}"


def _bracket_list(teeth: ToothSet) -> str:
    return f"[{', '.join(teeth.labels())}]"


def _schema_items_block() -> str:
    """Enumerate the seven categories with their exact vocabularies."""
    lines = []
    for name, vocabulary in FIELD_VOCABULARIES.items():
        qualifier = (
            " (relationship to the mandibular canal / maxillary sinus)"
            if name == "anatomical_relation"
            else ""
        )
        lines.append(f"- {name}{qualifier}: one of {' | '.join(vocabulary)}")
    lines.append(
        '- affected_teeth: list of affected FDI tooth numbers as two-digit strings'
        ' (for example ["47", "48"])'
    )
    return "\n".join(lines)


def _language_name(tag: str) -> str:
    return _LANGUAGE_NAMES.get(tag, tag)


def describe_diff(diff: FieldDiff) -> str:
    """Render one round-trip diff as a feedback sentence."""
    if diff.category == "affected_teeth":
        if diff.found is None:
            return f"The tooth number {diff.expected} is missing."
        return f"The tooth number {diff.found} does not appear in the structured data."
    category = diff.category.replace("_", " ")
    return (
        f"The {category} description differs from the structured data"
        f" (expected {diff.expected}, found {diff.found})."
    )


class PromptForge:
    """Loads templates once and builds prompts as pure functions of input."""

    def __init__(self, template_dir: str | Path | None = None):
        self._templates: dict[str, str] = {}
        self._versions: dict[str, str] = {}
        override = Path(template_dir) if template_dir is not None else None
        embedded = resources.files("slso").joinpath("templates")
        for name in TEMPLATE_NAMES:
            path = override / f"{name}.txt" if override is not None else None
            if path is not None and path.exists():
                text = path.read_text(encoding="utf-8")
            else:
                text = embedded.joinpath(f"{name}.txt").read_text("utf-8")
            text = text.rstrip("\n")
            digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:8]
            self._templates[name] = text
            self._versions[name] = f"{name}@{digest}"

    def template_versions(self) -> dict[str, str]:
        """Template ids, recorded in run manifests."""
        return dict(self._versions)

    def _bundle(self, name: str, expects: str, step_kind: str, **values: str) -> PromptBundle:
        return PromptBundle(
            system_text=self._templates["system"],
            user_text=_render(self._templates[name], **values),
            expects=expects,
            step_kind=step_kind,
            template_id=self._versions[name],
        )

    def structured_generation_prompt(self) -> PromptBundle:
        """Initial schema-constrained interpretation request (with image)."""
        return self._bundle(
            "structured_generation",
            EXPECTS_STRUCTURED_JSON,
            STEP_STRUCTURED_GENERATION,
            schema_items=_schema_items_block(),
        )

    def tooth_extraction_prompt(self) -> PromptBundle:
        """Image-only request for the suspected affected FDI numbers."""
        return self._bundle(
            "tooth_extraction", EXPECTS_TOOTH_LIST, STEP_TOOTH_EXTRACTION
        )

    def tooth_feedback_prompt(self, structured: ToothSet, extracted: ToothSet) -> PromptBundle:
        """Regeneration request after a tooth-number mismatch.

        States the structured-data teeth, the image-extracted teeth and the
        differences in both directions, then re-asks for the full record.
        """
        missing = extracted - structured
        extra = structured - extracted
        lines = []
        if missing:
            lines.append(
                f"Difference: Numbers {_and_join(missing.labels())}"
                " are not included in the structured data."
            )
        if extra:
            lines.append(
                f"Numbers {_and_join(extra.labels())} appear in the structured data"
                " but were not extracted from the image."
            )
        if not lines:
            lines.append("No affected teeth were named in the structured data.")
        return self._bundle(
            "tooth_feedback",
            EXPECTS_STRUCTURED_JSON,
            STEP_STRUCTURED_GENERATION,
            structured_teeth=_bracket_list(structured),
            extracted_teeth=_bracket_list(extracted),
            difference_lines="\n".join(lines),
            schema_items=_schema_items_block(),
        )

    def finding_generation_prompt(
        self, data: CystStructuredData, language: str = "en"
    ) -> PromptBundle:
        """Findings request embedding the approved canonical JSON."""
        return self._bundle(
            "finding_generation",
            EXPECTS_FINDING_TEXT,
            STEP_FINDING_GENERATION,
            language=_language_name(language),
            structured_json=emit_structured_json(data),
        )

    def restructure_prompt(self, finding: FindingText) -> PromptBundle:
        """Request to convert generated findings back into structured data."""
        return self._bundle(
            "restructure",
            EXPECTS_STRUCTURED_JSON,
            STEP_RESTRUCTURE,
            schema_items=_schema_items_block(),
            finding=finding.body,
        )

    def finding_feedback_prompt(
        self,
        data: CystStructuredData,
        diffs: Iterable[FieldDiff],
        language: str = "en",
    ) -> PromptBundle:
        """Findings regeneration request stating each detected inconsistency."""
        sentences = [describe_diff(diff) for diff in diffs]
        if not sentences:
            raise ValueError("finding feedback requires at least one diff")
        return self._bundle(
            "finding_feedback",
            EXPECTS_FINDING_TEXT,
            STEP_FINDING_GENERATION,
            inconsistencies="\n".join(sentences),
            language=_language_name(language),
            structured_json=emit_structured_json(data),
        )

    def structured_retry_prompt(self, error: str) -> PromptBundle:
        """Regeneration request after an unusable structured-data response."""
        return self._bundle(
            "structured_retry",
            EXPECTS_STRUCTURED_JSON,
            STEP_STRUCTURED_GENERATION,
            error=error,
            schema_items=_schema_items_block(),
        )

    def finding_retry_prompt(
        self, data: CystStructuredData, error: str, language: str = "en"
    ) -> PromptBundle:
        """Findings regeneration request after an unusable response."""
        return self._bundle(
            "finding_retry",
            EXPECTS_FINDING_TEXT,
            STEP_FINDING_GENERATION,
            error=error,
            language=_language_name(language),
            structured_json=emit_structured_json(data),
        )

    def cot_prompt(self) -> PromptBundle:
        """Seven-step chain-of-thought baseline prompt."""
        return self._bundle("cot", EXPECTS_FINDING_TEXT, STEP_COT)
