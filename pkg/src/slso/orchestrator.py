"""Two-stage self-correction loop and the chain-of-thought baseline.

Stage 1 generates structured data and extracts tooth numbers from the image
in parallel, then loops on the tooth-number consistency check; stage 2
generates findings from the approved record and loops on the round-trip
check, regenerating only the findings.  Every call, parse result and verdict
is appended to a transcript that is sufficient to replay the whole case.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .backend import BackendError, DecodingParams, VisionRequest, VisionResponse
from .consistency import (
    RoundTripVerdict,
    SynonymTable,
    ToothVerdict,
    check_roundtrip,
    check_tooth_consistency,
    default_synonym_table,
)
from .prompts import EXPECTS_STRUCTURED_JSON, PromptBundle, PromptForge
from .schema import (
    CystStructuredData,
    FindingText,
    InvalidFinding,
    SchemaError,
    ToothSet,
    emit_structured_json,
    parse_structured_json,
    parse_tooth_list,
    structured_data_hash,
    structured_output_schema,
)

STATUS_RESOLVED = "resolved"
STATUS_UNRESOLVED_STAGE1 = "unresolved_stage1"
STATUS_UNRESOLVED_STAGE2 = "unresolved_stage2"
STATUS_BACKEND_FAILED = "backend_failed"


class OrchestratorError(Exception):
    """Base class for loop failures; carries the transcript so far."""

    def __init__(self, message: str, transcript: "LoopTranscript"):
        self.transcript = transcript
        super().__init__(message)


class Stage1Exhausted(OrchestratorError):
    """Tooth-number consistency never reached within the iteration cap."""

    def __init__(
        self,
        verdict: ToothVerdict | None,
        transcript: "LoopTranscript",
        last_data: CystStructuredData | None,
    ):
        self.verdict = verdict
        self.last_data = last_data
        super().__init__("stage-1 regeneration cap exhausted", transcript)


class Stage2Exhausted(OrchestratorError):
    """Round-trip consistency never reached within the iteration cap."""

    def __init__(
        self,
        verdict: RoundTripVerdict | None,
        transcript: "LoopTranscript",
        last_finding: FindingText | None,
    ):
        self.verdict = verdict
        self.last_finding = last_finding
        super().__init__("stage-2 regeneration cap exhausted", transcript)


class BackendFailed(OrchestratorError):
    """A backend call failed; the failing step is recorded in the transcript."""

    def __init__(self, step_kind: str, cause: BackendError, transcript: "LoopTranscript"):
        self.step_kind = step_kind
        self.cause = cause
        super().__init__(f"backend failed at {step_kind}: {cause}", transcript)


@dataclass(frozen=True)
class CaseInput:
    """One case to interpret: an annotated ROI image plus a language tag."""

    case_id: str
    image: bytes
    image_media_type: str = "image/png"
    language: str = "en"

    def __post_init__(self) -> None:
        if not self.case_id.strip():
            raise ValueError("case_id must be non-empty")
        if not self.image:
            raise ValueError("image payload must be non-empty")


@dataclass(frozen=True)
class IterationCaps:
    """Regeneration caps per stage (0 disables regeneration entirely)."""

    stage1: int = 5
    stage2: int = 3

    def __post_init__(self) -> None:
        if self.stage1 < 0 or self.stage2 < 0:
            raise ValueError("iteration caps must be >= 0")


@dataclass
class TranscriptEntry:
    """One backend call with its parse result and, when closing an
    iteration, the consistency verdict."""

    stage: int
    iteration: int
    step_kind: str
    template_id: str
    user_text: str
    raw_response: str | None
    parsed: str | None = None
    error: str | None = None
    verdict: dict | None = None
    structured_hash: str | None = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "iteration": self.iteration,
            "step_kind": self.step_kind,
            "template_id": self.template_id,
            "user_text": self.user_text,
            "raw_response": self.raw_response,
            "parsed": self.parsed,
            "error": self.error,
            "verdict": self.verdict,
            "structured_hash": self.structured_hash,
        }

    @classmethod
    def from_dict(cls, document: dict) -> "TranscriptEntry":
        return cls(**document)


@dataclass
class LoopTranscript:
    """Append-only audit of a case run, sufficient to replay it."""

    entries: list[TranscriptEntry] = field(default_factory=list)
    stage1_regenerations: int = 0
    stage2_regenerations: int = 0

    def append(self, entry: TranscriptEntry) -> TranscriptEntry:
        self.entries.append(entry)
        return entry

    def to_dict(self) -> dict:
        return {
            "stage1_regenerations": self.stage1_regenerations,
            "stage2_regenerations": self.stage2_regenerations,
            "entries": [entry.to_dict() for entry in self.entries],
        }

    @classmethod
    def from_dict(cls, document: dict) -> "LoopTranscript":
        return cls(
            entries=[TranscriptEntry.from_dict(e) for e in document["entries"]],
            stage1_regenerations=document["stage1_regenerations"],
            stage2_regenerations=document["stage2_regenerations"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LoopTranscript":
        return cls.from_dict(json.loads(text))


@dataclass
class CaseResult:
    """Final outcome of a case run; unresolved runs keep their last-best output."""

    case_id: str
    status: str
    structured: CystStructuredData | None
    finding: str | None
    transcript: LoopTranscript


def _request(
    case: CaseInput,
    bundle: PromptBundle,
    with_image: bool,
    params: DecodingParams,
) -> VisionRequest:
    return VisionRequest(
        step_kind=bundle.step_kind,
        system_text=bundle.system_text,
        user_text=bundle.user_text,
        image=case.image if with_image else None,
        image_media_type=case.image_media_type,
        params=params,
        response_schema=(
            structured_output_schema() if bundle.expects == EXPECTS_STRUCTURED_JSON else None
        ),
    )


def _call(
    backend,
    case: CaseInput,
    bundle: PromptBundle,
    transcript: LoopTranscript,
    stage: int,
    iteration: int,
    *,
    with_image: bool,
    params: DecodingParams,
    structured_hash: str | None = None,
) -> VisionResponse:
    """Send one request, recording the entry; raises BackendFailed on error."""
    entry = TranscriptEntry(
        stage=stage,
        iteration=iteration,
        step_kind=bundle.step_kind,
        template_id=bundle.template_id,
        user_text=bundle.user_text,
        raw_response=None,
        structured_hash=structured_hash,
    )
    try:
        response = backend.send(_request(case, bundle, with_image, params))
    except BackendError as exc:
        entry.error = f"{type(exc).__name__}: {exc}"
        transcript.append(entry)
        raise BackendFailed(bundle.step_kind, exc, transcript) from exc
    entry.raw_response = response.text
    transcript.append(entry)
    return response


def run_stage1(
    case: CaseInput,
    backend,
    forge: PromptForge | None = None,
    caps: IterationCaps = IterationCaps(),
    transcript: LoopTranscript | None = None,
    params: DecodingParams = DecodingParams(),
) -> tuple[CystStructuredData, LoopTranscript]:
    """Stage 1: structured generation and tooth extraction until consistent.

    Each iteration issues the structured-generation and tooth-extraction
    requests concurrently, joins them, and runs the inclusion check.  On a
    mismatch (or an unparseable response, which counts as a failed iteration)
    both artifacts are regenerated: the structured side with a feedback
    prompt, the extraction side with the original prompt.
    """
    forge = forge if forge is not None else PromptForge()
    t = transcript if transcript is not None else LoopTranscript()

    structured_bundle = forge.structured_generation_prompt()
    last_verdict: ToothVerdict | None = None
    last_data: CystStructuredData | None = None

    for iteration in range(caps.stage1 + 1):
        if iteration > 0:
            t.stage1_regenerations += 1
        extraction_bundle = forge.tooth_extraction_prompt()

        with ThreadPoolExecutor(max_workers=2) as pool:
            structured_future = pool.submit(
                backend.send, _request(case, structured_bundle, True, params)
            )
            extraction_future = pool.submit(
                backend.send, _request(case, extraction_bundle, True, params)
            )
            structured_outcome = _settle(structured_future)
            extraction_outcome = _settle(extraction_future)

        structured_entry = _record_outcome(
            t, 1, iteration, structured_bundle, structured_outcome
        )
        extraction_entry = _record_outcome(
            t, 1, iteration, extraction_bundle, extraction_outcome
        )
        for bundle, outcome in (
            (structured_bundle, structured_outcome),
            (extraction_bundle, extraction_outcome),
        ):
            if isinstance(outcome, BackendError):
                raise BackendFailed(bundle.step_kind, outcome, t)

        data: CystStructuredData | None = None
        teeth: ToothSet | None = None
        try:
            data = parse_structured_json(structured_outcome.text)
            structured_entry.parsed = emit_structured_json(data)
            last_data = data
        except SchemaError as exc:
            structured_entry.error = f"{type(exc).__name__}: {exc}"
        try:
            teeth = parse_tooth_list(extraction_outcome.text)
            extraction_entry.parsed = ", ".join(teeth.labels())
        except SchemaError as exc:
            extraction_entry.error = f"{type(exc).__name__}: {exc}"

        if data is None or teeth is None:
            # Parse failure counts as a failed iteration and triggers
            # regeneration with an error-describing prompt.
            if structured_entry.error is not None:
                structured_bundle = forge.structured_retry_prompt(structured_entry.error)
            else:
                structured_bundle = forge.structured_generation_prompt()
            continue

        verdict = check_tooth_consistency(data.affected_teeth, teeth)
        extraction_entry.verdict = verdict.to_dict()
        last_verdict = verdict
        if verdict.is_match:
            return data, t
        structured_bundle = forge.tooth_feedback_prompt(data.affected_teeth, teeth)

    raise Stage1Exhausted(last_verdict, t, last_data)


def _settle(future):
    """Resolve a backend future to its response or BackendError."""
    try:
        return future.result()
    except BackendError as exc:
        return exc


def _record_outcome(
    transcript: LoopTranscript,
    stage: int,
    iteration: int,
    bundle: PromptBundle,
    outcome,
    structured_hash: str | None = None,
) -> TranscriptEntry:
    entry = TranscriptEntry(
        stage=stage,
        iteration=iteration,
        step_kind=bundle.step_kind,
        template_id=bundle.template_id,
        user_text=bundle.user_text,
        raw_response=None,
        structured_hash=structured_hash,
    )
    if isinstance(outcome, BackendError):
        entry.error = f"{type(outcome).__name__}: {outcome}"
    else:
        entry.raw_response = outcome.text
    return transcript.append(entry)


def run_stage2(
    data: CystStructuredData,
    case: CaseInput,
    backend,
    forge: PromptForge | None = None,
    caps: IterationCaps = IterationCaps(),
    transcript: LoopTranscript | None = None,
    synonyms: SynonymTable | None = None,
    params: DecodingParams = DecodingParams(),
) -> tuple[FindingText, LoopTranscript]:
    """Stage 2: finding generation until the round trip is consistent.

    The approved structured data is never modified; every entry of this
    stage carries its hash so immutability can be audited.  On an
    inconsistent round trip only the findings are regenerated, with feedback
    naming each diff.
    """
    forge = forge if forge is not None else PromptForge()
    t = transcript if transcript is not None else LoopTranscript()
    table = synonyms if synonyms is not None else default_synonym_table()
    data_hash = structured_data_hash(data)

    bundle = forge.finding_generation_prompt(data, case.language)
    last_verdict: RoundTripVerdict | None = None
    last_finding: FindingText | None = None

    for iteration in range(caps.stage2 + 1):
        if iteration > 0:
            t.stage2_regenerations += 1

        response = _call(
            backend, case, bundle, t, 2, iteration,
            with_image=False, params=params, structured_hash=data_hash,
        )
        finding_entry = t.entries[-1]
        try:
            finding = FindingText(response.text.strip(), case.language)
            finding_entry.parsed = finding.body
            last_finding = finding
        except InvalidFinding as exc:
            finding_entry.error = f"{type(exc).__name__}: {exc}"
            bundle = forge.finding_retry_prompt(data, str(exc), case.language)
            continue

        restructure_bundle = forge.restructure_prompt(finding)
        r_response = _call(
            backend, case, restructure_bundle, t, 2, iteration,
            with_image=False, params=params, structured_hash=data_hash,
        )
        restructure_entry = t.entries[-1]
        try:
            restructured = parse_structured_json(r_response.text, normalizer=table.normalize)
            restructure_entry.parsed = emit_structured_json(restructured)
        except SchemaError as exc:
            restructure_entry.error = f"{type(exc).__name__}: {exc}"
            bundle = forge.finding_retry_prompt(data, str(exc), case.language)
            continue

        verdict = check_roundtrip(data, restructured)
        restructure_entry.verdict = verdict.to_dict()
        last_verdict = verdict
        if verdict.is_consistent:
            return finding, t
        bundle = forge.finding_feedback_prompt(data, verdict.diffs, case.language)

    raise Stage2Exhausted(last_verdict, t, last_finding)


def run_case(
    case: CaseInput,
    backend,
    forge: PromptForge | None = None,
    caps: IterationCaps = IterationCaps(),
    synonyms: SynonymTable | None = None,
    params: DecodingParams = DecodingParams(),
) -> CaseResult:
    """Run the full two-stage pipeline; failures surface in the status."""
    forge = forge if forge is not None else PromptForge()
    transcript = LoopTranscript()
    try:
        data, _ = run_stage1(case, backend, forge, caps, transcript, params)
    except Stage1Exhausted as exc:
        return CaseResult(
            case.case_id, STATUS_UNRESOLVED_STAGE1, exc.last_data, None, transcript
        )
    except BackendFailed:
        return CaseResult(case.case_id, STATUS_BACKEND_FAILED, None, None, transcript)
    try:
        finding, _ = run_stage2(data, case, backend, forge, caps, transcript, synonyms, params)
    except Stage2Exhausted as exc:
        last = exc.last_finding.body if exc.last_finding is not None else None
        return CaseResult(case.case_id, STATUS_UNRESOLVED_STAGE2, data, last, transcript)
    except BackendFailed:
        return CaseResult(case.case_id, STATUS_BACKEND_FAILED, data, None, transcript)
    return CaseResult(case.case_id, STATUS_RESOLVED, data, finding.body, transcript)


def run_cot_case(
    case: CaseInput,
    backend,
    forge: PromptForge | None = None,
    synonyms: SynonymTable | None = None,
    params: DecodingParams = DecodingParams(),
) -> CaseResult:
    """Single-prompt chain-of-thought baseline, restructured once for scoring.

    No loops: the stepwise prompt runs once, then the response is converted
    to structured data.  The case resolves iff that conversion parses;
    refusals and other unusable texts are recorded verbatim and leave the
    case unresolved.
    """
    forge = forge if forge is not None else PromptForge()
    table = synonyms if synonyms is not None else default_synonym_table()
    transcript = LoopTranscript()

    try:
        response = _call(
            backend, case, forge.cot_prompt(), transcript, 1, 0,
            with_image=True, params=params,
        )
    except BackendFailed:
        return CaseResult(case.case_id, STATUS_BACKEND_FAILED, None, None, transcript)
    cot_entry = transcript.entries[-1]
    cot_text = response.text.strip()

    try:
        finding = FindingText(cot_text, case.language)
        cot_entry.parsed = finding.body
    except InvalidFinding as exc:
        cot_entry.error = f"{type(exc).__name__}: {exc}"
        return CaseResult(
            case.case_id, STATUS_UNRESOLVED_STAGE2, None, cot_text, transcript
        )

    try:
        r_response = _call(
            backend, case, forge.restructure_prompt(finding), transcript, 2, 0,
            with_image=False, params=params,
        )
    except BackendFailed:
        return CaseResult(
            case.case_id, STATUS_BACKEND_FAILED, None, cot_text, transcript
        )
    restructure_entry = transcript.entries[-1]
    try:
        structured = parse_structured_json(r_response.text, normalizer=table.normalize)
        restructure_entry.parsed = emit_structured_json(structured)
    except SchemaError as exc:
        restructure_entry.error = f"{type(exc).__name__}: {exc}"
        return CaseResult(
            case.case_id, STATUS_UNRESOLVED_STAGE2, None, cot_text, transcript
        )
    return CaseResult(case.case_id, STATUS_RESOLVED, structured, cot_text, transcript)
