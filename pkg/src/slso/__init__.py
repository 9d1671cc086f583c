"""Self-correction loop with structured output (SLSO) for jaw-cyst findings.

A schema-constrained pipeline that drives a vision-language backend to
produce structured radiographic data and natural-language findings, with two
consistency-check/regeneration loops, a chain-of-thought baseline, and an
evaluation harness for per-category scoring and paired statistics.
"""

__version__ = "0.1.0"

from .backend import (
    DecodingParams,
    MockBackend,
    MockScript,
    RemoteBackend,
    VisionRequest,
    VisionResponse,
    build_wire_request,
)
from .consistency import (
    FieldDiff,
    RoundTripVerdict,
    SynonymTable,
    ToothVerdict,
    check_roundtrip,
    check_tooth_consistency,
    normalize_value,
)
from .evaluation import (
    CaseScore,
    CategoryStats,
    Comparison,
    GroundTruthRecord,
    aggregate,
    compare,
    render_report,
    score_case,
    test_paired,
)
from .orchestrator import (
    CaseInput,
    CaseResult,
    IterationCaps,
    LoopTranscript,
    run_case,
    run_cot_case,
    run_stage1,
    run_stage2,
)
from .prompts import PromptBundle, PromptForge
from .schema import (
    CystStructuredData,
    FdiTooth,
    FindingText,
    ToothSet,
    emit_structured_json,
    parse_fdi_tooth,
    parse_structured_json,
    parse_tooth_list,
)

__all__ = [
    "DecodingParams",
    "MockBackend",
    "MockScript",
    "RemoteBackend",
    "VisionRequest",
    "VisionResponse",
    "build_wire_request",
    "FieldDiff",
    "RoundTripVerdict",
    "SynonymTable",
    "ToothVerdict",
    "check_roundtrip",
    "check_tooth_consistency",
    "normalize_value",
    "CaseScore",
    "CategoryStats",
    "Comparison",
    "GroundTruthRecord",
    "aggregate",
    "compare",
    "render_report",
    "score_case",
    "test_paired",
    "CaseInput",
    "CaseResult",
    "IterationCaps",
    "LoopTranscript",
    "run_case",
    "run_cot_case",
    "run_stage1",
    "run_stage2",
    "PromptBundle",
    "PromptForge",
    "CystStructuredData",
    "FdiTooth",
    "FindingText",
    "ToothSet",
    "emit_structured_json",
    "parse_fdi_tooth",
    "parse_structured_json",
    "parse_tooth_list",
]
