"""Shared fixtures: canonical records, mock scripts, and a tiny test image."""

from __future__ import annotations

import io
import json

import pytest
from PIL import Image

from slso.backend import MockBackend, MockScript
from slso.orchestrator import CaseInput
from slso.schema import CystStructuredData, ToothSet, emit_structured_json


def make_record(**overrides) -> CystStructuredData:
    """Valid record with sensible defaults; override any field, teeth by labels."""
    values = {
        "radiolucency": "radiolucent",
        "internal_structure": "unilocular",
        "boundary": "well-defined",
        "root_resorption": "no",
        "tooth_displacement": "no",
        "anatomical_relation": "contact",
        "teeth": ("47", "48"),
    }
    values.update(overrides)
    teeth = values.pop("teeth")
    return CystStructuredData(affected_teeth=ToothSet.from_labels(teeth), **values)


# Worked example document: the structured output for a mandibular premolar
# lesion spanning teeth 33-36 with mild root resorption.
EXAMPLE_DOCUMENT = """\
{
  "radiolucency": "radiolucent",
  "internal_structure": "unilocular",
  "boundary": "well-defined",
  "root_resorption": "mild",
  "tooth_displacement": "no",
  "anatomical_relation": "contact",
  "affected_teeth": ["33", "34", "35", "36"]
}"""

SUCCESS_FINDING = (
    "A radiolucent lesion is confirmed around teeth #47 and #48 on the right side"
    " of the mandible. The internal structure of the lesion is unilocular, with"
    " well-defined and round borders. These characteristics suggest a lesion with"
    " high probability of being a cyst. Although the lesion is adjacent to the"
    " inferior alveolar nerve canal, no pathological effects such as root"
    " resorption or tooth displacement are observed. Additionally, no association"
    " with the maxillary sinus is identified."
)

COT_OUTPUT_TEXT = (
    "Step 1: The observed lesion shows radiolucency compared to surrounding"
    " structures, with high X-ray transparency. The morphology is unilocular,"
    " presenting a uniform radiolucent appearance. "
    "Step 2: The lesion boundary is well-defined, with a round to oval shape."
    " Such findings suggest a suspected cyst. "
    "Step 3: No root resorption is observed in adjacent teeth (none). Tooth"
    " movement is none to mild, with possible slight mobility particularly"
    " around tooth #21. "
    "Step 4: The lesion has no relationship with the inferior alveolar canal or"
    " maxillary sinus (unrelated). "
    "Step 5: The lesion is located around tooth #21, with possible mild"
    " extension to teeth #11 and #22, but structural involvement is minimal."
    " Therefore, the involved FDI tooth number is #21."
)

REFUSAL_TEXT = "I cannot provide a diagnosis because I am not a doctor"


@pytest.fixture
def example_record() -> CystStructuredData:
    return make_record(root_resorption="mild", teeth=("33", "34", "35", "36"))


@pytest.fixture
def success_truth() -> CystStructuredData:
    """Truth labels for the fully-correct case (teeth 47-48)."""
    return make_record()


@pytest.fixture
def failure_truth() -> CystStructuredData:
    """Truth labels for the extensive maxillary anterior case."""
    return make_record(
        root_resorption="mild",
        tooth_displacement="mild",
        anatomical_relation="displacement",
        teeth=("11", "12", "13", "21", "22", "23"),
    )


@pytest.fixture
def failure_slso_record() -> CystStructuredData:
    return make_record(anatomical_relation="none", teeth=("11", "12"))


@pytest.fixture
def failure_cot_record() -> CystStructuredData:
    return make_record(
        tooth_displacement="mild", anatomical_relation="none", teeth=("21",)
    )


@pytest.fixture(scope="session")
def tiny_png() -> bytes:
    buffer = io.BytesIO()
    Image.new("L", (4, 4), color=128).save(buffer, format="PNG")
    return buffer.getvalue()


@pytest.fixture
def case_input(tiny_png) -> CaseInput:
    return CaseInput(case_id="case_001", image=tiny_png)


def happy_script(record: CystStructuredData, finding: str = SUCCESS_FINDING) -> MockScript:
    """Script that resolves in one pass through both stages."""
    return MockScript(
        {
            "structured_generation": emit_structured_json(record),
            "tooth_extraction": ", ".join(record.affected_teeth.labels()),
            "finding_generation": finding,
            "restructure": emit_structured_json(record),
        }
    )


def happy_backend(record: CystStructuredData, finding: str = SUCCESS_FINDING) -> MockBackend:
    return MockBackend(happy_script(record, finding))


def script_document(record: CystStructuredData, finding: str = SUCCESS_FINDING) -> dict:
    """Per-case entry for a mock script file (happy path)."""
    return {
        "steps": {
            "structured_generation": emit_structured_json(record),
            "tooth_extraction": ", ".join(record.affected_teeth.labels()),
            "finding_generation": finding,
            "restructure": emit_structured_json(record),
            "cot": finding,
        }
    }


def write_corpus(root, case_ids, truth: CystStructuredData, png: bytes) -> None:
    for case_id in case_ids:
        case_dir = root / case_id
        case_dir.mkdir(parents=True)
        (case_dir / "roi.png").write_bytes(png)
        (case_dir / "truth.json").write_text(
            emit_structured_json(truth) + "\n", encoding="utf-8"
        )
        (case_dir / "truth.txt").write_text(SUCCESS_FINDING + "\n", encoding="utf-8")


def write_script_file(path, cases: dict) -> None:
    path.write_text(json.dumps({"cases": cases}, indent=2), encoding="utf-8")
