"""Command-line entry point: corpus runs and evaluation.

``slso run`` executes the two-stage pipeline or the chain-of-thought
baseline over a case corpus and persists per-case artifacts plus a run
manifest.  ``slso eval`` scores two runs against ground truth and renders
the comparison report.

Exit codes: 0 success, 1 at least one case failed at the backend,
2 configuration error (nothing executed).
"""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import click
from PIL import Image, UnidentifiedImageError

from . import __version__
from .backend import (
    API_KEY_ENV,
    DEFAULT_MODEL_ID,
    DecodingParams,
    MockBackend,
    MockScript,
    RemoteBackend,
    load_script_file,
)
from .evaluation import (
    CaseIdMismatch,
    FlaggedCase,
    compare,
    render_report,
    score_case,
    zero_score,
)
from .orchestrator import (
    STATUS_BACKEND_FAILED,
    STATUS_RESOLVED,
    CaseInput,
    CaseResult,
    IterationCaps,
    run_case,
    run_cot_case,
)
from .prompts import PromptForge
from .schema import SchemaError, emit_structured_json, parse_structured_json

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2

_IMAGE_NAMES = ("roi.png", "roi.jpg", "roi.jpeg")
_MEDIA_TYPES = {"PNG": "image/png", "JPEG": "image/jpeg"}
_METHOD_LABELS = {"slso": "SLSO", "cot": "CoT"}


class EmptyCorpus(Exception):
    """Corpus root contains no case directories."""


class MissingTruth(Exception):
    """A scored case has no ground-truth record."""

    def __init__(self, case_id: str):
        self.case_id = case_id
        super().__init__(f"no truth.json for case {case_id!r}")


@dataclass(frozen=True)
class CaseBundle:
    """One on-disk case: ROI image plus optional ground truth."""

    case_id: str
    image_path: Path
    media_type: str
    truth_path: Path | None = None
    prose_path: Path | None = None


@dataclass(frozen=True)
class CorpusLoadResult:
    bundles: tuple[CaseBundle, ...]
    problems: tuple[tuple[str, str], ...]  # (case_id, message)


@dataclass(frozen=True)
class RunConfig:
    """Resolved run configuration; flags take precedence over the config file."""

    backend_spec: str
    model_id: str = DEFAULT_MODEL_ID
    params: DecodingParams = DecodingParams()
    caps: IterationCaps = IterationCaps()
    language: str = "en"
    parallel: int = 4
    template_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.parallel < 1:
            raise ValueError("parallelism must be >= 1")

    @property
    def is_mock(self) -> bool:
        return self.backend_spec.startswith("mock:")

    @property
    def mock_script_path(self) -> Path:
        return Path(self.backend_spec[len("mock:"):])


def _validate_image(path: Path) -> str:
    """Return the media type; raises ValueError unless PNG or JPEG."""
    try:
        with Image.open(path) as image:
            image_format = image.format
            image.verify()
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"unreadable image: {exc}") from exc
    media_type = _MEDIA_TYPES.get(image_format or "")
    if media_type is None:
        raise ValueError(f"unsupported image format: {image_format}")
    return media_type


def load_corpus(root: str | Path) -> CorpusLoadResult:
    """Discover case directories under ``root`` (one per case, sorted).

    Invalid cases are collected and reported, not fail-fast; ground truth is
    optional so generation-only corpora load fine.
    """
    root = Path(root)
    case_dirs = sorted(path for path in root.iterdir() if path.is_dir())
    if not case_dirs:
        raise EmptyCorpus(f"no case directories under {root}")

    bundles: list[CaseBundle] = []
    problems: list[tuple[str, str]] = []
    for case_dir in case_dirs:
        case_id = case_dir.name
        image_path = next(
            (case_dir / name for name in _IMAGE_NAMES if (case_dir / name).exists()),
            None,
        )
        if image_path is None:
            problems.append((case_id, "no roi.png / roi.jpg image"))
            continue
        try:
            media_type = _validate_image(image_path)
        except ValueError as exc:
            problems.append((case_id, str(exc)))
            continue
        truth_path = case_dir / "truth.json"
        if truth_path.exists():
            try:
                parse_structured_json(truth_path.read_text(encoding="utf-8"))
            except SchemaError as exc:
                problems.append((case_id, f"invalid truth.json: {exc}"))
                continue
        prose_path = case_dir / "truth.txt"
        bundles.append(
            CaseBundle(
                case_id=case_id,
                image_path=image_path,
                media_type=media_type,
                truth_path=truth_path if truth_path.exists() else None,
                prose_path=prose_path if prose_path.exists() else None,
            )
        )
    return CorpusLoadResult(tuple(bundles), tuple(problems))


def _fail_config(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_CONFIG)


def _load_config_file(path: Path) -> dict:
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        _fail_config(f"cannot read config file {path}: {exc}")
        raise AssertionError  # unreachable


def _build_run_config(
    config_path: Path | None,
    backend: str | None,
    model: str | None,
    cap1: int | None,
    cap2: int | None,
    lang: str | None,
    parallel: int | None,
    templates: Path | None,
) -> RunConfig:
    file_values = _load_config_file(config_path) if config_path is not None else {}

    def pick(flag, key, default):
        return flag if flag is not None else file_values.get(key, default)

    backend_spec = pick(backend, "backend", None)
    if not backend_spec:
        _fail_config("a backend is required (--backend URL or --backend mock:SCRIPT)")
    params_values = file_values.get("params", {})
    try:
        params = DecodingParams(**params_values)
    except TypeError as exc:
        _fail_config(f"invalid [params] in config file: {exc}")
        raise AssertionError
    try:
        return RunConfig(
            backend_spec=backend_spec,
            model_id=pick(model, "model", DEFAULT_MODEL_ID),
            params=params,
            caps=IterationCaps(
                stage1=int(pick(cap1, "cap1", 5)),
                stage2=int(pick(cap2, "cap2", 3)),
            ),
            language=pick(lang, "lang", "en"),
            parallel=int(pick(parallel, "parallel", 4)),
            template_dir=(
                templates
                if templates is not None
                else (Path(file_values["templates"]) if "templates" in file_values else None)
            ),
        )
    except ValueError as exc:
        _fail_config(str(exc))
        raise AssertionError


def _write_case_artifacts(out_dir: Path, result: CaseResult) -> None:
    case_dir = out_dir / result.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    (case_dir / "transcript.json").write_text(
        result.transcript.to_json() + "\n", encoding="utf-8"
    )
    if result.structured is not None:
        (case_dir / "structured.json").write_text(
            emit_structured_json(result.structured) + "\n", encoding="utf-8"
        )
    if result.finding is not None:
        (case_dir / "finding.txt").write_text(result.finding + "\n", encoding="utf-8")
    status = {
        "case_id": result.case_id,
        "status": result.status,
        "stage1_regenerations": result.transcript.stage1_regenerations,
        "stage2_regenerations": result.transcript.stage2_regenerations,
    }
    (case_dir / "status.json").write_text(
        json.dumps(status, indent=2) + "\n", encoding="utf-8"
    )


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@click.group()
@click.version_option(version=__version__)
def main() -> None:
    """Self-correction loop with structured output for jaw-cyst findings."""


@main.command("run")
@click.option("--cases", "cases_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Corpus root (one subdirectory per case).")
@click.option("--method", required=True, type=click.Choice(["slso", "cot"]),
              help="Pipeline to execute.")
@click.option("--backend", "backend_spec", default=None,
              help="Endpoint URL or mock:SCRIPT.json.")
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False, path_type=Path),
              help="Run output directory.")
@click.option("--cap1", type=int, default=None, help="Stage-1 regeneration cap.")
@click.option("--cap2", type=int, default=None, help="Stage-2 regeneration cap.")
@click.option("--lang", default=None, help="Findings language tag (default en).")
@click.option("--model", default=None, help="Model id for the remote backend.")
@click.option("--parallel", type=int, default=None, help="Concurrent cases (default 4).")
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="TOML config file; flags take precedence.")
@click.option("--templates", default=None,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Template override directory.")
def cmd_run(cases_dir, method, backend_spec, out_dir, cap1, cap2, lang, parallel,
            model, config_path, templates) -> None:
    """Execute the pipeline over a corpus and persist per-case artifacts."""
    config = _build_run_config(
        config_path, backend_spec, model, cap1, cap2, lang, parallel, templates
    )

    if config.is_mock:
        script_path = config.mock_script_path
        if not script_path.exists():
            _fail_config(f"mock script not found: {script_path}")
        try:
            scripts = load_script_file(script_path)
        except (ValueError, json.JSONDecodeError) as exc:
            _fail_config(f"invalid mock script: {exc}")

        def make_backend(case_id: str):
            return MockBackend(scripts.get(case_id, MockScript({})))

    else:
        if not os.environ.get(API_KEY_ENV):
            _fail_config(f"{API_KEY_ENV} is not set (required for a remote backend)")
        remote = RemoteBackend(config.backend_spec, config.model_id)

        def make_backend(case_id: str):
            return remote

    try:
        corpus = load_corpus(cases_dir)
    except EmptyCorpus as exc:
        _fail_config(str(exc))
    for case_id, message in corpus.problems:
        click.echo(f"{case_id}: invalid ({message})", err=True)
    if not corpus.bundles:
        _fail_config("no valid cases in corpus")

    forge = PromptForge(config.template_dir)
    started_at = _utcnow()

    def run_one(bundle: CaseBundle) -> CaseResult:
        case = CaseInput(
            case_id=bundle.case_id,
            image=bundle.image_path.read_bytes(),
            image_media_type=bundle.media_type,
            language=config.language,
        )
        backend = make_backend(bundle.case_id)
        if method == "slso":
            return run_case(case, backend, forge, config.caps, params=config.params)
        return run_cot_case(case, backend, forge, params=config.params)

    out_dir.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=config.parallel) as pool:
        results = list(pool.map(run_one, corpus.bundles))

    for result in results:
        _write_case_artifacts(out_dir, result)
        transcript = result.transcript
        click.echo(
            f"{result.case_id}: {result.status}"
            f" (stage1_regenerations={transcript.stage1_regenerations},"
            f" stage2_regenerations={transcript.stage2_regenerations})"
        )

    manifest = {
        "method": method,
        "model_id": config.model_id,
        "backend": (
            {"kind": "mock", "script": str(config.mock_script_path)}
            if config.is_mock
            else {"kind": "remote", "endpoint": config.backend_spec}
        ),
        "params": config.params.to_dict(),
        "caps": {"stage1": config.caps.stage1, "stage2": config.caps.stage2},
        "language": config.language,
        "parallelism": config.parallel,
        "cases": [result.case_id for result in results],
        "template_versions": forge.template_versions(),
        "package_version": __version__,
        "started_at": started_at,
        "finished_at": _utcnow(),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )

    if any(result.status == STATUS_BACKEND_FAILED for result in results):
        sys.exit(EXIT_PARTIAL)
    sys.exit(EXIT_OK)


def _run_case_ids(run_dir: Path) -> list[str]:
    return sorted(
        path.name for path in run_dir.iterdir()
        if path.is_dir() and (path / "status.json").exists()
    )


def _run_label(run_dir: Path, fallback: str) -> str:
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        try:
            method = json.loads(manifest_path.read_text(encoding="utf-8")).get("method")
            if method in _METHOD_LABELS:
                return _METHOD_LABELS[method]
        except (ValueError, OSError):
            pass
    return fallback


def _load_run_scores(run_dir: Path, run_label: str, case_ids: list[str], truths: dict):
    scores = []
    flagged = []
    for case_id in case_ids:
        case_dir = run_dir / case_id
        status = json.loads((case_dir / "status.json").read_text(encoding="utf-8"))
        structured_path = case_dir / "structured.json"
        if structured_path.exists():
            structured = parse_structured_json(
                structured_path.read_text(encoding="utf-8")
            )
            scores.append(score_case(structured, truths[case_id], case_id))
        else:
            # Nothing scorable was produced; the case scores zero rather
            # than silently vanishing from the comparison.
            scores.append(zero_score(case_id))
        if status.get("status") != STATUS_RESOLVED:
            flagged.append(FlaggedCase(case_id, run_label, status.get("status", "unknown")))
    return scores, flagged


@main.command("eval")
@click.option("--run-a", "run_a", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Baseline run directory.")
@click.option("--run-b", "run_b", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Proposed run directory.")
@click.option("--truth", "truth_dir", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Ground-truth root (per-case truth.json).")
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False, path_type=Path),
              help="Report output directory.")
def cmd_eval(run_a, run_b, truth_dir, out_dir) -> None:
    """Score two runs against ground truth and write the comparison report."""
    ids_a = _run_case_ids(run_a)
    ids_b = _run_case_ids(run_b)
    if not ids_a:
        _fail_config(f"no cases found under {run_a}")
    if ids_a != ids_b:
        _fail_config(f"case id mismatch between runs: {ids_a!r} vs {ids_b!r}")

    truths = {}
    try:
        for case_id in ids_a:
            truth_path = truth_dir / case_id / "truth.json"
            if not truth_path.exists():
                raise MissingTruth(case_id)
            truths[case_id] = parse_structured_json(
                truth_path.read_text(encoding="utf-8")
            )
    except MissingTruth as exc:
        _fail_config(str(exc))
    except SchemaError as exc:
        _fail_config(f"invalid ground truth: {exc}")

    label_a = _run_label(run_a, "run-a")
    label_b = _run_label(run_b, "run-b")
    try:
        scores_a, flagged_a = _load_run_scores(run_a, label_a, ids_a, truths)
        scores_b, flagged_b = _load_run_scores(run_b, label_b, ids_a, truths)
    except SchemaError as exc:
        _fail_config(f"invalid run artifact: {exc}")
        raise AssertionError

    try:
        comparison = compare(
            scores_a, scores_b, label_a, label_b, flagged_a + flagged_b
        )
    except CaseIdMismatch as exc:
        _fail_config(str(exc))
        raise AssertionError

    out_dir.mkdir(parents=True, exist_ok=True)
    for fmt, name in (("markdown", "report.md"), ("csv", "report.csv"), ("json", "report.json")):
        (out_dir / name).write_text(render_report(comparison, fmt), encoding="utf-8")
        click.echo(f"wrote {out_dir / name}")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
