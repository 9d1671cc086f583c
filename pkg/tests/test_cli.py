"""Corpus loading, run/eval commands, exit codes, and artifact layout."""

import json

import pytest
from click.testing import CliRunner

from slso.backend import API_KEY_ENV
from slso.cli import EmptyCorpus, load_corpus, main
from slso.schema import emit_structured_json

from conftest import (
    SUCCESS_FINDING,
    make_record,
    script_document,
    write_corpus,
    write_script_file,
)

CASE_IDS = ["cases_001", "cases_002", "cases_003"]


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


@pytest.fixture
def corpus(tmp_path, tiny_png):
    root = tmp_path / "corpus"
    root.mkdir()
    write_corpus(root, CASE_IDS, make_record(), tiny_png)
    return root


@pytest.fixture
def script_path(tmp_path):
    record = make_record()
    path = tmp_path / "script.json"
    write_script_file(path, {case_id: script_document(record) for case_id in CASE_IDS})
    return path


def run_cli(runner, *args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


class TestLoadCorpus:
    def test_lexical_order_and_truth_paths(self, corpus):
        result = load_corpus(corpus)
        assert [b.case_id for b in result.bundles] == CASE_IDS
        assert all(b.truth_path is not None for b in result.bundles)
        assert all(b.prose_path is not None for b in result.bundles)
        assert result.problems == ()

    def test_missing_image_reported_not_fatal(self, corpus):
        (corpus / "cases_002" / "roi.png").unlink()
        result = load_corpus(corpus)
        assert [b.case_id for b in result.bundles] == ["cases_001", "cases_003"]
        assert result.problems[0][0] == "cases_002"

    def test_garbage_image_reported(self, corpus):
        (corpus / "cases_001" / "roi.png").write_bytes(b"not an image")
        result = load_corpus(corpus)
        assert "cases_001" in [case_id for case_id, _ in result.problems]

    def test_invalid_truth_reported(self, corpus):
        (corpus / "cases_003" / "truth.json").write_text("{}", encoding="utf-8")
        result = load_corpus(corpus)
        assert "cases_003" in [case_id for case_id, _ in result.problems]

    def test_empty_root_raises(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(EmptyCorpus):
            load_corpus(empty)

    def test_truth_optional(self, corpus):
        (corpus / "cases_001" / "truth.json").unlink()
        result = load_corpus(corpus)
        assert result.bundles[0].truth_path is None


class TestRunCommand:
    def test_mock_slso_run(self, runner, corpus, script_path, tmp_path):
        out = tmp_path / "run_slso"
        result = run_cli(
            runner, "run", "--cases", corpus, "--method", "slso",
            "--backend", f"mock:{script_path}", "--out", out,
        )
        assert result.exit_code == 0, result.output
        for case_id in CASE_IDS:
            case_dir = out / case_id
            assert (case_dir / "transcript.json").exists()
            assert (case_dir / "structured.json").exists()
            assert (case_dir / "finding.txt").exists()
            status = json.loads((case_dir / "status.json").read_text())
            assert status["status"] == "resolved"
            assert f"{case_id}: resolved" in result.output
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["method"] == "slso"
        assert manifest["params"]["temperature"] == 0.2
        assert manifest["caps"] == {"stage1": 5, "stage2": 3}
        assert set(manifest["template_versions"]) >= {"structured_generation", "cot"}
        assert (out / CASE_IDS[0] / "structured.json").read_text().rstrip(
            "\n"
        ) == emit_structured_json(make_record())

    def test_cot_run_makes_exactly_two_calls_per_case(self, runner, corpus, script_path, tmp_path):
        out = tmp_path / "run_cot"
        result = run_cli(
            runner, "run", "--cases", corpus, "--method", "cot",
            "--backend", f"mock:{script_path}", "--out", out,
        )
        assert result.exit_code == 0, result.output
        for case_id in CASE_IDS:
            transcript = json.loads((out / case_id / "transcript.json").read_text())
            steps = [entry["step_kind"] for entry in transcript["entries"]]
            assert steps == ["cot", "restructure"]

    def test_remote_requires_api_key(self, runner, corpus, tmp_path, monkeypatch):
        monkeypatch.delenv(API_KEY_ENV, raising=False)
        out = tmp_path / "run_remote"
        result = run_cli(
            runner, "run", "--cases", corpus, "--method", "slso",
            "--backend", "https://example.test/v1/chat/completions", "--out", out,
        )
        assert result.exit_code == 2
        assert API_KEY_ENV in result.output
        assert not out.exists()

    def test_backend_required(self, runner, corpus, tmp_path):
        result = run_cli(
            runner, "run", "--cases", corpus, "--method", "slso",
            "--out", tmp_path / "x",
        )
        assert result.exit_code == 2

    def test_missing_script_case_fails_partially(self, runner, corpus, tmp_path):
        script = tmp_path / "partial.json"
        write_script_file(
            script,
            {case_id: script_document(make_record()) for case_id in CASE_IDS[:2]},
        )
        out = tmp_path / "run_partial"
        result = run_cli(
            runner, "run", "--cases", corpus, "--method", "slso",
            "--backend", f"mock:{script}", "--out", out,
        )
        assert result.exit_code == 1
        status = json.loads((out / "cases_003" / "status.json").read_text())
        assert status["status"] == "backend_failed"
        # other cases still resolved
        assert json.loads((out / "cases_001" / "status.json").read_text())["status"] == "resolved"

    def test_nonexistent_mock_script(self, runner, corpus, tmp_path):
        result = run_cli(
            runner, "run", "--cases", corpus, "--method", "slso",
            "--backend", "mock:/does/not/exist.json", "--out", tmp_path / "x",
        )
        assert result.exit_code == 2

    def test_config_file_with_flag_precedence(self, runner, corpus, script_path, tmp_path):
        config = tmp_path / "slso.toml"
        config.write_text(
            f'backend = "mock:{script_path}"\n'
            'model = "config-model"\n'
            "cap1 = 2\n"
            "parallel = 1\n"
            "[params]\n"
            "temperature = 0.7\n",
            encoding="utf-8",
        )
        out = tmp_path / "run_config"
        result = run_cli(
            runner, "run", "--cases", corpus, "--method", "slso",
            "--out", out, "--config", config, "--cap1", "4",
        )
        assert result.exit_code == 0, result.output
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["model_id"] == "config-model"
        assert manifest["caps"]["stage1"] == 4  # flag wins over file
        assert manifest["params"]["temperature"] == 0.7

    def test_unresolved_cases_do_not_fail_the_run(self, runner, corpus, tmp_path):
        record = make_record()
        bad = make_record(teeth=("31", "47", "48"))
        case_spec = {
            "steps": {
                "structured_generation": emit_structured_json(bad),
                "tooth_extraction": ", ".join(record.affected_teeth.labels()),
                "finding_generation": SUCCESS_FINDING,
                "restructure": emit_structured_json(record),
            }
        }
        script = tmp_path / "unresolved.json"
        write_script_file(script, {case_id: case_spec for case_id in CASE_IDS})
        out = tmp_path / "run_unresolved"
        result = run_cli(
            runner, "run", "--cases", corpus, "--method", "slso",
            "--backend", f"mock:{script}", "--out", out, "--cap1", "2",
        )
        assert result.exit_code == 0, result.output
        status = json.loads((out / "cases_001" / "status.json").read_text())
        assert status["status"] == "unresolved_stage1"
        assert status["stage1_regenerations"] == 2


class TestEvalCommand:
    @pytest.fixture
    def run_dirs(self, runner, corpus, script_path, tmp_path):
        out_a = tmp_path / "run_a"
        out_b = tmp_path / "run_b"
        for method, out in (("cot", out_a), ("slso", out_b)):
            result = run_cli(
                runner, "run", "--cases", corpus, "--method", method,
                "--backend", f"mock:{script_path}", "--out", out,
            )
            assert result.exit_code == 0, result.output
        return out_a, out_b

    def test_eval_writes_reports(self, runner, corpus, run_dirs, tmp_path):
        out_a, out_b = run_dirs
        report_dir = tmp_path / "report"
        result = run_cli(
            runner, "eval", "--run-a", out_a, "--run-b", out_b,
            "--truth", corpus, "--out", report_dir,
        )
        assert result.exit_code == 0, result.output
        for name in ("report.md", "report.csv", "report.json"):
            assert (report_dir / name).exists()
        markdown = (report_dir / "report.md").read_text()
        assert "CoT (mean ± SE)" in markdown
        assert "SLSO (mean ± SE)" in markdown

    def test_self_comparison_is_all_zero(self, runner, corpus, run_dirs, tmp_path):
        _, out_b = run_dirs
        report_dir = tmp_path / "self_report"
        result = run_cli(
            runner, "eval", "--run-a", out_b, "--run-b", out_b,
            "--truth", corpus, "--out", report_dir,
        )
        assert result.exit_code == 0
        document = json.loads((report_dir / "report.json").read_text())
        for row in document["categories"]:
            assert row["absolute_improvement"] == "+0.000"
            assert row["p_value"] == "n/a"

    def test_eval_deterministic(self, runner, corpus, run_dirs, tmp_path):
        out_a, out_b = run_dirs
        reports = []
        for name in ("r1", "r2"):
            report_dir = tmp_path / name
            run_cli(
                runner, "eval", "--run-a", out_a, "--run-b", out_b,
                "--truth", corpus, "--out", report_dir,
            )
            reports.append(
                {
                    file.name: file.read_bytes()
                    for file in sorted(report_dir.iterdir())
                }
            )
        assert reports[0] == reports[1]

    def test_missing_truth_names_case(self, runner, corpus, run_dirs, tmp_path):
        out_a, out_b = run_dirs
        (corpus / "cases_002" / "truth.json").unlink()
        result = run_cli(
            runner, "eval", "--run-a", out_a, "--run-b", out_b,
            "--truth", corpus, "--out", tmp_path / "r",
        )
        assert result.exit_code == 2
        assert "cases_002" in result.output

    def test_case_id_mismatch(self, runner, corpus, run_dirs, tmp_path):
        out_a, out_b = run_dirs
        import shutil

        shutil.rmtree(out_b / "cases_003")
        result = run_cli(
            runner, "eval", "--run-a", out_a, "--run-b", out_b,
            "--truth", corpus, "--out", tmp_path / "r",
        )
        assert result.exit_code == 2

    def test_unresolved_case_flagged_in_report(self, runner, corpus, run_dirs, tmp_path):
        out_a, out_b = run_dirs
        # Rewrite one status to unresolved; eval must flag it but still score.
        status_path = out_b / "cases_001" / "status.json"
        status = json.loads(status_path.read_text())
        status["status"] = "unresolved_stage2"
        status_path.write_text(json.dumps(status, indent=2) + "\n")
        report_dir = tmp_path / "flagged"
        result = run_cli(
            runner, "eval", "--run-a", out_a, "--run-b", out_b,
            "--truth", corpus, "--out", report_dir,
        )
        assert result.exit_code == 0
        document = json.loads((report_dir / "report.json").read_text())
        assert document["flagged_cases"] == [
            {"case_id": "cases_001", "run": "SLSO", "status": "unresolved_stage2"}
        ]
