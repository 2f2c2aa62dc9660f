from __future__ import annotations

import json
from pathlib import Path

from click.testing import CliRunner

from conftest import FIXTURES, MANIFEST, RESPONSES, write_png
from fager.cli import main

runner = CliRunner()


def invoke(*args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


def replay_args(cmd, run_dir, manifest=MANIFEST):
    return [cmd, "--manifest", manifest, "--run-dir", run_dir, "--mode", "replay",
            "--fixtures", RESPONSES]


def test_rubric_command_on_fixture_manifest(tmp_path):
    run_dir = tmp_path / "run"
    result = invoke(*replay_args("rubric", run_dir))
    assert result.exit_code == 0, result.output
    for pid in ("ethanol", "liberty1890", "apple"):
        assert (run_dir / pid / "rubric.json").exists()
    payload = json.loads(result.stdout)
    assert set(payload["results"]) == {"ethanol", "liberty1890", "apple"}
    assert payload["errors"] == {}
    assert (run_dir / "run.json").exists()


def test_rubric_command_stdout_is_single_json_document(tmp_path):
    result = invoke(*replay_args("rubric", tmp_path / "run"))
    json.loads(result.stdout)  # would raise on trailing junk


def test_replay_miss_reports_prompt_and_fingerprint(tmp_path):
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(
        json.dumps({"prompt_id": "unseen", "prompt": "a prompt with no fixtures"}) + "\n"
    )
    result = invoke(*replay_args("rubric", tmp_path / "run", manifest))
    assert result.exit_code == 1
    payload = json.loads(result.stdout)
    assert "unseen" in payload["errors"]
    assert "fingerprint" in payload["errors"]["unseen"]


def test_rubric_rerun_is_idempotent(tmp_path):
    run_dir = tmp_path / "run"
    invoke(*replay_args("rubric", run_dir))
    before = {p: p.read_bytes() for p in run_dir.rglob("rubric.json")}
    result = invoke(*replay_args("rubric", run_dir))
    assert result.exit_code == 0
    after = {p: p.read_bytes() for p in run_dir.rglob("rubric.json")}
    assert before == after


def test_eval_command_summary_matches_artifacts(tmp_path):
    run_dir = tmp_path / "run"
    result = invoke(*replay_args("eval", run_dir))
    assert result.exit_code == 0, result.output
    payload = json.loads(result.stdout)
    for ds, summary in payload["results"]["summary"].items():
        scores = []
        for pid, res in payload["results"]["per_prompt"].items():
            if (res["dataset"] or "-") == ds:
                artifact = json.loads((run_dir / pid / "eval.generated.json").read_text())
                scores.append(artifact["overall_score"])
        assert summary["mean_score"] == sum(scores) / len(scores)
        assert summary["n"] == len(scores)


def test_eval_no_gating_flag(tmp_path):
    run_dir = tmp_path / "run"
    result = invoke(*replay_args("eval", run_dir), "--no-gating")
    assert result.exit_code == 0, result.output
    # liberty fails L1 but all its questions are still answered ungated
    artifact = json.loads((run_dir / "liberty1890" / "eval.generated.json").read_text())
    assert artifact["gated"] is False
    assert artifact["decision"] == "regenerate"
    assert len(artifact["results"]) == 6


def test_eval_gating_produces_l1_only_regenerate(tmp_path):
    run_dir = tmp_path / "run"
    result = invoke(*replay_args("eval", run_dir))
    assert result.exit_code == 0
    artifact = json.loads((run_dir / "liberty1890" / "eval.generated.json").read_text())
    assert artifact["gated"] is True
    assert artifact["decision"] == "regenerate"
    assert set(artifact["level_scores"]) == {"l1"}


def test_eval_empty_manifest_is_usage_error(tmp_path):
    manifest = tmp_path / "empty.jsonl"
    manifest.write_text("")
    result = invoke(*replay_args("eval", tmp_path / "run", manifest))
    assert result.exit_code == 2


def test_abtest_score_file(tmp_path):
    score_file = tmp_path / "scores.csv"
    score_file.write_text("p1,factual,1\np1,generated,0\np2,factual,0.5\np2,generated,0.5\np3,factual,0\np3,generated,1\n")
    result = invoke("abtest", "--score-file", score_file, "--direction", "higher_better")
    assert result.exit_code == 0
    report = json.loads(result.stdout)
    assert report["n_pairs"] == 3 and report["n_correct"] == 2
    assert report["accuracy"] == 2 / 3


def test_abtest_unknown_direction_is_usage_error(tmp_path):
    score_file = tmp_path / "scores.csv"
    score_file.write_text("p1,factual,1\np1,generated,0\n")
    result = runner.invoke(main, ["abtest", "--score-file", str(score_file), "--direction", "sideways"])
    assert result.exit_code == 2


def test_abtest_requires_exactly_one_source():
    result = runner.invoke(main, ["abtest"])
    assert result.exit_code == 2


def test_abtest_fager_mode_on_fixtures(tmp_path):
    result = invoke(
        "abtest", "--manifest", MANIFEST, "--run-dir", tmp_path / "run",
        "--mode", "replay", "--fixtures", RESPONSES, "--dataset", "toy",
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(result.stdout)
    report = payload["report"]
    assert report["n_pairs"] == 3
    verdicts = {p["prompt_id"]: p["correct"] for p in report["per_pair"]}
    assert verdicts["ethanol"] is True       # real 100 beats flawed generation
    assert verdicts["apple"] is True         # tie counts as correct
    assert verdicts["liberty1890"] is True


def test_refine_all_keep_uses_no_backend(tmp_path):
    # apple evaluates to keep; a backend command that would fail is never run
    manifest = tmp_path / "m.jsonl"
    entries = [e for e in MANIFEST.read_text().splitlines() if "apple" in e]
    manifest.write_text("\n".join(entries) + "\n")
    # image paths in the copied manifest are relative to the fixtures dir
    fixed = json.loads(entries[0])
    for key in ("reference_images", "factual_image", "generated_image"):
        val = fixed[key]
        if isinstance(val, list):
            fixed[key] = [str(FIXTURES / v) for v in val]
        elif val:
            fixed[key] = str(FIXTURES / val)
    manifest.write_text(json.dumps(fixed) + "\n")
    result = invoke(
        *replay_args("refine", tmp_path / "run", manifest),
        "--generator-cmd", "false", "--editor-cmd", "false",
    )
    assert result.exit_code == 0, result.output
    payload = json.loads(result.stdout)
    assert payload["results"]["apple"]["decision"] == "keep"
    assert not (tmp_path / "run" / "apple" / "refined.meta.json").exists()


def test_refine_regenerate_with_command_backend(tmp_path):
    src = write_png(tmp_path / "seed.png")
    result = invoke(
        *replay_args("refine", tmp_path / "run"),
        "--generator-cmd", f"cp {src} {{output}}",
        "--editor-cmd", f"cp {src} {{output}}",
    )
    assert result.exit_code == 0, result.output
    meta = json.loads((tmp_path / "run" / "liberty1890" / "refined.meta.json").read_text())
    assert meta["action"] == "regenerate"
    assert meta["prompt"].startswith("the Statue of Liberty in 1890, ")


def test_refine_missing_editor_is_per_prompt_error(tmp_path):
    result = invoke(*replay_args("refine", tmp_path / "run"))
    assert result.exit_code == 1
    payload = json.loads(result.stdout)
    # ethanol needs an editor, liberty a generator; neither configured
    assert "ethanol" in payload["errors"]
    assert "no editor backend" in payload["errors"]["ethanol"]


def test_run_composite_produces_all_stage_artifacts(tmp_path):
    run_dir = tmp_path / "run"
    result = invoke(*replay_args("run", run_dir))
    assert result.exit_code == 0, result.output
    for pid in ("ethanol", "liberty1890", "apple"):
        for name in ("proposal.json", "rubric.json", "qaset.json", "eval.generated.json"):
            assert (run_dir / pid / name).exists(), f"{pid}/{name}"
    record = json.loads((run_dir / "run.json").read_text())
    assert "qaset.json" in record["artifacts"]["ethanol"]


def test_run_rerun_byte_identical(tmp_path):
    run_dir = tmp_path / "run"
    invoke(*replay_args("run", run_dir))
    watched = sorted(p for p in run_dir.rglob("*.json") if p.name != "run.json")
    before = {p: p.read_bytes() for p in watched}
    result = invoke(*replay_args("run", run_dir))
    assert result.exit_code == 0
    assert {p: p.read_bytes() for p in watched} == before
