"""Command-line entry point: per-stage subcommands plus a composite run."""

from __future__ import annotations

import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import click

from .abtest import MetricDirection, load_score_file, run_abtest, score_with_fager
from .backend import BackendMode, ModelBackend
from .errors import ConfigError, FagerError
from .evaluate import EvalConfig, evaluate
from .model import FactualRubric, PromptSpec, QASet, dumps_artifact
from .qa import generate_qa
from .refine import CommandImageBackend, ImageBackendConfig, refine_once
from .rubric import build_rubric
from .store import ManifestEntry, RunRecord, RunStore, load_manifest

log = logging.getLogger("fager")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


def _build_backend(mode: str, fixtures: str | None, jobs: int) -> ModelBackend:
    backend_mode = BackendMode(mode)
    if backend_mode is BackendMode.REPLAY:
        if fixtures is None:
            raise ConfigError("replay mode requires --fixtures")
        import os

        return ModelBackend(
            backend_mode,
            llm_model=os.environ.get("FAGER_LLM_MODEL", "gpt-5.4-mini"),
            vlm_model=os.environ.get("FAGER_VLM_MODEL", "qwen3-vl-8b-instruct"),
            fixture_dir=fixtures,
            max_concurrency=jobs,
        )
    return ModelBackend.from_env(backend_mode, fixture_dir=fixtures, max_concurrency=jobs)


def _emit(result: dict[str, Any], fmt: str, table: str) -> None:
    if fmt == "json":
        sys.stdout.write(dumps_artifact(result))
    elif fmt == "markdown":
        sys.stderr.write(table.replace("\n", "\n\n") + "\n")
    else:
        sys.stderr.write(table + "\n")


def _run_entries(
    entries: list[ManifestEntry], jobs: int, fn: Callable[[ManifestEntry], dict[str, Any]]
) -> tuple[dict[str, Any], dict[str, str]]:
    """Run fn over entries in a bounded pool; returns (results, errors) by prompt_id."""
    results: dict[str, Any] = {}
    errors: dict[str, str] = {}

    def worker(entry: ManifestEntry) -> None:
        try:
            results[entry.prompt_id] = fn(entry)
        except Exception as exc:
            log.error("prompt %s failed: %s", entry.prompt_id, exc)
            errors[entry.prompt_id] = str(exc)

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        list(pool.map(worker, entries))
    return results, errors


def _finish(
    results: dict[str, Any], errors: dict[str, str], fmt: str, table: str, store: RunStore, cmd: str, config: dict[str, Any]
) -> None:
    record = store.load_run_record() or RunRecord(run_id=store.run_dir.name, config={})
    record.config[cmd] = config
    for prompt_id in results:
        for path in sorted((store.run_dir / prompt_id).glob("*.json")):
            store.index_artifact(record, prompt_id, path.name)
    store.save_run_record(record)
    _emit({"results": results, "errors": errors}, fmt, table)
    sys.exit(EXIT_PARTIAL if errors else EXIT_OK)


def _ensure_rubric_qaset(
    entry: ManifestEntry, backend: ModelBackend, store: RunStore
) -> tuple[FactualRubric, QASet]:
    rubric_raw = store.load_artifact(entry.prompt_id, "rubric.json")
    if rubric_raw is not None:
        rubric = FactualRubric.from_json_dict(rubric_raw)
    else:
        rubric = build_rubric(entry.to_prompt_spec(), list(entry.reference_images), backend, store)
    qaset_raw = store.load_artifact(entry.prompt_id, "qaset.json")
    if qaset_raw is not None:
        qaset = QASet.from_json_dict(qaset_raw)
    else:
        qaset = generate_qa(rubric, backend, store)
        store.save_artifact(entry.prompt_id, "qaset.json", qaset.to_json_dict())
    return rubric, qaset


def common_options(fn: Callable) -> Callable:
    for opt in reversed(
        [
            click.option("--manifest", required=True, type=click.Path(exists=True)),
            click.option("--run-dir", required=True, type=click.Path()),
            click.option("--mode", type=click.Choice(["live", "record", "replay"]), default="replay"),
            click.option("--fixtures", type=click.Path(), default=None),
            click.option("--regen-threshold", type=float, default=20.0),
            click.option("--keep-threshold", type=float, default=95.0),
            click.option("--no-gating", is_flag=True, default=False),
            click.option("--jobs", type=int, default=4),
            click.option("--format", "fmt", type=click.Choice(["json", "table", "markdown"]), default="json"),
        ]
    ):
        fn = opt(fn)
    return fn


def _eval_config(regen: float, keep: float, no_gating: bool) -> EvalConfig:
    try:
        return EvalConfig(regeneration_threshold=regen, keep_threshold=keep, gated=not no_gating)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@click.group()
@click.option("-v", "--verbose", is_flag=True, default=False)
def main(verbose: bool) -> None:
    """Factual rubric evaluation and refinement pipeline."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command("rubric")
@common_options
def cmd_rubric(manifest, run_dir, mode, fixtures, regen_threshold, keep_threshold, no_gating, jobs, fmt):
    """Build verified rubrics for every manifest entry."""
    try:
        entries = load_manifest(manifest, mode="rubric")
        backend = _build_backend(mode, fixtures, jobs)
    except (FagerError, ValueError) as exc:
        raise click.UsageError(str(exc))
    store = RunStore(run_dir)

    def one(entry: ManifestEntry) -> dict[str, Any]:
        rubric = build_rubric(entry.to_prompt_spec(), list(entry.reference_images), backend, store)
        return {"facts": len(rubric.facts), "ledger": len(rubric.ledger)}

    results, errors = _run_entries(entries, jobs, one)
    table = "\n".join(f"{pid:<24} facts={res['facts']}" for pid, res in sorted(results.items()))
    _finish(results, errors, fmt, table, store, "rubric", {"mode": mode})


@main.command("eval")
@common_options
def cmd_eval(manifest, run_dir, mode, fixtures, regen_threshold, keep_threshold, no_gating, jobs, fmt):
    """Evaluate generated images against their rubrics; summarize per dataset."""
    try:
        entries = load_manifest(manifest, mode="eval")
        if not entries:
            raise ConfigError("manifest has no entries")
        backend = _build_backend(mode, fixtures, jobs)
        cfg = _eval_config(regen_threshold, keep_threshold, no_gating)
    except (FagerError, ValueError) as exc:
        raise click.UsageError(str(exc))
    store = RunStore(run_dir)

    def one(entry: ManifestEntry) -> dict[str, Any]:
        rubric, qaset = _ensure_rubric_qaset(entry, backend, store)
        assert entry.generated_image is not None
        outcome = evaluate(
            entry.generated_image, qaset, cfg, backend, rubric=rubric, prompt=entry.to_prompt_spec()
        )
        store.save_artifact(entry.prompt_id, "eval.generated.json", outcome.to_json_dict())
        return {
            "dataset": entry.dataset,
            "score": outcome.overall_score,
            "decision": outcome.decision.value,
        }

    results, errors = _run_entries(entries, jobs, one)

    by_dataset: dict[str, list[dict[str, Any]]] = {}
    for res in results.values():
        by_dataset.setdefault(res["dataset"] or "-", []).append(res)
    summary = {}
    lines = [f"{'dataset':<24} {'n':>4} {'mean':>8}  decisions"]
    for ds, rows in sorted(by_dataset.items()):
        mean = sum(r["score"] for r in rows) / len(rows)
        hist: dict[str, int] = {}
        for r in rows:
            hist[r["decision"]] = hist.get(r["decision"], 0) + 1
        summary[ds] = {"n": len(rows), "mean_score": mean, "decisions": hist}
        lines.append(f"{ds:<24} {len(rows):>4} {mean:>8.2f}  {hist}")
    _finish(
        {"per_prompt": results, "summary": summary},
        errors,
        fmt,
        "\n".join(lines),
        store,
        "eval",
        {"mode": mode, "gated": not no_gating},
    )


@main.command("abtest")
@click.option("--manifest", type=click.Path(exists=True), default=None)
@click.option("--score-file", type=click.Path(exists=True), default=None)
@click.option("--direction", type=click.Choice(["higher_better", "lower_better"]), default="higher_better")
@click.option("--dataset", default="")
@click.option("--run-dir", type=click.Path(), default=None)
@click.option("--mode", type=click.Choice(["live", "record", "replay"]), default="replay")
@click.option("--fixtures", type=click.Path(), default=None)
@click.option("--jobs", type=int, default=4)
@click.option("--format", "fmt", type=click.Choice(["json", "table", "markdown"]), default="json")
def cmd_abtest(manifest, score_file, direction, dataset, run_dir, mode, fixtures, jobs, fmt):
    """Run the factual A/B test from a score file or by scoring pairs end to end."""
    dir_enum = MetricDirection(direction)
    if (manifest is None) == (score_file is None):
        raise click.UsageError("provide exactly one of --manifest or --score-file")
    if score_file is not None:
        try:
            pairs = load_score_file(score_file)
            report = run_abtest(pairs, dir_enum, dataset=dataset)
        except FagerError as exc:
            raise click.UsageError(str(exc))
        _emit(report.to_json_dict(), fmt, report.render_table())
        sys.exit(EXIT_OK)

    if run_dir is None:
        raise click.UsageError("--run-dir is required for manifest-driven A/B runs")
    try:
        entries = load_manifest(manifest, mode="ab")
        backend = _build_backend(mode, fixtures, jobs)
    except (FagerError, ValueError) as exc:
        raise click.UsageError(str(exc))
    store = RunStore(run_dir)
    cfg = EvalConfig(gated=False)

    def one(entry: ManifestEntry) -> dict[str, Any]:
        assert entry.factual_image is not None and entry.generated_image is not None
        pair = score_with_fager(
            entry.to_prompt_spec(),
            entry.factual_image,
            entry.generated_image,
            backend,
            cfg,
            reference_images=list(entry.reference_images),
            store=store,
        )
        return {"s_factual": pair.s_factual, "s_generated": pair.s_generated}

    results, errors = _run_entries(entries, jobs, one)
    from .abtest import ABPair

    pairs = [
        ABPair(e.prompt_id, results[e.prompt_id]["s_factual"], results[e.prompt_id]["s_generated"])
        for e in entries
        if e.prompt_id in results
    ]
    report = run_abtest(pairs, dir_enum, dataset=dataset) if pairs else None
    payload = {"report": report.to_json_dict() if report else None, "errors": errors}
    _emit(payload, fmt, report.render_table() if report else "no pairs scored")
    sys.exit(EXIT_PARTIAL if errors else EXIT_OK)


@main.command("refine")
@common_options
@click.option("--generator-cmd", default=None, help="command template with {prompt} and {output}")
@click.option("--editor-cmd", default=None, help="command template with {image}, {instruction}, {output}")
@click.option("--reevaluate", is_flag=True, default=False)
def cmd_refine(manifest, run_dir, mode, fixtures, regen_threshold, keep_threshold, no_gating, jobs, fmt, generator_cmd, editor_cmd, reevaluate):
    """Evaluate and refine generated images for a single round."""
    try:
        entries = load_manifest(manifest, mode="refine")
        backend = _build_backend(mode, fixtures, jobs)
        cfg = _eval_config(regen_threshold, keep_threshold, no_gating)
    except (FagerError, ValueError) as exc:
        raise click.UsageError(str(exc))
    store = RunStore(run_dir)
    image_cfg = ImageBackendConfig(
        generator=CommandImageBackend(generator_cmd) if generator_cmd else None,
        editor=CommandImageBackend(editor_cmd) if editor_cmd else None,
    )

    def one(entry: ManifestEntry) -> dict[str, Any]:
        rubric, qaset = _ensure_rubric_qaset(entry, backend, store)
        assert entry.generated_image is not None
        result = refine_once(
            entry.to_prompt_spec(),
            entry.generated_image,
            qaset,
            rubric,
            cfg,
            image_cfg,
            backend,
            store=store,
            reevaluate=reevaluate,
        )
        out = {
            "decision": result.outcome.decision.value,
            "score": result.outcome.overall_score,
            "refined_image": result.refined_image,
        }
        if result.post_outcome is not None:
            out["refined_score"] = result.post_outcome.overall_score
        return out

    results, errors = _run_entries(entries, jobs, one)
    table = "\n".join(
        f"{pid:<24} {res['decision']:<10} {res['score']:>7.2f}" for pid, res in sorted(results.items())
    )
    _finish(results, errors, fmt, table, store, "refine", {"mode": mode})


@main.command("run")
@common_options
@click.option("--refine/--no-refine", "do_refine", default=False)
@click.option("--generator-cmd", default=None)
@click.option("--editor-cmd", default=None)
def cmd_run(manifest, run_dir, mode, fixtures, regen_threshold, keep_threshold, no_gating, jobs, fmt, do_refine, generator_cmd, editor_cmd):
    """Composite workflow: rubric, QA, evaluation, and optional refinement."""
    try:
        entries = load_manifest(manifest, mode="eval")
        backend = _build_backend(mode, fixtures, jobs)
        cfg = _eval_config(regen_threshold, keep_threshold, no_gating)
    except (FagerError, ValueError) as exc:
        raise click.UsageError(str(exc))
    store = RunStore(run_dir)
    image_cfg = ImageBackendConfig(
        generator=CommandImageBackend(generator_cmd) if generator_cmd else None,
        editor=CommandImageBackend(editor_cmd) if editor_cmd else None,
    )

    def one(entry: ManifestEntry) -> dict[str, Any]:
        rubric, qaset = _ensure_rubric_qaset(entry, backend, store)
        assert entry.generated_image is not None
        if do_refine:
            result = refine_once(
                entry.to_prompt_spec(), entry.generated_image, qaset, rubric, cfg, image_cfg,
                backend, store=store,
            )
            outcome = result.outcome
        else:
            outcome = evaluate(
                entry.generated_image, qaset, cfg, backend, rubric=rubric,
                prompt=entry.to_prompt_spec(),
            )
            store.save_artifact(entry.prompt_id, "eval.generated.json", outcome.to_json_dict())
        return {
            "facts": len(rubric.facts),
            "questions": len(qaset.pairs),
            "score": outcome.overall_score,
            "decision": outcome.decision.value,
        }

    results, errors = _run_entries(entries, jobs, one)
    table = "\n".join(
        f"{pid:<24} {res['decision']:<10} {res['score']:>7.2f}" for pid, res in sorted(results.items())
    )
    _finish(results, errors, fmt, table, store, "run", {"mode": mode, "refine": do_refine})


if __name__ == "__main__":
    main()
