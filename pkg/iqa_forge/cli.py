# iqa_forge/cli.py

"""
Command-line surface.

Every command writes ``result.json`` next to its outputs and exits with
0 (success), 1 (validation failure), 2 (I/O failure) or 3 (internal error).
"""

import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import typer

from iqa_forge.config import configure_logging, get_settings
from iqa_forge.datasets import (
    DEFAULT_RATIOS,
    DEFAULT_REPETITIONS,
    SplitPolicy,
    harmonize_records,
    load_descriptors,
    load_manifest,
    load_ratings,
    load_split_plan,
    make_splits,
    merge_domains,
    verify_no_leakage,
    write_descriptors,
    write_manifest,
    write_split_plan,
)
from iqa_forge.distort import DistortionLadder, generate_dataset, parse_ladder_file
from iqa_forge.metrics import EvalReport
from iqa_forge.model.checkpoint import ModelCheckpoint
from iqa_forge.reporting import ReportFormatter
from iqa_forge.synthetic import DomainKind, build_synthetic_domain
from iqa_forge.trainer import RunLog, TrainConfig, evaluate, run_experiment_matrix, train
from iqa_forge.utils.enhanced_errors import (
    EXIT_IO,
    EXIT_OK,
    ConfigError,
    IQAForgeError,
    LeakageDetected,
    ValidationError,
    format_error_for_response,
    format_user_friendly_error,
)

logger = logging.getLogger(__name__)

app = typer.Typer(add_completion=False, no_args_is_help=True,
                  help="No-reference image quality assessment toolkit.")

Artifacts = Dict[str, str]


def _write_result(out: Path, result: Dict[str, Any]) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True, default=str) + "\n",
                                         encoding="utf-8")
    except OSError as e:
        logger.error(f"Cannot write result.json to {out}: {e}")


def _run(command: str, out: Path, body: Callable[[], Tuple[str, Artifacts, List[Dict[str, Any]]]]) -> None:
    """Run a command body, map its outcome to an exit code and write result.json."""
    errors: List[Dict[str, Any]] = []
    artifacts: Artifacts = {}
    try:
        configure_logging()
        summary, artifacts, errors = body()
        exit_code = max((e.get("exit_code", EXIT_IO) for e in errors), default=EXIT_OK)
    except IQAForgeError as e:
        e.log()
        errors = [e.to_dict()]
        summary = format_user_friendly_error(errors[0])
        exit_code = e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error in {command}")
        errors = [format_error_for_response(e)]
        summary = format_user_friendly_error(errors[0])
        exit_code = errors[0]["exit_code"]

    _write_result(out, {"command": command, "exit_code": exit_code, "summary": summary,
                        "artifacts": artifacts, "errors": errors})
    typer.echo(summary, err=exit_code != EXIT_OK)
    raise typer.Exit(code=exit_code)


def _seed(seed: Optional[int]) -> int:
    return get_settings().seed if seed is None else seed


def _seed_override(seed: Optional[int], config: Optional[Path]) -> Optional[int]:
    """An explicit --seed wins; without one, a config file keeps its own seed."""
    if seed is not None:
        return seed
    return None if config is not None else get_settings().seed


def _jobs(jobs: Optional[int]) -> int:
    return get_settings().jobs if jobs is None else jobs


def _load_corpus(manifests: List[Path], datasets: List[Path]):
    descriptors = load_descriptors(datasets)
    records = [record for manifest in manifests for record in load_manifest(manifest)]
    return descriptors, records


def _parse_ratios(text: str) -> Tuple[float, float, float]:
    try:
        ratios = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ValidationError(f"Ratios must be comma-separated numbers, got '{text}'", code="CONFIG_INVALID")
    if len(ratios) != 3:
        raise ValidationError(f"Expected three ratios (train,val,test), got '{text}'", code="CONFIG_INVALID")
    return ratios


def _train_config(config: Optional[Path], **overrides) -> TrainConfig:
    base = TrainConfig.from_json_file(config) if config is not None else TrainConfig()
    updates = {k: v for k, v in overrides.items() if v is not None}
    try:
        return TrainConfig.model_validate({**base.model_dump(), **updates})
    except Exception as e:
        raise ConfigError(f"Invalid command-line override: {e}", original_exception=e)


@app.command()
def synth(name: str = typer.Option(..., help="Dataset name recorded as the record source"),
          kind: DomainKind = typer.Option(DomainKind.TEXTURE, help="Image generator"),
          out: Path = typer.Option(..., help="Output directory"),
          n_pristine: int = typer.Option(60, help="Number of pristine images"),
          size: int = typer.Option(128, help="Side of the square pristine images"),
          policy: SplitPolicy = typer.Option(SplitPolicy.FULL, help="Split policy of the dataset"),
          observers: int = typer.Option(0, help="Write this many integer ratings per image"),
          seed: Optional[int] = typer.Option(None, help="Random seed"),
          jobs: Optional[int] = typer.Option(None, help="Worker count")):
    """Build a procedural dataset: pristine images, distorted views, scored manifest."""
    def body():
        domain = build_synthetic_domain(name, kind, n_pristine, size, out, _seed(seed),
                                        split_policy=policy, n_observers=observers, jobs=_jobs(jobs))
        artifacts = {"manifest": str(domain.manifest_path), "descriptor": str(domain.descriptor_path)}
        if domain.ratings_path is not None:
            artifacts["ratings"] = str(domain.ratings_path)
        return f"Built '{name}' with {len(domain.records)} images", artifacts, domain.failures or []
    _run("synth", out, body)


@app.command()
def distort(pristine: Path = typer.Option(..., help="Pristine manifest CSV"),
            out: Path = typer.Option(..., help="Output directory"),
            ladder: str = typer.Option("default", help="Ladder CSV file or 'default'"),
            source: Optional[str] = typer.Option(None, help="Source name for rows without one"),
            max_side: Optional[int] = typer.Option(None, help="Resize pristine images to this largest side first"),
            jobs: Optional[int] = typer.Option(None, help="Worker count")):
    """Expand pristine images with the distortion ladder."""
    def body():
        distortion_ladder = DistortionLadder.default() if ladder == "default" else parse_ladder_file(ladder)
        records = load_manifest(pristine, source=source)
        result = generate_dataset(records, distortion_ladder, out, jobs=_jobs(jobs), max_side=max_side)
        summary = f"Wrote {len(result.records)} manifest rows from {len(records)} pristine image(s)"
        if result.failures:
            summary += f"; {len(result.failures)} image(s) failed"
        return summary, {"manifest": str(result.manifest_path), "meta": str(result.meta_path)}, result.failures
    _run("distort", out, body)


@app.command()
def ingest(manifest: List[Path] = typer.Option(..., help="Manifest CSV (repeatable)"),
           out: Path = typer.Option(..., help="Output directory"),
           ratings: Optional[List[Path]] = typer.Option(None, help="Observer ratings CSV (repeatable)"),
           datasets: Optional[List[Path]] = typer.Option(None, help="Dataset descriptor JSON (repeatable)")):
    """Harmonize manifests and ratings onto the [1, 10] MOS scale."""
    def body():
        descriptors, records = _load_corpus(manifest, datasets or [])
        observed: Dict[str, List[int]] = {}
        for path in ratings or []:
            for image_id, values in load_ratings(path).items():
                observed.setdefault(image_id, []).extend(values)
        # observer ratings override any MOS already in the manifests
        harmonized = harmonize_records(records, descriptors, observed)
        sources = sorted({r.source for r in harmonized})
        merged = merge_domains([(descriptors[s], [r for r in harmonized if r.source == s]) for s in sources])
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(merged, out / "manifest.csv")
        write_descriptors([descriptors[s] for s in sources], out / "descriptors.json")
        return (f"Harmonized {len(merged)} image(s) from {len(sources)} dataset(s)",
                {"manifest": str(out / "manifest.csv"), "descriptors": str(out / "descriptors.json")}, [])
    _run("ingest", out, body)


@app.command()
def split(manifest: Path = typer.Option(..., help="Harmonized manifest CSV"),
          out: Path = typer.Option(..., help="Output directory"),
          datasets: Optional[List[Path]] = typer.Option(None, help="Dataset descriptor JSON (repeatable)"),
          repetitions: int = typer.Option(DEFAULT_REPETITIONS, help="Number of split repetitions"),
          ratios: str = typer.Option(",".join(str(r) for r in DEFAULT_RATIOS), help="train,val,test ratios"),
          seed: Optional[int] = typer.Option(None, help="Random seed")):
    """Write the subject-grouped split plan and its leakage audit."""
    def body():
        descriptors, records = _load_corpus([manifest], datasets or [])
        plan = make_splits(records, descriptors, repetitions, _parse_ratios(ratios), _seed(seed))
        is_valid, issues = verify_no_leakage(plan, records)
        # audit is written even when it fails
        out.mkdir(parents=True, exist_ok=True)
        audit_path = out / "audit.json"
        audit_path.write_text(json.dumps({"valid": is_valid, "issues": issues}, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")
        if not is_valid:
            raise LeakageDetected(f"Split plan fails the leakage audit with {len(issues)} issue(s)", issues=issues)
        meta_path = write_split_plan(plan, out / "plan.csv")
        return (f"Split {len(records)} image(s) into {repetitions} repetition(s); audit clean",
                {"plan": str(out / "plan.csv"), "plan_meta": str(meta_path), "audit": str(audit_path)}, [])
    _run("split", out, body)


@app.command("train")
def train_command(manifest: Path = typer.Option(..., help="Harmonized manifest CSV"),
                  plan: Path = typer.Option(..., help="Split plan CSV"),
                  out: Path = typer.Option(..., help="Output directory"),
                  config: Optional[Path] = typer.Option(None, help="TrainConfig JSON file"),
                  corpus: Optional[List[str]] = typer.Option(None, help="Training dataset (repeatable, default all)"),
                  repetition: Optional[int] = typer.Option(None, help="Split repetition index"),
                  seed: Optional[int] = typer.Option(None, help="Random seed"),
                  jobs: Optional[int] = typer.Option(None, help="Worker count")):
    """Train one regressor and write its checkpoint, history and run log."""
    def body():
        train_config = _train_config(config, seed=_seed_override(seed, config),
                                     split_repetition=repetition, train_corpus=list(corpus or []) or None,
                                     jobs=_jobs(jobs))
        records = load_manifest(manifest)
        split_plan = load_split_plan(plan)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint, history = train(train_config, split_plan, records, RunLog(out / "run.log.jsonl"))
        checkpoint.save(out / "model.iqaf")
        history.to_csv(out / "history.csv")
        return (f"Trained on {train_config.corpus_label}; best epoch {history.selected_epoch} "
                f"(val PLCC {history.best_val_plcc:.4f})",
                {"checkpoint": str(out / "model.iqaf"), "history": str(out / "history.csv"),
                 "run_log": str(out / "run.log.jsonl")}, [])
    _run("train", out, body)


@app.command("eval")
def eval_command(manifest: Path = typer.Option(..., help="Harmonized manifest CSV"),
                 plan: Path = typer.Option(..., help="Split plan CSV"),
                 checkpoint: Path = typer.Option(..., help="Checkpoint file"),
                 out: Path = typer.Option(..., help="Output directory"),
                 test_dataset: Optional[List[str]] = typer.Option(None, help="Test dataset (repeatable, default all)"),
                 repetition: Optional[int] = typer.Option(None, help="Split repetition, default the checkpoint's"),
                 jobs: Optional[int] = typer.Option(None, help="Worker count")):
    """Evaluate a checkpoint on the test partitions and write report rows."""
    def body():
        model = ModelCheckpoint.load(checkpoint)
        records = load_manifest(manifest)
        report = evaluate(model, load_split_plan(plan), records, list(test_dataset or []) or None, repetition,
                          jobs=_jobs(jobs))
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "report.csv")
        failed = sum(1 for row in report.rows if row["error"])
        return (f"Wrote {len(report)} evaluation row(s), {failed} failed",
                {"report": str(out / "report.csv")}, [])
    _run("eval", out, body)


@app.command()
def report(rows: List[Path] = typer.Option(..., help="Evaluation report CSV (repeatable)"),
           out: Path = typer.Option(..., help="Output directory"),
           manifest: Optional[Path] = typer.Option(None, help="Harmonized manifest for MOS histograms")):
    """Aggregate evaluation rows into the training x test matrix."""
    def body():
        combined = EvalReport()
        for path in rows:
            combined.extend(EvalReport.read_csv(path))
        # histograms only when a manifest is given
        records = load_manifest(manifest) if manifest is not None else None
        state = ReportFormatter().invoke({"report": combined, "records": records, "output_directory": out})
        if "error" in state:
            return state["output"], {}, [state["error"]]
        typer.echo(state["output"])
        return f"Aggregated {len(combined)} row(s)", state["artifacts"], []
    _run("report", out, body)


@app.command()
def matrix(manifest: Path = typer.Option(..., help="Harmonized manifest CSV"),
           plan: Path = typer.Option(..., help="Split plan CSV"),
           out: Path = typer.Option(..., help="Output directory"),
           config: Optional[Path] = typer.Option(None, help="TrainConfig JSON file"),
           seed: Optional[int] = typer.Option(None, help="Random seed"),
           jobs: Optional[int] = typer.Option(None, help="Worker count")):
    """Run every training condition on every repetition and report the matrix."""
    def body():
        train_config = _train_config(config, seed=_seed_override(seed, config),
                                     jobs=_jobs(jobs))
        records = load_manifest(manifest)
        evaluation, failures = run_experiment_matrix(records, load_split_plan(plan), train_config,
                                                     out / "runs")
        evaluation.write_csv(out / "report.csv")
        state = ReportFormatter().invoke({"report": evaluation, "records": records, "output_directory": out})
        if "error" in state:
            return state["output"], {"report": str(out / "report.csv")}, failures + [state["error"]]
        typer.echo(state["output"])
        return (f"Experiment matrix: {len(evaluation)} row(s), {len(failures)} failed run(s)",
                {"report": str(out / "report.csv"), **state["artifacts"]}, failures)
    _run("matrix", out, body)


def main():
    app()
