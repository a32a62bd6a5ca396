# iqa_forge/trainer.py

"""
Training and evaluation of the quality regressor over a split plan.

Batch preparation (image loading, augmentation, feature extraction) fans out
over a joblib worker pool; the optimizer loop itself is strictly sequential.
Every random draw comes from a generator seeded by (seed, repetition, epoch,
...) so checkpoints, histories and reports are fully determined by the inputs.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, field_validator

from iqa_forge.config import DEFAULT_SEED
from iqa_forge.datasets import ImageRecord, SplitPlan, verify_no_leakage
from iqa_forge.imagecore import (
    PixelImage,
    center_crop,
    hflip,
    load_image,
    random_crop,
    resize_shorter_side,
)
from iqa_forge.metrics import EvalReport, plcc, srocc
from iqa_forge.model.checkpoint import ModelCheckpoint
from iqa_forge.model.features import FEATURE_DIM, FeatureCache, FeatureScaler, extract_features, feature_matrix
from iqa_forge.model.optim import OptimizerState, onecycle_lr, optimizer_step
from iqa_forge.model.regressor import (
    MlpRegressor,
    Mode,
    class_weights,
    quality_level,
    sample_weights,
    weighted_mse_loss,
)
from iqa_forge.utils.enhanced_errors import (
    ConfigError,
    DegenerateVector,
    EmptyPartition,
    EmptyTestSet,
    IQAForgeError,
    IoError,
    LeakageDetected,
    TrainingFailedError,
    ValidationError,
)

logger = logging.getLogger(__name__)

ALL_CORPUS_LABEL = "All"

# Stream ids that keep the image, shuffle and dropout generators independent.
_IMAGE_STREAM = 0
_SHUFFLE_STREAM = 1
_DROPOUT_STREAM = 2
_INIT_STREAM = 3


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(20, ge=1)
    batch_size: int = Field(32, ge=1)
    input_size: int = Field(224, ge=32)
    max_lr: float = Field(2e-4, gt=0)
    weight_decay: float = Field(1e-5, ge=0)
    seed: int = Field(DEFAULT_SEED, ge=0)
    train_corpus: Union[Literal["all"], List[str]] = "all"
    split_repetition: int = Field(0, ge=0)
    oversize_fraction: float = Field(0.125, gt=0)
    hidden_widths: Tuple[int, ...] = (64, 16)
    dropout: float = Field(0.5, ge=0, lt=1)
    warmup_fraction: float = Field(0.3, gt=0, lt=1)
    jobs: int = Field(1, ge=1)
    model_name: str = "mlp-engineered"

    @field_validator("hidden_widths")
    @classmethod
    def _decreasing(cls, widths: Tuple[int, ...]) -> Tuple[int, ...]:
        if not widths or any(w < 1 for w in widths):
            raise ValueError("hidden_widths must be positive")
        if any(a <= b for a, b in zip(widths, widths[1:])):
            raise ValueError("hidden_widths must be strictly decreasing")
        return widths

    @field_validator("train_corpus")
    @classmethod
    def _non_empty(cls, corpus):
        if isinstance(corpus, list) and not corpus:
            raise ValueError("train_corpus must name at least one dataset or be 'all'")
        return corpus

    @classmethod
    def from_json_file(cls, path: Union[str, Path]) -> "TrainConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise IoError(f"Cannot read config {path}: {e}", path=path, original_exception=e)
        try:
            return cls.model_validate_json(text)
        except PydanticValidationError as e:
            issues = [{"field": ".".join(str(p) for p in err["loc"]), "message": err["msg"]}
                      for err in e.errors()]
            raise ConfigError(f"Invalid training config {path}: "
                              + "; ".join(f"{i['field']}: {i['message']}" for i in issues),
                              details={"path": str(path), "issues": issues}, original_exception=e)

    @property
    def widths(self) -> Tuple[int, ...]:
        return (FEATURE_DIM, *self.hidden_widths, 1)

    @property
    def corpus_label(self) -> str:
        return ALL_CORPUS_LABEL if self.train_corpus == "all" else "+".join(self.train_corpus)

    def snapshot(self) -> Dict[str, Any]:
        """Everything that affects the weights; the worker count does not."""
        return self.model_dump(mode="json", exclude={"jobs"})


@dataclass
class TrainHistory:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    selected_epoch: Optional[int] = None

    def add(self, epoch: int, train_loss: float, val_plcc: float, lr: float) -> bool:
        """Record an epoch; returns True when it becomes the selected (best) epoch."""
        self.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_plcc": val_plcc, "lr": lr})
        best = None if self.selected_epoch is None else self.epochs[self.selected_epoch]["val_plcc"]
        if best is None or val_plcc > best:
            self.selected_epoch = len(self.epochs) - 1
            return True
        return False

    @property
    def best_val_plcc(self) -> Optional[float]:
        return None if self.selected_epoch is None else self.epochs[self.selected_epoch]["val_plcc"]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.epochs, columns=["epoch", "train_loss", "val_plcc", "lr"])
        frame["selected"] = [i == self.selected_epoch for i in range(len(frame))]
        return frame

    def to_csv(self, path: Union[str, Path]) -> None:
        try:
            self.to_frame().to_csv(path, index=False, lineterminator="\n")
        except OSError as e:
            raise IoError(f"Cannot write history {path}: {e}", path=path, original_exception=e)


class RunLog:
    """Line-delimited JSON events; keys sorted and no timestamps so reruns are byte-identical."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            try:
                self.path.write_text("", encoding="utf-8")
            except OSError as e:
                raise IoError(f"Cannot write run log {self.path}: {e}", path=self.path, original_exception=e)

    def event(self, name: str, **fields) -> None:
        line = json.dumps({"event": name, **fields}, sort_keys=True, default=str)
        logger.debug(line)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def train_transform(img: PixelImage, input_size: int, rng: np.random.Generator,
                    oversize_fraction: float = 0.125) -> PixelImage:
    """Resize the shorter side 12.5% past the input size, flip with p=0.5, random-crop to a square."""
    resized = resize_shorter_side(img, _round_half_up(input_size * (1.0 + oversize_fraction)))
    if rng.random() < 0.5:
        resized = hflip(resized)
    return random_crop(resized, input_size, input_size, rng)


def eval_transform(img: PixelImage, input_size: int) -> PixelImage:
    return center_crop(resize_shorter_side(img, input_size), input_size, input_size)


def _augmented_features(path: Path, input_size: int, oversize_fraction: float, seed_key: List[int]) -> np.ndarray:
    rng = np.random.default_rng(seed_key)
    return extract_features(train_transform(load_image(path), input_size, rng, oversize_fraction))


def _eval_features(path: Path, input_size: int) -> np.ndarray:
    return extract_features(eval_transform(load_image(path), input_size))


def eval_feature_matrix(records: Sequence[ImageRecord], input_size: int,
                        cache: Optional[FeatureCache] = None, jobs: int = 1) -> np.ndarray:
    """Eval-transform features for ``records`` in order, computed once per image when cached."""
    cache = cache if cache is not None else FeatureCache()
    missing = [r for r in records if cache.get(r.path, input_size) is None]
    if missing:
        computed = Parallel(n_jobs=jobs)(delayed(_eval_features)(r.path, input_size) for r in missing)
        for record, vector in zip(missing, computed):
            cache.put(record.path, input_size, vector)
    return feature_matrix([cache.get(r.path, input_size) for r in records])


def _predict_records(checkpoint: ModelCheckpoint, records: Sequence[ImageRecord],
                     cache: Optional[FeatureCache] = None, jobs: int = 1) -> np.ndarray:
    input_size = int(checkpoint.config.get("input_size", 224))
    return checkpoint.predict(eval_feature_matrix(records, input_size, cache, jobs))


def _resolve_sources(config: TrainConfig, plan: SplitPlan, records: Sequence[ImageRecord]) -> List[str]:
    present = sorted({r.source for r in records})
    if config.train_corpus == "all":
        # datasets without a recorded policy are trainable
        sources = [s for s in present if plan.policies.get(s) is None or plan.policies[s].trains]
    else:
        unknown = [s for s in config.train_corpus if s not in present]
        if unknown:
            raise ValidationError(f"Training corpus names unknown dataset(s): {', '.join(unknown)}",
                                  code="TRAIN_UNKNOWN_DATASET", details={"available": present})
        blocked = [s for s in config.train_corpus if s in plan.policies and not plan.policies[s].trains]
        if blocked:
            raise ValidationError(f"Dataset(s) {', '.join(blocked)} are test-only and cannot be trained on",
                                  code="TRAIN_TEST_ONLY_DATASET")
        sources = sorted(config.train_corpus)
    if not sources:
        raise EmptyPartition("No train-eligible dataset in the training corpus")
    return sources


def _check_harmonized(records: Sequence[ImageRecord], partition: str) -> np.ndarray:
    unscored = [r.id for r in records if not r.is_harmonized]
    if unscored:
        raise ValidationError(f"{len(unscored)} {partition} image(s) lack a harmonized MOS, e.g. {unscored[0]}",
                              code="TRAIN_NOT_HARMONIZED", suggestions=["Run the ingest command first"])
    return np.array([r.mos for r in records], dtype=np.float64)


def train(config: TrainConfig, plan: SplitPlan, records: Sequence[ImageRecord],
          run_log: Optional[RunLog] = None, cache: Optional[FeatureCache] = None) -> Tuple[ModelCheckpoint, TrainHistory]:
    """
    Train one regressor on the configured corpus and repetition.

    Returns:
        Checkpoint of the best-validation-PLCC epoch (earliest on ties) and the history
    """
    run_log = run_log or RunLog()
    cache = cache if cache is not None else FeatureCache()
    repetition = config.split_repetition
    if repetition >= plan.n_repetitions:
        raise ValidationError(f"Split repetition {repetition} not in plan with {plan.n_repetitions} repetition(s)",
                              code="TRAIN_BAD_REPETITION")

    is_valid, issues = verify_no_leakage(plan, records)
    if not is_valid:
        raise LeakageDetected(f"Split plan fails the leakage audit with {len(issues)} issue(s)", issues=issues)

    sources = _resolve_sources(config, plan, records)
    train_records = plan.select(records, repetition, "train", sources)
    val_records = plan.select(records, repetition, "val", sources)
    for name, partition in (("train", train_records), ("val", val_records)):
        if not partition:
            raise EmptyPartition(f"The {name} partition of repetition {repetition} is empty for {', '.join(sources)}",
                                 details={"partition": name, "repetition": repetition, "sources": sources})
    train_mos = _check_harmonized(train_records, "training")
    val_mos = _check_harmonized(val_records, "validation")

    # class weights come from the training partition only
    weights = class_weights([quality_level(m) for m in train_mos])
    train_weights = sample_weights(train_mos, weights)

    n_train = len(train_records)
    steps_per_epoch = math.ceil(n_train / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    seed = config.seed

    model = MlpRegressor.initialize(config.widths, config.dropout,
                                    np.random.default_rng([seed, repetition, _INIT_STREAM]))
    state = OptimizerState(weight_decay=config.weight_decay)
    scaler = FeatureScaler()
    history = TrainHistory()
    best_params = None

    logger.info(f"Training {config.model_name} on {config.corpus_label} (repetition {repetition}): "
                f"{n_train} train / {len(val_records)} val images, {config.epochs} epoch(s)")
    run_log.event("run_start", corpus=config.corpus_label, repetition=repetition, n_train=n_train,
                  n_val=len(val_records), total_steps=total_steps,
                  class_weights={str(k): v for k, v in weights.items()})
    # validation features never change between epochs
    val_features = eval_feature_matrix(val_records, config.input_size, cache, config.jobs)

    step = 0
    lr = 0.0
    for epoch in range(config.epochs):
        raw = feature_matrix(Parallel(n_jobs=config.jobs)(
            delayed(_augmented_features)(record.path, config.input_size, config.oversize_fraction,
                                         [seed, repetition, _IMAGE_STREAM, epoch, index])
            for index, record in enumerate(train_records)
        ))  # fresh augmentation every epoch, one seed per (epoch, image)
        # scaler statistics are frozen after the first epoch and travel with the checkpoint
        if epoch == 0:
            scaler.fit(raw)
        features = scaler.transform(raw)

        order = np.random.default_rng([seed, repetition, _SHUFFLE_STREAM, epoch]).permutation(n_train)
        dropout_rng = np.random.default_rng([seed, repetition, _DROPOUT_STREAM, epoch])
        epoch_loss = 0.0
        for start in range(0, n_train, config.batch_size):
            batch = order[start:start + config.batch_size]
            preds = model.forward(features[batch], Mode.TRAIN, rng=dropout_rng)
            loss, grad = weighted_mse_loss(preds, train_mos[batch], train_weights[batch])
            grads = model.backward(grad)
            # schedule indexed by global step, not epoch
            lr = onecycle_lr(step, total_steps, config.max_lr, config.warmup_fraction)
            optimizer_step(state, model.params, grads, lr)
            epoch_loss += loss * len(batch)
            step += 1
        epoch_loss /= n_train

        val_preds = model.predict(scaler.transform(val_features))
        try:
            val_plcc = plcc(val_preds, val_mos)
        except DegenerateVector as e:
            run_log.event("run_failed", epoch=epoch, reason=e.code)
            raise TrainingFailedError(
                f"Validation PLCC undefined at epoch {epoch}: {e.message}",
                details={"epoch": epoch, "prediction_min": float(val_preds.min()),
                         "prediction_max": float(val_preds.max()), "cause": e.code},
                original_exception=e)

        if history.add(epoch, epoch_loss, val_plcc, lr):
            best_params = {k: v.copy() for k, v in model.params.items()}  # strict improvement only
        run_log.event("epoch", epoch=epoch, train_loss=epoch_loss, val_plcc=val_plcc, lr=lr)
        logger.info(f"Epoch {epoch}: loss={epoch_loss:.4f} val_plcc={val_plcc:.4f} lr={lr:.2e}")

    run_log.event("run_end", selected_epoch=history.selected_epoch, best_val_plcc=history.best_val_plcc)
    checkpoint = ModelCheckpoint(
        model=MlpRegressor(config.widths, config.dropout, best_params),
        scaler=scaler,
        config=config.snapshot(),
        metadata={
            "model_name": config.model_name,
            "train_corpus": config.corpus_label,
            "train_sources": sources,
            "repetition": repetition,
            "selected_epoch": history.selected_epoch,
            "best_val_plcc": history.best_val_plcc,
            "n_train": n_train,
            "n_val": len(val_records),
            "class_weights": {str(k): v for k, v in weights.items()},
        },
    )
    return checkpoint, history


def testable_datasets(plan: SplitPlan, records: Sequence[ImageRecord]) -> List[str]:
    """Datasets with a test partition: everything except train_val_only sources."""
    return [s for s in sorted({r.source for r in records})
            if plan.policies.get(s) is None or plan.policies[s].tests]


def evaluate(checkpoint: ModelCheckpoint, plan: SplitPlan, records: Sequence[ImageRecord],
             test_datasets: Optional[Sequence[str]] = None, repetition: Optional[int] = None,
             cache: Optional[FeatureCache] = None, jobs: int = 1) -> EvalReport:
    """One report row per test dataset; empty or degenerate test sets are recorded, not raised."""
    repetition = int(checkpoint.metadata.get("repetition", 0)) if repetition is None else repetition
    model_name = str(checkpoint.metadata.get("model_name", "model"))
    corpus = str(checkpoint.metadata.get("train_corpus", "unknown"))
    datasets = sorted(test_datasets) if test_datasets is not None else testable_datasets(plan, records)

    report = EvalReport()
    for dataset in datasets:
        test_records = plan.select(records, repetition, "test", [dataset])
        try:
            if not test_records:
                raise EmptyTestSet(f"No test images for {dataset} in repetition {repetition}",
                                   details={"dataset": dataset, "repetition": repetition})
            targets = _check_harmonized(test_records, "test")
            preds = _predict_records(checkpoint, test_records, cache, jobs)
            report.add_row(model_name, corpus, dataset, repetition, plcc(preds, targets), srocc(preds, targets))
        except (EmptyTestSet, DegenerateVector) as e:
            logger.warning(f"Evaluation of {corpus} on {dataset} (repetition {repetition}) failed: {e.message}")
            report.add_row(model_name, corpus, dataset, repetition, error=e.code)
    return report


def _training_conditions(plan: SplitPlan, records: Sequence[ImageRecord]) -> List[Union[str, List[str]]]:
    eligible = [s for s in sorted({r.source for r in records})
                if plan.policies.get(s) is None or plan.policies[s].trains]
    conditions: List[Union[str, List[str]]] = [[name] for name in eligible]
    # a merged run only when there is something to merge
    if len(eligible) >= 2:
        conditions.append("all")
    return conditions


def run_experiment_matrix(records: Sequence[ImageRecord], plan: SplitPlan, config: TrainConfig,
                          output_directory: Optional[Union[str, Path]] = None) -> Tuple[EvalReport, List[Dict[str, Any]]]:
    """
    Single-domain runs per train-eligible dataset plus a merged "All" run, every
    checkpoint evaluated on every test dataset, for each repetition of the plan.

    Returns:
        The report and a list of per-cell failures (the matrix keeps going)
    """
    output_directory = Path(output_directory) if output_directory is not None else None
    if output_directory is not None:
        try:
            output_directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoError(f"Cannot create {output_directory}: {e}", path=output_directory, original_exception=e)

    conditions = _training_conditions(plan, records)
    test_datasets = testable_datasets(plan, records)
    cache = FeatureCache()
    report = EvalReport()
    failures: List[Dict[str, Any]] = []
    logger.info(f"Experiment matrix: {len(conditions)} training condition(s) x {len(test_datasets)} test set(s) "
                f"x {plan.n_repetitions} repetition(s)")

    for repetition in range(plan.n_repetitions):
        for corpus in conditions:
            run_config = config.model_copy(update={"train_corpus": corpus, "split_repetition": repetition})
            label = run_config.corpus_label
            run_log = None
            if output_directory is not None:
                run_log = RunLog(output_directory / f"{label}_rep{repetition}.log.jsonl")
            try:
                checkpoint, history = train(run_config, plan, records, run_log=run_log, cache=cache)
                if output_directory is not None:
                    checkpoint.save(output_directory / f"{label}_rep{repetition}.iqaf")
                    history.to_csv(output_directory / f"{label}_rep{repetition}.history.csv")
                report.extend(evaluate(checkpoint, plan, records, test_datasets, repetition, cache, config.jobs))
            except IQAForgeError as e:
                e.log()
                failure = e.to_dict()
                failure["details"] = {**failure["details"], "train_corpus": label, "repetition": repetition}
                failures.append(failure)
                for dataset in test_datasets:
                    report.add_row(config.model_name, label, dataset, repetition, error=e.code)
    return report, failures
