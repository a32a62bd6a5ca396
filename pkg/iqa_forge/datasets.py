# iqa_forge/datasets.py

"""
Dataset descriptors, MOS harmonization and subject-grouped splits.

A subject is a pristine image together with every distorted view generated from
it; split assignment always happens at subject granularity so no view of a test
subject can leak into training.
"""

import json
import logging
import math
import os
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from iqa_forge.utils.enhanced_errors import (
    DuplicateId,
    EmptyRatings,
    InfeasiblePolicy,
    IoError,
    ManifestFormatError,
    MissingDescriptor,
    ValidationError,
    ValueOutsideNativeRange,
)
from iqa_forge.utils.manifest_validator import (
    MANIFEST_COLUMNS,
    PARTITIONS,
    PLAN_COLUMNS,
    RATING_MAX,
    RATING_MIN,
    ManifestValidator,
    summarize_issues,
)

logger = logging.getLogger(__name__)

MOS_MIN = 1.0
MOS_MAX = 10.0
DEFAULT_RATIOS = (0.70, 0.15, 0.15)
DEFAULT_REPETITIONS = 5


class SplitPolicy(str, Enum):
    FULL = "full"
    TRAIN_VAL_ONLY = "train_val_only"
    TEST_ONLY = "test_only"

    @property
    def trains(self) -> bool:
        return self is not SplitPolicy.TEST_ONLY

    @property
    def tests(self) -> bool:
        return self is not SplitPolicy.TRAIN_VAL_ONLY


class DistortionType(str, Enum):
    AUTHENTIC = "authentic"
    ARTIFICIAL = "artificial"


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    native_range: Tuple[float, float]
    distortion_type: DistortionType = DistortionType.AUTHENTIC
    split_policy: SplitPolicy = SplitPolicy.FULL

    def __post_init__(self):
        low, high = (float(v) for v in self.native_range)
        if not (math.isfinite(low) and math.isfinite(high)) or low >= high:
            raise ValidationError(f"Dataset '{self.name}': native range min {low} must be below max {high}",
                                  code="DATASET_INVALID_DESCRIPTOR")
        object.__setattr__(self, "native_range", (low, high))
        object.__setattr__(self, "distortion_type", DistortionType(self.distortion_type))
        object.__setattr__(self, "split_policy", SplitPolicy(self.split_policy))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "native_min": self.native_range[0],
            "native_max": self.native_range[1],
            "distortion_type": self.distortion_type.value,
            "split_policy": self.split_policy.value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetDescriptor":
        try:
            return cls(name=str(data["name"]),
                       native_range=(data["native_min"], data["native_max"]),
                       distortion_type=data.get("distortion_type", DistortionType.AUTHENTIC),
                       split_policy=data.get("split_policy", SplitPolicy.FULL))
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"Invalid dataset descriptor {data}: {e}",
                                  code="DATASET_INVALID_DESCRIPTOR", original_exception=e)


# Public datasets with their published score ranges and roles in the split protocol.
KNOWN_DATASETS: Dict[str, DatasetDescriptor] = {
    d.name: d for d in [
        DatasetDescriptor("KonIQ-10k", (1, 5), DistortionType.AUTHENTIC, SplitPolicy.FULL),
        DatasetDescriptor("GFIQA-20k", (0, 1), DistortionType.AUTHENTIC, SplitPolicy.FULL),
        DatasetDescriptor("SPAQ", (0, 100), DistortionType.AUTHENTIC, SplitPolicy.FULL),
        DatasetDescriptor("BIQ2021", (0, 1), DistortionType.AUTHENTIC, SplitPolicy.TRAIN_VAL_ONLY),
        DatasetDescriptor("LIVE-ItW", (0, 100), DistortionType.AUTHENTIC, SplitPolicy.TEST_ONLY),
        DatasetDescriptor("Kadid-10k", (1, 5), DistortionType.ARTIFICIAL, SplitPolicy.FULL),
        DatasetDescriptor("Legit.Health-DIQA-Artificial", (1, 10), DistortionType.ARTIFICIAL, SplitPolicy.FULL),
    ]
}


def load_descriptors(paths: Iterable[Union[str, Path]] = ()) -> Dict[str, DatasetDescriptor]:
    """Built-in registry extended (and overridden by name) with JSON descriptor files."""
    descriptors = dict(KNOWN_DATASETS)
    for path in paths:
        try:
            entries = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise IoError(f"Cannot read descriptor file {path}: {e}", path=path, original_exception=e)
        except json.JSONDecodeError as e:
            raise ValidationError(f"Descriptor file {path} is not valid JSON: {e}",
                                  code="DATASET_INVALID_DESCRIPTOR", details={"line_number": e.lineno})
        if isinstance(entries, dict):
            entries = [entries]
        for entry in entries:
            descriptor = DatasetDescriptor.from_dict(entry)
            descriptors[descriptor.name] = descriptor
    return descriptors


def write_descriptors(descriptors: Sequence[DatasetDescriptor], path: Union[str, Path]) -> None:
    text = json.dumps([d.to_dict() for d in descriptors], indent=2, sort_keys=True) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot write descriptor file {path}: {e}", path=path, original_exception=e)


@dataclass
class ImageRecord:
    id: str
    subject_id: str
    path: Path
    source: str
    mos: Optional[float] = None
    native_range: Optional[Tuple[float, float]] = None
    family: Optional[str] = None
    level: Optional[int] = None
    raw_ratings: Optional[List[int]] = None

    def __post_init__(self):
        self.path = Path(self.path)
        if self.raw_ratings is not None:
            bad = [r for r in self.raw_ratings if int(r) != r or not RATING_MIN <= r <= RATING_MAX]
            if bad:
                raise ValidationError(f"Image {self.id}: ratings {bad} outside [{RATING_MIN}, {RATING_MAX}]",
                                      code="DATASET_INVALID_RATING")

    @property
    def subject_key(self) -> str:
        return subject_key(self.source, self.subject_id)

    @property
    def is_pristine(self) -> bool:
        return self.family is None

    @property
    def severity_rank(self) -> int:
        """0 for a pristine image, otherwise the distortion level."""
        return self.level or 0

    @property
    def is_harmonized(self) -> bool:
        return self.mos is not None and MOS_MIN <= self.mos <= MOS_MAX


def subject_key(source: str, subject_id: str) -> str:
    """Subject ids are only unique within a dataset, so keys carry the source."""
    prefix = f"{source}/"
    return subject_id if subject_id.startswith(prefix) else prefix + subject_id


def aggregate_mos(raw_ratings: Sequence[int]) -> float:
    if raw_ratings is None or len(raw_ratings) == 0:
        raise EmptyRatings("Cannot aggregate an empty list of ratings")
    return float(np.mean(np.asarray(raw_ratings, dtype=np.float64)))


def rescale_mos(value: float, native_range: Tuple[float, float]) -> float:
    """Linear map of ``value`` from the native range onto [1, 10]."""
    low, high = native_range
    if not low <= value <= high:
        raise ValueOutsideNativeRange(f"Score {value} outside native range [{low}, {high}]",
                                      details={"value": value, "native_range": [low, high]})
    return MOS_MIN + (MOS_MAX - MOS_MIN) * (value - low) / (high - low)


def _format_number(value: Optional[float]) -> str:
    if value is None:
        return ""
    value = float(value)
    # repr round-trips the float exactly
    return str(int(value)) if value.is_integer() else repr(value)


def write_manifest(records: Sequence[ImageRecord], path: Union[str, Path]) -> None:
    """Write records as a manifest CSV; image paths are stored relative to the manifest."""
    path = Path(path)
    base = path.parent
    rows = []
    for r in records:
        rows.append({
            "id": r.id,
            "subject_id": r.subject_id,
            "path": Path(os.path.relpath(r.path, base)).as_posix(),
            "source": r.source,
            "family": r.family or "",
            "level": "" if r.level is None else str(r.level),
            "mos": _format_number(r.mos),
            "native_min": _format_number(r.native_range[0]) if r.native_range else "",
            "native_max": _format_number(r.native_range[1]) if r.native_range else "",
        })
    frame = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoError(f"Cannot write manifest {path}: {e}", path=path, original_exception=e)


def _read_table(path: Union[str, Path], kind: str) -> pd.DataFrame:
    try:
        # everything as text; empty cells stay ""
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise IoError(f"{kind.capitalize()} file not found: {path}", path=path, original_exception=e)
    except pd.errors.EmptyDataError as e:
        raise ManifestFormatError(f"{kind.capitalize()} file {path} is empty", path=path,
                                  issues=[{"type": "structure", "message": "empty file", "severity": "error", "line": 1}])
    except pd.errors.ParserError as e:
        raise ManifestFormatError(f"{kind.capitalize()} file {path} is not valid CSV: {e}", path=path,
                                  original_exception=e)
    except OSError as e:
        raise IoError(f"Cannot read {kind} file {path}: {e}", path=path, original_exception=e)


def _optional_float(text: str) -> Optional[float]:
    return float(text) if str(text).strip() else None


def load_manifest(path: Union[str, Path], source: Optional[str] = None) -> List[ImageRecord]:
    """
    Read a manifest CSV into records.

    Only ``id`` and ``path`` are mandatory: a bare pristine listing gets
    ``subject_id = id`` and the given (or file-stem) source.
    """
    path = Path(path)
    frame = _read_table(path, "manifest")
    is_valid, issues = ManifestValidator().validate_manifest(frame)
    for issue in issues:
        if issue["severity"] != "error":
            logger.warning(f"{path}: line {issue.get('line')}: {issue['message']}")
    if not is_valid:
        errors = [i for i in issues if i["severity"] == "error"]
        duplicates = [i["image_id"] for i in errors if i["type"] == "duplicate_id"]
        if duplicates and len(duplicates) == len(errors):
            raise DuplicateId(f"Manifest {path} has duplicate image ids: {', '.join(duplicates)}",
                              duplicates=duplicates, details={"path": str(path), "issues": errors})
        raise ManifestFormatError(f"Invalid manifest {path}: {summarize_issues(errors)}",
                                  path=path, issues=errors)

    default_source = source or path.stem
    records = []
    for row in frame.to_dict("records"):
        native_min = _optional_float(row.get("native_min", ""))
        native_max = _optional_float(row.get("native_max", ""))
        level = str(row.get("level", "")).strip()
        records.append(ImageRecord(
            id=row["id"].strip(),
            subject_id=(row.get("subject_id", "") or row["id"]).strip(),
            path=Path(os.path.normpath(path.parent / row["path"].strip())),
            source=(row.get("source", "") or default_source).strip(),
            mos=_optional_float(row.get("mos", "")),
            native_range=(native_min, native_max) if native_min is not None else None,
            family=(row.get("family", "") or None),
            level=int(level) if level else None,
        ))
    logger.info(f"Loaded {len(records)} record(s) from {path}")
    return records


def load_ratings(path: Union[str, Path]) -> Dict[str, List[int]]:
    """Read per-observer ratings (``image_id,observer_id,rating``) grouped by image."""
    frame = _read_table(path, "ratings")
    is_valid, issues = ManifestValidator().validate_ratings(frame)
    if not is_valid:
        raise ManifestFormatError(f"Invalid ratings file {path}: {summarize_issues(issues)}",
                                  path=path, issues=issues)
    ratings: Dict[str, List[int]] = {}
    for row in frame.to_dict("records"):
        ratings.setdefault(row["image_id"].strip(), []).append(int(row["rating"]))
    return ratings


def write_ratings(ratings: Dict[str, Sequence[Tuple[str, int]]], path: Union[str, Path]) -> None:
    """Write ``{image_id: [(observer_id, rating), ...]}`` in image order."""
    rows = [{"image_id": image_id, "observer_id": observer, "rating": int(rating)}
            for image_id, entries in ratings.items() for observer, rating in entries]
    try:
        pd.DataFrame(rows, columns=["image_id", "observer_id", "rating"]).to_csv(
            path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoError(f"Cannot write ratings {path}: {e}", path=path, original_exception=e)


def _descriptor_for(record: ImageRecord, descriptors: Dict[str, DatasetDescriptor]) -> DatasetDescriptor:
    descriptor = descriptors.get(record.source)
    if descriptor is None:
        raise MissingDescriptor(f"No dataset descriptor for source '{record.source}' (image {record.id})",
                                source=record.source)
    return descriptor


def harmonize_records(records: Sequence[ImageRecord], descriptors: Dict[str, DatasetDescriptor],
                      ratings: Optional[Dict[str, List[int]]] = None) -> List[ImageRecord]:
    """
    Put every record's MOS on the common [1, 10] scale.

    Raw observer ratings win over a precomputed MOS and are re-aggregated. The
    descriptor's native range is authoritative and recorded on the output.
    """
    ratings = ratings or {}
    known_ids = {r.id for r in records}
    orphans = sorted(set(ratings) - known_ids)
    if orphans:
        logger.warning(f"Ignoring ratings for {len(orphans)} image(s) not in the manifest, e.g. {orphans[0]}")

    harmonized = []
    for record in records:
        descriptor = _descriptor_for(record, descriptors)
        raw = ratings.get(record.id) or record.raw_ratings
        if raw:
            value = aggregate_mos(raw)
        elif record.mos is not None:
            value = record.mos
        else:
            raise EmptyRatings(f"Image {record.id} has neither observer ratings nor a MOS",
                               details={"image_id": record.id})
        try:
            mos = rescale_mos(value, descriptor.native_range)
        except ValueOutsideNativeRange as e:
            e.details["image_id"] = record.id
            raise
        harmonized.append(replace(record, mos=mos, native_range=descriptor.native_range,
                                  raw_ratings=list(raw) if raw else None))
    return harmonized


def merge_domains(datasets: Sequence[Tuple[DatasetDescriptor, Sequence[ImageRecord]]]) -> List[ImageRecord]:
    """Concatenate harmonized datasets, prefixing ids and subject ids with the source name."""
    merged: List[ImageRecord] = []
    for descriptor, records in datasets:
        for record in records:
            if not record.is_harmonized:
                raise ValidationError(f"Image {record.id} of {descriptor.name} is not harmonized (mos={record.mos})",
                                      code="DATASET_NOT_HARMONIZED")
            prefix = f"{descriptor.name}/"
            merged.append(replace(
                record,
                # already-prefixed ids are kept as they are
                id=record.id if record.id.startswith(prefix) else prefix + record.id,
                subject_id=subject_key(descriptor.name, record.subject_id),
                source=descriptor.name,
            ))

    counts: Dict[str, int] = {}
    for record in merged:
        counts[record.id] = counts.get(record.id, 0) + 1
    duplicates = sorted(i for i, n in counts.items() if n > 1)
    if duplicates:
        raise DuplicateId(f"{len(duplicates)} duplicate id(s) after merging, e.g. {duplicates[0]}",
                          duplicates=duplicates)
    return merged


@dataclass
class SplitPlan:
    """Per repetition, partition name -> set of subject keys, plus each dataset's policy."""

    n_repetitions: int
    seed: int
    partitions: List[Dict[str, Set[str]]] = field(default_factory=list)
    policies: Dict[str, SplitPolicy] = field(default_factory=dict)

    def partition_of(self, repetition: int, key: str) -> List[str]:
        return [name for name in PARTITIONS if key in self.partitions[repetition].get(name, set())]

    def select(self, records: Sequence[ImageRecord], repetition: int, partition: str,
               sources: Optional[Iterable[str]] = None) -> List[ImageRecord]:
        """Records whose subject is in ``partition`` for ``repetition``, in input order."""
        members = self.partitions[repetition].get(partition, set())
        wanted = set(sources) if sources is not None else None
        return [r for r in records
                if r.subject_key in members and (wanted is None or r.source in wanted)]


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _partition_sizes(n: int, policy: SplitPolicy, ratios: Tuple[float, float, float],
                     name: str) -> Tuple[int, int, int]:
    r_train, r_val, r_test = ratios
    if policy is SplitPolicy.TEST_ONLY:
        if n < 1:
            raise InfeasiblePolicy(f"Dataset '{name}' has no subjects for its test_only policy")
        return 0, 0, n
    if policy is SplitPolicy.TRAIN_VAL_ONLY:
        if n < 2:
            raise InfeasiblePolicy(f"Dataset '{name}' needs at least 2 subjects for train_val_only, has {n}",
                                   details={"dataset": name, "n_subjects": n})
        n_val = min(n - 1, max(1, _round_half_up(n * r_val / (r_train + r_val))))
        return n - n_val, n_val, 0
    if n < 3:
        raise InfeasiblePolicy(f"Dataset '{name}' needs at least 3 subjects for a full split, has {n}",
                               details={"dataset": name, "n_subjects": n})
    n_val = max(1, _round_half_up(n * r_val))
    n_test = max(1, _round_half_up(n * r_test))
    # small datasets: shrink the larger held-out partition until train keeps a subject
    while n - n_val - n_test < 1:
        if n_val >= n_test and n_val > 1:
            n_val -= 1
        else:
            n_test -= 1
    return n - n_val - n_test, n_val, n_test


def _split_seed(seed: int, repetition: int, name: str) -> int:
    # crc32, not hash(): identical across interpreter runs
    return (seed * 1_000_003 + repetition * 7_919 + zlib.crc32(name.encode("utf-8"))) % (2 ** 32)


def _check_ratios(ratios: Sequence[float]) -> Tuple[float, float, float]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"Split ratios must be three positive numbers summing to 1, got {tuple(ratios)}",
                              code="DATASET_INVALID_RATIOS")
    return tuple(float(r) for r in ratios)


def make_splits(records: Sequence[ImageRecord], descriptors: Dict[str, DatasetDescriptor],
                n_repetitions: int = DEFAULT_REPETITIONS, ratios: Sequence[float] = DEFAULT_RATIOS,
                seed: int = 0) -> SplitPlan:
    """
    Assign subjects to train/val/test per dataset and repetition.

    The plan depends only on the set of subject keys, the descriptors, the
    ratios and the seed: subjects are sorted before the seeded shuffle.
    """
    ratios = _check_ratios(ratios)
    subjects_by_source: Dict[str, Set[str]] = {}
    for record in records:
        _descriptor_for(record, descriptors)
        subjects_by_source.setdefault(record.source, set()).add(record.subject_key)

    policies = {name: descriptors[name].split_policy for name in sorted(subjects_by_source)}
    plan = SplitPlan(n_repetitions=n_repetitions, seed=seed, policies=policies)

    for repetition in range(n_repetitions):
        partitions: Dict[str, Set[str]] = {name: set() for name in PARTITIONS}
        for name in sorted(subjects_by_source):
            subjects = sorted(subjects_by_source[name])  # record order must not matter
            policy = policies[name]
            n_train, n_val, n_test = _partition_sizes(len(subjects), policy, ratios, name)
            state = _split_seed(seed, repetition, name)

            if policy is SplitPolicy.TEST_ONLY:
                partitions["test"].update(subjects)
                continue
            # test first, then val from the remainder; the +1 keeps the two draws independent
            rest, test = (subjects, []) if n_test == 0 else train_test_split(
                subjects, test_size=n_test, random_state=state)
            train, val = train_test_split(rest, test_size=n_val, random_state=state + 1)
            partitions["train"].update(train)
            partitions["val"].update(val)
            partitions["test"].update(test)
            logger.debug(f"Repetition {repetition}, {name}: {len(train)}/{len(val)}/{len(test)} subjects")
        plan.partitions.append(partitions)

    logger.info(f"Built split plan: {n_repetitions} repetition(s) over {len(policies)} dataset(s), seed={seed}")
    return plan


def verify_no_leakage(plan: SplitPlan, records: Sequence[ImageRecord]) -> Tuple[bool, List[Dict[str, Any]]]:
    """
    Audit a split plan against the records it should cover.

    Returns:
        Tuple of (is_valid, issues); violations are data, never raised
    """
    issues: List[Dict[str, Any]] = []

    counts: Dict[str, int] = {}
    for record in records:
        counts[record.id] = counts.get(record.id, 0) + 1
    for image_id in sorted(i for i, n in counts.items() if n > 1):
        issues.append({"type": "duplicate_id", "severity": "error", "image_id": image_id,
                       "message": f"Image id '{image_id}' appears {counts[image_id]} times"})

    # subject keys are source-prefixed, so equal subject ids in two datasets never collide
    source_of = {r.subject_key: r.source for r in records}
    for repetition, partitions in enumerate(plan.partitions):
        for key in sorted(source_of):
            assigned = [name for name in PARTITIONS if key in partitions.get(name, set())]
            if not assigned:
                issues.append({"type": "unassigned_subject", "severity": "error", "repetition": repetition,
                               "subject_id": key,
                               "message": f"Subject '{key}' has no partition in repetition {repetition}"})
                continue
            if len(assigned) > 1:
                issues.append({"type": "subject_leak", "severity": "error", "repetition": repetition,
                               "subject_id": key, "partitions": assigned,
                               "message": f"Subject '{key}' is in {' and '.join(assigned)} in repetition {repetition}"})
            policy = plan.policies.get(source_of[key])
            breached = [name for name in assigned
                        if (policy is SplitPolicy.TEST_ONLY and name != "test")
                        or (policy is SplitPolicy.TRAIN_VAL_ONLY and name == "test")]
            if breached:
                issues.append({"type": "policy_breach", "severity": "error", "repetition": repetition,
                               "subject_id": key, "partitions": breached, "policy": policy.value,
                               "message": f"Subject '{key}' of {policy.value} dataset "
                                          f"'{source_of[key]}' is in {', '.join(breached)}"})

    return len(issues) == 0, issues


def write_split_plan(plan: SplitPlan, path: Union[str, Path]) -> Path:
    """Write the plan CSV plus a ``.meta.json`` sidecar holding seed and policies."""
    path = Path(path)
    rows = [{"repetition": repetition, "subject_id": key, "partition": name}
            for repetition, partitions in enumerate(plan.partitions)
            for name in PARTITIONS
            for key in sorted(partitions.get(name, set()))]
    meta_path = path.with_suffix(".meta.json")
    meta = {"n_repetitions": plan.n_repetitions, "seed": plan.seed,
            "policies": {name: policy.value for name, policy in sorted(plan.policies.items())}}
    try:
        pd.DataFrame(rows, columns=PLAN_COLUMNS).to_csv(path, index=False, lineterminator="\n")
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot write split plan {path}: {e}", path=path, original_exception=e)
    return meta_path


def load_split_plan(path: Union[str, Path]) -> SplitPlan:
    path = Path(path)
    frame = _read_table(path, "split plan")
    is_valid, issues = ManifestValidator().validate_plan(frame)
    if not is_valid:
        raise ManifestFormatError(f"Invalid split plan {path}: {summarize_issues(issues)}",
                                  path=path, issues=issues)

    meta_path = path.with_suffix(".meta.json")
    meta: Dict[str, Any] = {}
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise IoError(f"Cannot read split plan metadata {meta_path}: {e}", path=meta_path,
                          original_exception=e)

    repetitions = [int(v) for v in frame["repetition"]] if len(frame) else []
    n_repetitions = int(meta.get("n_repetitions", max(repetitions, default=-1) + 1))
    # header is line 1
    out_of_range = [{"line": index + 2, "repetition": r} for index, r in enumerate(repetitions)
                    if not 0 <= r < n_repetitions]
    if out_of_range:
        first = out_of_range[0]
        raise ValidationError(
            f"Split plan {path} line {first['line']}: repetition {first['repetition']} outside the "
            f"{n_repetitions} repetition(s) recorded in {meta_path.name}",
            code="DATASET_PLAN_REPETITION_RANGE",
            details={"path": str(path), "line_number": first["line"], "n_repetitions": n_repetitions,
                     "rows": out_of_range[:20]})

    partitions: List[Dict[str, Set[str]]] = [{name: set() for name in PARTITIONS} for _ in range(n_repetitions)]
    for row in frame.to_dict("records"):
        partitions[int(row["repetition"])][row["partition"].strip()].add(row["subject_id"].strip())
    return SplitPlan(n_repetitions=n_repetitions, seed=int(meta.get("seed", 0)), partitions=partitions,
                     policies={k: SplitPolicy(v) for k, v in meta.get("policies", {}).items()})


def mos_histogram(records: Sequence[ImageRecord], bins: int = 10) -> pd.DataFrame:
    """Per-source MOS counts over ``bins`` equal bins spanning [1, 10]."""
    rows = []
    for source in sorted({r.source for r in records}):
        values = [r.mos for r in records if r.source == source and r.mos is not None]
        # last bin is closed, so MOS 10 lands in it
        counts, edges = np.histogram(values, bins=bins, range=(MOS_MIN, MOS_MAX))
        for count, low, high in zip(counts, edges[:-1], edges[1:]):
            rows.append({"source": source, "bin_low": round(float(low), 6),
                         "bin_high": round(float(high), 6), "count": int(count)})
    return pd.DataFrame(rows, columns=["source", "bin_low", "bin_high", "count"])
