# iqa_forge/metrics.py

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from iqa_forge.utils.enhanced_errors import (
    DegenerateVector,
    EmptyInput,
    IoError,
    LengthMismatch,
    ManifestFormatError,
    ValidationError,
)

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["model", "train_corpus", "test_dataset", "repetition", "plcc", "srocc", "error"]
GROUP_COLUMNS = ["model", "train_corpus", "test_dataset"]


def as_score_vector(values: Sequence[float], name: str = "values") -> np.ndarray:
    """1-D float64 array of finite values."""
    vector = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(vector)):
        raise ValidationError(f"{name} contains non-finite values", code="METRIC_NON_FINITE")
    return vector


def _pair(x: Sequence[float], y: Sequence[float], min_length: int) -> Tuple[np.ndarray, np.ndarray]:
    x = as_score_vector(x, "x")
    y = as_score_vector(y, "y")
    if x.size != y.size:
        raise LengthMismatch(f"Score vectors differ in length: {x.size} vs {y.size}",
                             details={"len_x": int(x.size), "len_y": int(y.size)})
    if x.size < min_length:
        raise DegenerateVector(f"Need at least {min_length} scores, got {x.size}",
                               details={"n": int(x.size)})
    return x, y


def mse(y: Sequence[float], yhat: Sequence[float]) -> float:
    y, yhat = _pair(y, yhat, 1)
    return float(np.mean((y - yhat) ** 2))


def plcc(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson linear correlation; constant vectors raise instead of returning NaN."""
    x, y = _pair(x, y, 2)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateVector("Correlation undefined for a constant score vector",
                               details={"constant": "x" if sxx == 0.0 else "y", "n": int(x.size)})
    r = float(np.dot(xc, yc)) / (np.sqrt(sxx) * np.sqrt(syy))
    # rounding can push |r| a hair past 1
    return float(np.clip(r, -1.0, 1.0))


def fractional_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    return stats.rankdata(values, method="average")


def spearman_closed_form(rank_x: np.ndarray, rank_y: np.ndarray) -> float:
    """1 - 6*sum(d^2) / (n(n^2 - 1)); only valid when neither ranking has ties."""
    n = rank_x.size
    d = rank_x - rank_y
    return float(1.0 - 6.0 * np.dot(d, d) / (n * (n * n - 1)))


def srocc(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _pair(x, y, 2)
    rank_x = fractional_ranks(x)
    rank_y = fractional_ranks(y)
    has_ties = np.unique(x).size < x.size or np.unique(y).size < y.size
    if has_ties:
        # Pearson on average ranks
        return plcc(rank_x, rank_y)
    # tie-free rankings of distinct values are never constant for n >= 2
    return spearman_closed_form(rank_x, rank_y)


def aggregate(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator; 0 for a single value)."""
    vector = as_score_vector(values)
    if vector.size == 0:
        raise EmptyInput("Cannot aggregate an empty list of values")
    std = float(np.std(vector, ddof=1)) if vector.size > 1 else 0.0
    return float(np.mean(vector)), std


@dataclass
class EvalReport:
    """Per (model, train corpus, test dataset, repetition) correlations."""

    rows: List[Dict[str, Any]] = field(default_factory=list)

    def add_row(self, model: str, train_corpus: str, test_dataset: str, repetition: int,
                plcc: Optional[float] = None, srocc: Optional[float] = None,
                error: Optional[str] = None) -> None:
        for name, value in (("plcc", plcc), ("srocc", srocc)):
            if value is not None and not -1.0 <= value <= 1.0:
                raise ValidationError(f"{name} {value} outside [-1, 1]", code="METRIC_OUT_OF_RANGE")
        self.rows.append({
            "model": model,
            "train_corpus": train_corpus,
            "test_dataset": test_dataset,
            "repetition": int(repetition),
            "plcc": plcc,
            "srocc": srocc,
            "error": error or "",
        })

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def aggregates(self) -> pd.DataFrame:
        """Mean and std over repetitions per (model, train corpus, test dataset); failed rows are skipped."""
        frame = self.to_frame()
        records = []
        for keys, group in frame.groupby(GROUP_COLUMNS, sort=True):
            ok = group[group["error"] == ""]
            # a group whose every repetition failed still gets a row
            entry = dict(zip(GROUP_COLUMNS, keys))
            if ok.empty:
                entry.update(plcc_mean=None, plcc_std=None, srocc_mean=None, srocc_std=None, n=0)
            else:
                entry["plcc_mean"], entry["plcc_std"] = aggregate(ok["plcc"].astype(float))
                entry["srocc_mean"], entry["srocc_std"] = aggregate(ok["srocc"].astype(float))
                entry["n"] = int(len(ok))
            entry["n_failed"] = int(len(group) - len(ok))
            records.append(entry)
        return pd.DataFrame(records, columns=GROUP_COLUMNS + ["plcc_mean", "plcc_std", "srocc_mean",
                                                              "srocc_std", "n", "n_failed"])

    def write_csv(self, path: Union[str, Path]) -> None:
        try:
            self.to_frame().to_csv(path, index=False, lineterminator="\n")
        except OSError as e:
            raise IoError(f"Cannot write report {path}: {e}", path=path, original_exception=e)

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "EvalReport":
        try:
            frame = pd.read_csv(path, dtype={"model": str, "train_corpus": str, "test_dataset": str,
                                             "error": str}, keep_default_na=False, na_values={"plcc": [""], "srocc": [""]})
        except FileNotFoundError as e:
            raise IoError(f"Report file not found: {path}", path=path, original_exception=e)
        except pd.errors.EmptyDataError:
            return cls()
        except (pd.errors.ParserError, ValueError) as e:
            raise ManifestFormatError(f"Report {path} is not valid CSV: {e}", path=path, original_exception=e)
        missing = [c for c in REPORT_COLUMNS if c not in frame.columns and c != "error"]
        if missing:
            raise ManifestFormatError(f"Report {path} lacks column(s) {', '.join(missing)}", path=path)

        report = cls()
        for row in frame.to_dict("records"):
            error = str(row.get("error", "") or "")
            report.add_row(row["model"], row["train_corpus"], row["test_dataset"], int(row["repetition"]),
                           None if error or pd.isna(row["plcc"]) else float(row["plcc"]),
                           None if error or pd.isna(row["srocc"]) else float(row["srocc"]),
                           error or None)
        return report
