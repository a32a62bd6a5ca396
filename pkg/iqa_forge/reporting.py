# iqa_forge/reporting.py

from pathlib import Path
from typing import Any, Dict, List, Optional
import logging

import pandas as pd
from tabulate import tabulate

from iqa_forge.datasets import mos_histogram
from iqa_forge.metrics import EvalReport
from iqa_forge.trainer import ALL_CORPUS_LABEL
from iqa_forge.utils.enhanced_errors import (
    EmptyReport,
    IQAForgeError,
    IoError,
    format_error_for_response,
)

logger = logging.getLogger(__name__)

METRICS = ("plcc", "srocc")


class ReportFormatter:
    """Renders evaluation rows as the training x test matrix (mean +/- std) plus CSV artifacts."""

    def __init__(self, precision: int = 4):
        self.precision = precision

    def _cell(self, mean, std) -> str:
        if mean is None or pd.isna(mean):
            return "-"
        return f"{mean:.{self.precision}f} ± {std:.{self.precision}f}"

    @staticmethod
    def _corpus_order(corpora: List[str]) -> List[str]:
        # single-domain conditions first, the merged run last
        return sorted(corpora, key=lambda c: (c == ALL_CORPUS_LABEL, c))

    def _format_matrix(self, aggregates: pd.DataFrame, metric: str) -> str:
        """One row per (model, training corpus), one column per test dataset."""
        test_sets = sorted(aggregates["test_dataset"].unique())
        rows = []
        for model in sorted(aggregates["model"].unique()):
            subset = aggregates[aggregates["model"] == model]
            for corpus in self._corpus_order(list(subset["train_corpus"].unique())):
                cells = subset[subset["train_corpus"] == corpus].set_index("test_dataset")
                row = {"model": model, "train": corpus}
                for test_set in test_sets:
                    if test_set in cells.index:
                        entry = cells.loc[test_set]
                        row[test_set] = self._cell(entry[f"{metric}_mean"], entry[f"{metric}_std"])
                    else:
                        # pair never evaluated
                        row[test_set] = "-"
                rows.append(row)
        table = tabulate(pd.DataFrame(rows), headers="keys", tablefmt="simple_grid", showindex=False)
        return f"{metric.upper()} (mean ± standard deviation)\n{table}"

    def _format_failures(self, report: EvalReport) -> str:
        failed = [r for r in report.rows if r["error"]]
        if not failed:
            return ""
        counts: Dict[str, int] = {}
        for row in failed:
            counts[row["error"]] = counts.get(row["error"], 0) + 1
        return "\nFailed cells: " + ", ".join(f"{code} x{n}" for code, n in sorted(counts.items()))

    @staticmethod
    def format_error(error_dict: Dict[str, Any]) -> str:
        error_title = f"ERROR: {error_dict.get('code', 'UNKNOWN_ERROR')}"
        error_message = error_dict.get("message", "Unknown error")
        suggestions = error_dict.get("suggestions", [])
        suggestion_text = ""
        if suggestions:
            suggestion_text = "\n\nSuggestions:\n" + "\n".join(f"- {s}" for s in suggestions)
        return f"{error_title}\n{'-' * len(error_title)}\n{error_message}{suggestion_text}"

    def _write(self, frame: pd.DataFrame, path: Path) -> Path:
        try:
            frame.to_csv(path, index=False, lineterminator="\n")
        except OSError as e:
            raise IoError(f"Cannot write {path}: {e}", path=path, original_exception=e)
        return path

    def invoke(self, state: Dict[str, Any]) -> Dict[str, Any]:
        """
        Build the report from ``state["report"]`` (and optional ``state["records"]``).

        Sets ``output`` (text), ``aggregates`` and ``histogram`` frames, and, when
        ``output_directory`` is given, ``artifacts`` with the written files.
        On failure ``error`` holds the error dict and ``output`` its rendering.
        """
        try:
            report: Optional[EvalReport] = state.get("report")
            if report is None or len(report) == 0:
                raise EmptyReport()

            aggregates = report.aggregates()
            sections = [self._format_matrix(aggregates, metric) for metric in METRICS]
            output = "\n\n".join(sections) + self._format_failures(report)
            state["aggregates"] = aggregates

            records = state.get("records")
            histogram = mos_histogram(records) if records else None
            state["histogram"] = histogram

            directory = state.get("output_directory")
            if directory is not None:
                directory = Path(directory)
                try:
                    directory.mkdir(parents=True, exist_ok=True)
                    (directory / "matrix.txt").write_text(output + "\n", encoding="utf-8")
                except OSError as e:
                    raise IoError(f"Cannot write report to {directory}: {e}", path=directory, original_exception=e)
                artifacts = {
                    "aggregate": str(self._write(aggregates, directory / "aggregate.csv")),
                    "matrix": str(directory / "matrix.txt"),
                }
                if histogram is not None:
                    artifacts["histogram"] = str(self._write(histogram, directory / "mos_histogram.csv"))
                state["artifacts"] = artifacts

            state["output"] = output
            return state

        except IQAForgeError as e:
            error_dict = e.log()
            state["error"] = error_dict
            state["output"] = self.format_error(error_dict)
            return state
        except Exception as e:
            error_dict = format_error_for_response(e)
            logger.exception(f"Error building report: {e}")
            state["error"] = error_dict
            state["output"] = self.format_error(error_dict)
            return state
