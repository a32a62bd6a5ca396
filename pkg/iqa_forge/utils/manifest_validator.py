# iqa_forge/utils/manifest_validator.py

import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

MANIFEST_COLUMNS = ["id", "subject_id", "path", "source", "family", "level",
                    "mos", "native_min", "native_max"]
RATINGS_COLUMNS = ["image_id", "observer_id", "rating"]
PLAN_COLUMNS = ["repetition", "subject_id", "partition"]
PARTITIONS = ("train", "val", "test")

# Raw observer ratings use the absolute-category scale 1..10.
RATING_MIN = 1
RATING_MAX = 10


def _issue(issue_type: str, message: str, line: Optional[int] = None,
           severity: str = "error", **fields) -> Dict[str, Any]:
    issue = {"type": issue_type, "message": message, "severity": severity}
    if line is not None:
        issue["line"] = line
    issue.update(fields)
    return issue


def _to_float(value: str) -> Optional[float]:
    try:
        result = float(value)
    except (TypeError, ValueError):
        return None
    return result if math.isfinite(result) else None


def _to_int(value: str) -> Optional[int]:
    try:
        return int(str(value).strip())
    except (TypeError, ValueError):
        return None


class ManifestValidator:
    """Validates manifest, ratings and split-plan tables before they become records."""

    def __init__(self, required_columns: Sequence[str] = ("id", "path")):
        self.required_columns = list(required_columns)

    def _missing_columns(self, frame: pd.DataFrame, required: Sequence[str]) -> List[Dict[str, Any]]:
        missing = [c for c in required if c not in frame.columns]
        if missing:
            return [_issue("structure", f"Missing required column(s): {', '.join(missing)}", line=1)]
        return []

    def validate_manifest(self, frame: pd.DataFrame) -> Tuple[bool, List[Dict[str, Any]]]:
        """
        Validate a manifest table read with every column as string.

        Args:
            frame: Manifest rows, empty cells as ""

        Returns:
            Tuple of (is_valid, issues); each issue carries the 1-based file line
        """
        issues = self._missing_columns(frame, self.required_columns)
        if issues:
            return False, issues

        seen: Dict[str, int] = {}
        for index, row in enumerate(frame.to_dict("records")):
            line = index + 2
            image_id = str(row.get("id", "")).strip()
            if not image_id:
                issues.append(_issue("missing_value", "Empty image id", line))
            elif image_id in seen:
                issues.append(_issue("duplicate_id",
                                     f"Image id '{image_id}' already used on line {seen[image_id]}",
                                     line, image_id=image_id))
            else:
                seen[image_id] = line

            if not str(row.get("path", "")).strip():
                issues.append(_issue("missing_value", f"Empty path for image '{image_id}'", line))

            issues.extend(self._validate_spec_cells(row, line))
            issues.extend(self._validate_score_cells(row, line))

        return not any(i["severity"] == "error" for i in issues), issues

    def _validate_spec_cells(self, row: Dict[str, Any], line: int) -> List[Dict[str, Any]]:
        family = str(row.get("family", "")).strip()
        level = str(row.get("level", "")).strip()
        if bool(family) != bool(level):
            return [_issue("distortion", "family and level must both be set or both be empty", line)]
        if level and (_to_int(level) is None or _to_int(level) < 1):
            return [_issue("distortion", f"Level '{level}' is not a positive integer", line)]
        return []

    def _validate_score_cells(self, row: Dict[str, Any], line: int) -> List[Dict[str, Any]]:
        issues = []
        mos_text = str(row.get("mos", "")).strip()
        if mos_text and _to_float(mos_text) is None:
            issues.append(_issue("score", f"MOS '{mos_text}' is not a finite number", line))

        low_text = str(row.get("native_min", "")).strip()
        high_text = str(row.get("native_max", "")).strip()
        if bool(low_text) != bool(high_text):
            issues.append(_issue("score", "native_min and native_max must both be set or both be empty", line))
        elif low_text:
            low, high = _to_float(low_text), _to_float(high_text)
            if low is None or high is None:
                issues.append(_issue("score", f"Native range ({low_text}, {high_text}) is not numeric", line))
            elif low >= high:
                issues.append(_issue("score", f"Native range min {low} must be below max {high}", line))
        return issues

    def validate_ratings(self, frame: pd.DataFrame) -> Tuple[bool, List[Dict[str, Any]]]:
        """Check observer ratings are integers on the 1-10 annotation scale."""
        issues = self._missing_columns(frame, RATINGS_COLUMNS)
        if issues:
            return False, issues

        for index, row in enumerate(frame.to_dict("records")):
            line = index + 2
            if not str(row["image_id"]).strip():
                issues.append(_issue("missing_value", "Empty image_id", line))
            rating = _to_int(row["rating"])
            if rating is None:
                issues.append(_issue("rating", f"Rating '{row['rating']}' is not an integer", line))
            elif not RATING_MIN <= rating <= RATING_MAX:
                issues.append(_issue("rating", f"Rating {rating} outside [{RATING_MIN}, {RATING_MAX}]", line))

        return len(issues) == 0, issues

    def validate_plan(self, frame: pd.DataFrame) -> Tuple[bool, List[Dict[str, Any]]]:
        """Check split plan rows; leakage itself is audited separately."""
        issues = self._missing_columns(frame, PLAN_COLUMNS)
        if issues:
            return False, issues

        for index, row in enumerate(frame.to_dict("records")):
            line = index + 2
            repetition = _to_int(row["repetition"])
            if repetition is None or repetition < 0:
                issues.append(_issue("structure", f"Repetition '{row['repetition']}' is not a non-negative integer", line))
            if not str(row["subject_id"]).strip():
                issues.append(_issue("missing_value", "Empty subject_id", line))
            if str(row["partition"]).strip() not in PARTITIONS:
                issues.append(_issue("structure",
                                     f"Partition '{row['partition']}' is not one of {', '.join(PARTITIONS)}", line))

        return len(issues) == 0, issues


def summarize_issues(issues: List[Dict[str, Any]], limit: int = 5) -> str:
    """One-line summary of the first few issues, with line numbers."""
    parts = []
    for issue in issues[:limit]:
        prefix = f"line {issue['line']}: " if "line" in issue else ""
        parts.append(prefix + issue["message"])
    if len(issues) > limit:
        parts.append(f"... and {len(issues) - limit} more")
    return "; ".join(parts)
