# tests/test_metrics.py

import itertools
import math

import numpy as np
import pytest

from iqa_forge.metrics import (
    EvalReport,
    aggregate,
    fractional_ranks,
    mse,
    plcc,
    spearman_closed_form,
    srocc,
)
from iqa_forge.utils.enhanced_errors import (
    DegenerateVector,
    EmptyInput,
    IoError,
    LengthMismatch,
    ValidationError,
)


def _pearson_oracle(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    num = sum((a - mx) * (b - my) for a, b in zip(x, y))
    den = math.sqrt(sum((a - mx) ** 2 for a in x)) * math.sqrt(sum((b - my) ** 2 for b in y))
    return num / den


def _rank_oracle(values):
    ranks = []
    for v in values:
        less = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        ranks.append(less + (equal + 1) / 2)
    return ranks


def _random_pair(rng):
    n = int(rng.integers(2, 51))
    if rng.random() < 0.5:
        x = rng.integers(0, 5, size=n).astype(float)
        y = rng.integers(0, 5, size=n).astype(float)
    else:
        x = rng.normal(size=n)
        y = x + rng.normal(size=n)
    return x, y


class TestExamples:
    def test_mse(self):
        assert mse([1, 2, 3], [1, 2, 3]) == 0.0
        assert mse([0, 0], [1, 1]) == 1.0
        assert mse([1, 2, 3], [2, 2, 2]) == pytest.approx(2 / 3)

    def test_plcc(self):
        x = np.array([1.0, 4.0, 2.0, 9.0])
        assert plcc(x, 2 * x + 3) == pytest.approx(1.0)
        assert plcc(x, -x) == pytest.approx(-1.0)
        assert plcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)

    def test_srocc(self):
        assert srocc([1, 2, 3], [10, 20, 30]) == 1.0
        assert srocc([1, 2, 3], [3, 2, 1]) == -1.0
        assert srocc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)

    def test_aggregate(self):
        mean, std = aggregate([0.8] * 5)
        assert mean == pytest.approx(0.8) and std == pytest.approx(0.0, abs=1e-15)
        assert aggregate([0.0, 1.0]) == pytest.approx((0.5, math.sqrt(0.5)))
        assert aggregate([0.9]) == (0.9, 0.0)


class TestErrors:
    def test_length_mismatch(self):
        for metric in (mse, plcc, srocc):
            with pytest.raises(LengthMismatch):
                metric([1, 2, 3], [1, 2])

    def test_constant_vector_is_degenerate(self):
        with pytest.raises(DegenerateVector) as excinfo:
            plcc([1, 2, 3], [5, 5, 5])
        assert excinfo.value.exit_code == 1
        with pytest.raises(DegenerateVector):
            srocc([2, 2, 2], [1, 2, 3])

    def test_too_short(self):
        with pytest.raises(DegenerateVector):
            plcc([1], [2])

    def test_non_finite(self):
        with pytest.raises(ValidationError):
            mse([1, float("nan")], [1, 2])

    def test_empty_aggregate(self):
        with pytest.raises(EmptyInput):
            aggregate([])


class TestOracle:
    def test_matches_brute_force_on_random_vectors(self):
        rng = np.random.default_rng(2024)
        checked = 0
        while checked < 200:
            x, y = _random_pair(rng)
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                continue
            assert plcc(x, y) == pytest.approx(_pearson_oracle(list(x), list(y)), abs=1e-9)
            expected = _pearson_oracle(_rank_oracle(list(x)), _rank_oracle(list(y)))
            assert srocc(x, y) == pytest.approx(expected, abs=1e-9)
            checked += 1

    def test_fractional_ranks(self):
        assert list(fractional_ranks(np.array([3.0, 1.0, 3.0, 2.0]))) == [3.5, 1.0, 3.5, 2.0]

    @pytest.mark.parametrize("n", range(2, 8))
    def test_closed_form_matches_ranks_for_every_permutation(self, n):
        base = np.arange(1, n + 1, dtype=float)
        for perm in itertools.permutations(range(1, n + 1)):
            ranks = np.array(perm, dtype=float)
            assert spearman_closed_form(base, ranks) == pytest.approx(
                _pearson_oracle(list(base), list(ranks)), abs=1e-12)


class TestProperties:
    def test_affine_equivariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=30)
        assert plcc(x, 3.5 * x - 2) == pytest.approx(1.0)
        assert plcc(x, -0.25 * x + 7) == pytest.approx(-1.0)

    def test_srocc_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=40)
        y = x + rng.normal(size=40)
        assert srocc(np.exp(x), y ** 3) == pytest.approx(srocc(x, y), abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        x, y = rng.normal(size=25), rng.normal(size=25)
        assert plcc(x, y) == pytest.approx(plcc(y, x), abs=1e-15)
        assert srocc(x, y) == pytest.approx(srocc(y, x), abs=1e-15)


class TestEvalReport:
    def _report(self):
        report = EvalReport()
        for repetition, (p, s) in enumerate([(0.9, 0.8), (0.7, 0.6), (0.8, 0.7)]):
            report.add_row("mlp", "All", "derm", repetition, p, s)
        report.add_row("mlp", "All", "wild", 0, error="METRIC_DEGENERATE_VECTOR")
        return report

    def test_aggregates(self):
        aggregates = self._report().aggregates()
        derm = aggregates[aggregates["test_dataset"] == "derm"].iloc[0]
        assert derm["plcc_mean"] == pytest.approx(0.8)
        assert derm["plcc_std"] == pytest.approx(0.1)
        assert derm["n"] == 3
        wild = aggregates[aggregates["test_dataset"] == "wild"].iloc[0]
        assert wild["n"] == 0 and wild["n_failed"] == 1

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            EvalReport().add_row("mlp", "All", "derm", 0, 1.5, 0.2)

    def test_csv_roundtrip(self, tmp_path):
        report = self._report()
        report.write_csv(tmp_path / "report.csv")
        loaded = EvalReport.read_csv(tmp_path / "report.csv")
        assert len(loaded) == 4
        assert loaded.rows[0]["plcc"] == pytest.approx(0.9)
        assert loaded.rows[3]["error"] == "METRIC_DEGENERATE_VECTOR"
        assert loaded.rows[3]["plcc"] is None

    def test_header_only_file_is_empty(self, tmp_path):
        EvalReport().write_csv(tmp_path / "report.csv")
        assert len(EvalReport.read_csv(tmp_path / "report.csv")) == 0

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            EvalReport.read_csv(tmp_path / "absent.csv")
