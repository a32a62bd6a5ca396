# tests/test_model.py

import json
import math

import numpy as np
import pytest

from iqa_forge.distort import DistortionSpec, apply
from iqa_forge.imagecore import PixelImage, hflip
from iqa_forge.model import (
    FEATURE_DIM,
    FeatureCache,
    FeatureScaler,
    MlpRegressor,
    ModelCheckpoint,
    Mode,
    OptimizerState,
    class_weights,
    extract_features,
    onecycle_lr,
    optimizer_step,
    quality_level,
    sample_weights,
    weighted_mse_loss,
)
from iqa_forge.model.features import FEATURE_NAMES
from iqa_forge.metrics import mse
from iqa_forge.synthetic import texture_image
from iqa_forge.utils.enhanced_errors import (
    CheckpointFormatError,
    DimensionMismatch,
    EmptyCorpus,
    ImageTooSmall,
    LengthMismatch,
    NoForwardState,
    ShapeMismatch,
    StepOutOfRange,
)


def _feature(vector, name):
    return vector[FEATURE_NAMES.index(name)]


class TestFeatures:
    def test_dimension(self, textured_image):
        vector = extract_features(textured_image)
        assert vector.shape == (FEATURE_DIM,) == (34,)
        assert np.all(np.isfinite(vector))
        assert np.all(vector[-8:] == 0.0)

    def test_uniform_gray(self, gray_image):
        vector = extract_features(gray_image)
        for name in ("red_std", "green_std", "blue_std", "rms_contrast", "saturation_mean"):
            assert _feature(vector, name) == pytest.approx(0.0, abs=1e-12), name

    def test_flip_invariance(self, textured_image):
        np.testing.assert_allclose(extract_features(hflip(textured_image)), extract_features(textured_image),
                                   rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("height,width", [(100, 100), (100, 99), (64, 99), (33, 37), (45, 60)])
    def test_flip_invariance_any_size(self, height, width):
        img = texture_image(max(height, width), np.random.default_rng(11))
        img = PixelImage(img.pixels[:height, :width].copy())
        np.testing.assert_allclose(extract_features(hflip(img)), extract_features(img), rtol=1e-9, atol=1e-12)

    def test_blur_lowers_laplacian_variance(self, checker_image):
        blurred = apply(checker_image, DistortionSpec("gaussian_blur", 1, 3.0))
        assert _feature(extract_features(blurred), "laplacian_var") < \
            _feature(extract_features(checker_image), "laplacian_var")

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            extract_features(PixelImage(np.zeros((31, 64, 3), dtype=np.uint8)))

    def test_deterministic(self, textured_image):
        assert np.array_equal(extract_features(textured_image), extract_features(textured_image))


class TestScalerAndCache:
    def test_scaler_standardizes(self, rng):
        features = rng.normal(3.0, 2.0, size=(50, FEATURE_DIM))
        features[:, 5] = 1.0
        scaled = FeatureScaler().fit_transform(features)
        np.testing.assert_allclose(scaled.mean(axis=0), 0.0, atol=1e-12)
        assert np.all(scaled[:, 5] == 0.0)

    def test_scaler_shape_checks(self):
        with pytest.raises(DimensionMismatch):
            FeatureScaler().fit(np.zeros((3, 5)))
        with pytest.raises(DimensionMismatch):
            FeatureScaler.identity().transform(np.zeros(7))
        with pytest.raises(DimensionMismatch):
            FeatureScaler().transform(np.zeros(FEATURE_DIM))

    def test_cache_hits_and_misses(self, tmp_path):
        cache = FeatureCache(tmp_path / "cache")
        assert cache.get("a.png", 64) is None
        cache.put("a.png", 64, np.arange(FEATURE_DIM, dtype=float))
        assert cache.get("a.png", 64) is not None
        assert cache.get("a.png", 32) is None
        assert (cache.hits, cache.misses) == (1, 2)

        reopened = FeatureCache(tmp_path / "cache")
        assert np.array_equal(reopened.get("a.png", 64), np.arange(FEATURE_DIM, dtype=float))

    def test_cache_key_depends_on_size(self):
        assert FeatureCache.key("a.png", 64) != FeatureCache.key("a.png", 224)


class TestForward:
    def test_zero_weights_give_zero(self, rng):
        model = MlpRegressor()
        assert model.forward(rng.normal(size=FEATURE_DIM)) == 0.0
        assert np.all(model.predict(rng.normal(size=(4, FEATURE_DIM))) == 0.0)

    def test_hand_set_weights(self):
        params = {
            "W1": np.array([[1.0], [-1.0]]), "b1": np.array([0.0, 0.5]),
            "W2": np.array([[1.0, 1.0], [0.5, -1.0]]), "b2": np.array([0.0, 1.0]),
            "W3": np.array([[3.0, -1.0]]), "b3": np.array([0.5]),
        }
        model = MlpRegressor((1, 2, 2, 1), 0.5, params)
        # hidden 1: relu([2, -1.5]) = [2, 0]; hidden 2: relu([2, 2]) = [2, 2]; out: 6 - 2 + 0.5
        assert model.forward(np.array([2.0])) == pytest.approx(4.5)

    def test_eval_is_deterministic(self, rng):
        model = MlpRegressor.initialize(rng=np.random.default_rng(1))
        x = rng.normal(size=FEATURE_DIM)
        assert model.forward(x) == model.forward(x)

    def test_train_mode_is_seeded(self, rng):
        model = MlpRegressor.initialize(rng=np.random.default_rng(1))
        x = rng.normal(size=(8, FEATURE_DIM))
        a = model.forward(x, Mode.TRAIN, rng=np.random.default_rng(9))
        b = model.forward(x, Mode.TRAIN, rng=np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            MlpRegressor().forward(np.zeros(FEATURE_DIM + 1))

    def test_glorot_bounds(self):
        model = MlpRegressor.initialize(rng=np.random.default_rng(2))
        limit = math.sqrt(6.0 / (FEATURE_DIM + 64))
        assert np.abs(model.params["W1"]).max() <= limit
        assert np.all(model.params["b1"] == 0.0)


class TestClassWeights:
    def test_uniform_levels(self):
        weights = class_weights([level for level in range(1, 11) for _ in range(3)])
        assert all(w == pytest.approx(1.0) for w in weights.values())

    def test_hand_example(self):
        weights = class_weights([5, 5, 5, 6])
        assert weights[5] == pytest.approx(4 / 30)
        assert weights[6] == pytest.approx(0.4)

    def test_single_level(self):
        assert class_weights([3] * 7) == {3: pytest.approx(0.1)}

    def test_empty(self):
        with pytest.raises(EmptyCorpus):
            class_weights([])

    def test_weight_sum_over_random_corpora(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            levels = list(rng.integers(1, 11, size=int(rng.integers(1, 200))))
            weights = class_weights(levels)
            total = sum(weights[level] for level in levels)
            assert total == pytest.approx(len(levels) * len(weights) / 10)

    def test_quality_level_rounds_half_up_and_clamps(self):
        assert [quality_level(m) for m in (0.2, 1.49, 1.5, 5.5, 9.6, 10.0)] == [1, 1, 2, 6, 10, 10]

    def test_sample_weights(self):
        weights = class_weights([5, 5, 5, 6])
        assert list(sample_weights([5.2, 6.0], weights)) == [weights[5], weights[6]]


class TestLoss:
    def test_unit_weights_reduce_to_mse(self, rng):
        preds, targets = rng.normal(size=40), rng.normal(size=40)
        loss, _ = weighted_mse_loss(preds, targets, np.ones(40))
        assert loss == pytest.approx(mse(targets, preds), abs=1e-12)

    def test_perfect_predictions(self):
        loss, grad = weighted_mse_loss([1.0, 2.0], [1.0, 2.0], [0.5, 3.0])
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_hand_example(self):
        loss, grad = weighted_mse_loss([1.0], [3.0], [2.0])
        assert loss == 8.0
        assert grad.tolist() == [-8.0]

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            weighted_mse_loss([1.0, 2.0], [1.0], [1.0, 1.0])


def _relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)


class TestBackward:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(42)
        h = 1e-4
        checked = 0
        while checked < 100:
            widths = (int(rng.integers(2, 6)), int(rng.integers(2, 7)), int(rng.integers(2, 5)), 1)
            model = MlpRegressor.initialize(widths, 0.5, rng)
            for name in model.param_names():
                if name.startswith("b"):
                    model.params[name] = rng.normal(scale=0.1, size=model.params[name].shape)
            x = rng.normal(size=(3, widths[0]))
            coefficients = rng.normal(size=3)
            masks = model.dropout_masks(3, rng)

            model.forward(x, Mode.TRAIN, masks=masks)
            if any(np.abs(z).min() < 1e-2 for z in model._state["pre_activations"][:-1]):
                continue
            grads = model.backward(coefficients)

            for name in model.param_names():
                values = model.params[name]
                for index in np.ndindex(values.shape):
                    original = values[index]
                    values[index] = original + h
                    plus = float(coefficients @ model.forward(x, Mode.TRAIN, masks=masks))
                    values[index] = original - h
                    minus = float(coefficients @ model.forward(x, Mode.TRAIN, masks=masks))
                    values[index] = original
                    numeric = (plus - minus) / (2 * h)
                    assert _relative_error(grads[name][index], numeric) < 1e-4, (checked, name, index)
            checked += 1

    def test_zero_upstream(self, rng):
        model = MlpRegressor.initialize(rng=np.random.default_rng(3))
        model.forward(rng.normal(size=(5, FEATURE_DIM)), Mode.TRAIN, rng=rng)
        assert all(np.all(g == 0.0) for g in model.backward(np.zeros(5)).values())

    def test_zero_mask_blocks_incoming_weights(self, rng):
        model = MlpRegressor.initialize(rng=np.random.default_rng(3))
        masks = [np.zeros((2, 64)), np.full((2, 16), 2.0)]
        model.forward(rng.normal(size=(2, FEATURE_DIM)), Mode.TRAIN, masks=masks)
        grads = model.backward(np.ones(2))
        assert np.all(grads["W1"] == 0.0)
        assert np.all(grads["b1"] == 0.0)
        assert np.all(grads["W2"] == 0.0)

    def test_requires_forward_state(self):
        with pytest.raises(NoForwardState):
            MlpRegressor().backward(np.ones(1))

    def test_upstream_length(self, rng):
        model = MlpRegressor.initialize(rng=np.random.default_rng(3))
        model.forward(rng.normal(size=(4, FEATURE_DIM)), Mode.TRAIN, rng=rng)
        with pytest.raises(LengthMismatch):
            model.backward(np.ones(3))


class TestOptimizer:
    def test_zero_gradients_without_decay(self):
        params = {"w": np.array([1.0, -2.0])}
        optimizer_step(OptimizerState(weight_decay=0.0), params, {"w": np.zeros(2)}, 0.1)
        assert params["w"].tolist() == [1.0, -2.0]

    def test_first_step_moves_by_lr(self):
        params = {"w": np.array(1.0)}
        _, state = optimizer_step(OptimizerState(weight_decay=0.0), params, {"w": np.array(1.0)}, 0.1)
        assert float(params["w"]) == pytest.approx(0.9)
        assert state.step == 1

    def test_decoupled_decay(self):
        params = {"w": np.array([3.0])}
        state = OptimizerState(weight_decay=1e-5)
        for _ in range(3):
            optimizer_step(state, params, {"w": np.zeros(1)}, 2e-4)
        assert params["w"][0] == pytest.approx(3.0 * (1 - 2e-9) ** 3, rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            optimizer_step(OptimizerState(), {"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.1)
        with pytest.raises(ShapeMismatch):
            optimizer_step(OptimizerState(), {"w": np.zeros(2)}, {"v": np.zeros(2)}, 0.1)


class TestOneCycle:
    def test_anchor_points(self):
        assert onecycle_lr(0, 1000) == pytest.approx(8e-6, rel=1e-12)
        assert onecycle_lr(300, 1000) == 2e-4
        assert onecycle_lr(999, 1000) <= 2e-8 + 1e-15

    def test_single_maximum_and_continuity(self):
        for total in (10, 97, 1000):
            rates = [onecycle_lr(step, total) for step in range(total)]
            peak = max(rates)
            assert peak == pytest.approx(2e-4, rel=1e-3)
            assert rates.count(peak) == 1
            warmup = 0.3 * total
            bound = 2e-4 * math.pi / 2 * max(1 / warmup, 1 / (total - 1 - warmup)) * 1.000001
            assert all(abs(b - a) <= bound for a, b in zip(rates, rates[1:]))

    def test_out_of_range(self):
        for step in (-1, 100):
            with pytest.raises(StepOutOfRange):
                onecycle_lr(step, 100)


class TestCheckpoint:
    def _checkpoint(self):
        model = MlpRegressor.initialize(rng=np.random.default_rng(8))
        scaler = FeatureScaler(np.linspace(0, 1, FEATURE_DIM), np.linspace(1, 2, FEATURE_DIM))
        return ModelCheckpoint(model, scaler, config={"epochs": 2}, metadata={"train_corpus": "All"})

    def test_roundtrip(self, tmp_path, rng):
        checkpoint = self._checkpoint()
        checkpoint.save(tmp_path / "model.iqaf")
        loaded = ModelCheckpoint.load(tmp_path / "model.iqaf")
        features = rng.normal(size=(6, FEATURE_DIM))
        assert np.array_equal(loaded.predict(features), checkpoint.predict(features))
        assert loaded.to_bytes() == checkpoint.to_bytes()
        assert loaded.metadata == {"train_corpus": "All"}
        assert loaded.model.widths == checkpoint.model.widths

    def test_layout_starts_with_magic(self):
        data = self._checkpoint().to_bytes()
        assert data[:4] == b"IQAF"
        assert int.from_bytes(data[4:6], "little") == 1

    def test_bad_magic(self):
        data = self._checkpoint().to_bytes()
        with pytest.raises(CheckpointFormatError):
            ModelCheckpoint.from_bytes(b"NOPE" + data[4:])

    def test_truncated(self):
        data = self._checkpoint().to_bytes()
        with pytest.raises(CheckpointFormatError):
            ModelCheckpoint.from_bytes(data[:-8])
        with pytest.raises(CheckpointFormatError):
            ModelCheckpoint.from_bytes(data[:5])

    @pytest.mark.parametrize("missing", ["widths", "arrays", "feature_version", "dropout"])
    def test_header_missing_field(self, missing):
        data = self._checkpoint().to_bytes()
        header_length = int.from_bytes(data[6:10], "little")
        header = json.loads(data[10:10 + header_length])
        del header[missing]
        rewritten = json.dumps(header).encode("utf-8")
        corrupted = data[:6] + len(rewritten).to_bytes(4, "little") + rewritten + data[10 + header_length:]
        with pytest.raises(CheckpointFormatError) as excinfo:
            ModelCheckpoint.from_bytes(corrupted)
        assert excinfo.value.exit_code == 1
