# iqa_forge/model/regressor.py

import logging
import math
from collections import Counter
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from iqa_forge.model.features import FEATURE_DIM
from iqa_forge.utils.enhanced_errors import (
    DimensionMismatch,
    EmptyCorpus,
    LengthMismatch,
    NoForwardState,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_WIDTHS = (FEATURE_DIM, 64, 16, 1)
DEFAULT_DROPOUT = 0.5
N_LEVELS = 10


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, 0.0)


class MlpRegressor:
    """
    Fully-connected regression head: affine -> ReLU -> dropout per hidden layer,
    then an affine output unit. Weights are stored as (out, in) matrices and
    inputs as (batch, features) rows.
    """

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, dropout: float = DEFAULT_DROPOUT,
                 params: Optional[Dict[str, np.ndarray]] = None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or widths[-1] != 1 or any(w < 1 for w in widths):
            raise ValidationError(f"Layer widths must end in a single output unit, got {widths}",
                                  code="MODEL_INVALID_WIDTHS")
        if not 0.0 <= dropout < 1.0:
            raise ValidationError(f"Dropout rate must lie in [0, 1), got {dropout}", code="MODEL_INVALID_DROPOUT")
        self.widths = widths
        self.dropout = float(dropout)
        self.params = params if params is not None else self._zeros()
        self._check_params()
        self._state: Optional[Dict[str, List[np.ndarray]]] = None

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def param_names(self) -> List[str]:
        return [f"{kind}{i}" for i in range(1, self.n_layers + 1) for kind in ("W", "b")]

    def _zeros(self) -> Dict[str, np.ndarray]:
        params = {}
        for i in range(1, self.n_layers + 1):
            params[f"W{i}"] = np.zeros((self.widths[i], self.widths[i - 1]))
            params[f"b{i}"] = np.zeros(self.widths[i])
        return params

    def _check_params(self):
        for i in range(1, self.n_layers + 1):
            expected = {f"W{i}": (self.widths[i], self.widths[i - 1]), f"b{i}": (self.widths[i],)}
            for name, shape in expected.items():
                if name not in self.params or self.params[name].shape != shape:
                    found = self.params[name].shape if name in self.params else None
                    raise DimensionMismatch(f"Parameter {name} must have shape {shape}, got {found}")
                self.params[name] = np.asarray(self.params[name], dtype=np.float64)

    @classmethod
    def initialize(cls, widths: Sequence[int] = DEFAULT_WIDTHS, dropout: float = DEFAULT_DROPOUT,
                   rng: Optional[np.random.Generator] = None) -> "MlpRegressor":
        """Glorot-uniform weights in +/- sqrt(6 / (fan_in + fan_out)), zero biases."""
        rng = rng if rng is not None else np.random.default_rng(0)
        model = cls(widths, dropout)
        for i in range(1, model.n_layers + 1):
            fan_in, fan_out = model.widths[i - 1], model.widths[i]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            model.params[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        return model

    def copy(self) -> "MlpRegressor":
        return MlpRegressor(self.widths, self.dropout, {k: v.copy() for k, v in self.params.items()})

    def _as_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        batch = x.reshape(1, -1) if x.ndim == 1 else x
        if batch.ndim != 2 or batch.shape[1] != self.widths[0]:
            raise DimensionMismatch(f"Expected {self.widths[0]} input features, got shape {x.shape}",
                                    details={"expected": self.widths[0], "shape": list(x.shape)})
        return batch

    def dropout_masks(self, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
        """Keep each hidden unit with probability 1 - p, scaling survivors by 1 / (1 - p)."""
        keep = 1.0 - self.dropout
        return [(rng.random((batch_size, width)) < keep) / keep for width in self.widths[1:-1]]

    def forward(self, x: np.ndarray, mode: Mode = Mode.EVAL, rng: Optional[np.random.Generator] = None,
                masks: Optional[List[np.ndarray]] = None):
        """
        Predict scores for one feature vector or a batch of rows.

        In train mode the inputs, pre-activations and dropout masks are recorded
        for the next backward call; ``masks`` overrides sampling from ``rng``.
        """
        mode = Mode(mode)
        single = np.asarray(x).ndim == 1
        batch = self._as_batch(x)

        if mode is Mode.TRAIN:
            if masks is None:
                if rng is None:
                    raise ValidationError("Train-mode forward needs an rng or explicit dropout masks",
                                          code="MODEL_MISSING_RNG")
                masks = self.dropout_masks(batch.shape[0], rng)
            masks = [np.broadcast_to(m, (batch.shape[0], w)).astype(np.float64)
                     for m, w in zip(masks, self.widths[1:-1])]

        activations = [batch]
        pre_activations = []
        a = batch
        for i in range(1, self.n_layers + 1):
            z = a @ self.params[f"W{i}"].T + self.params[f"b{i}"]
            pre_activations.append(z)
            if i == self.n_layers:
                a = z
                break
            a = relu(z)
            if mode is Mode.TRAIN:
                a = a * masks[i - 1]
            activations.append(a)

        if mode is Mode.TRAIN:
            self._state = {"activations": activations, "pre_activations": pre_activations, "masks": masks}
        output = a[:, 0]
        return float(output[0]) if single else output

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_1d(self.forward(x, Mode.EVAL))

    def backward(self, upstream: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of the loss w.r.t. every parameter, given dLoss/dPrediction per sample."""
        if self._state is None:
            raise NoForwardState()
        activations = self._state["activations"]
        pre_activations = self._state["pre_activations"]
        masks = self._state["masks"]

        delta = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
        if delta.shape[0] != activations[0].shape[0]:
            raise LengthMismatch(f"Upstream gradient has {delta.shape[0]} rows, forward batch had "
                                 f"{activations[0].shape[0]}")

        grads: Dict[str, np.ndarray] = {}
        for i in range(self.n_layers, 0, -1):
            # weights are (out, in)
            grads[f"W{i}"] = delta.T @ activations[i - 1]
            grads[f"b{i}"] = delta.sum(axis=0)
            if i > 1:
                upstream_a = delta @ self.params[f"W{i}"]
                # masks already include the inverted-dropout scale
                delta = upstream_a * masks[i - 2] * relu_grad(pre_activations[i - 2])
        return {name: grads[name] for name in self.param_names()}


def quality_level(mos: float, n_levels: int = N_LEVELS) -> int:
    """Rounded MOS (half-up), clamped to 1..n_levels."""
    return int(min(max(math.floor(mos + 0.5), 1), n_levels))


def class_weights(levels: Sequence[int], n_levels: int = N_LEVELS) -> Dict[int, float]:
    """w_l = |D| / (N * count_l) for every populated level l."""
    if len(levels) == 0:
        raise EmptyCorpus("Class weights need at least one training sample")
    counts = Counter(int(level) for level in levels)
    total = len(levels)
    return {level: total / (n_levels * count) for level, count in sorted(counts.items())}


def sample_weights(mos_values: Sequence[float], weights: Dict[int, float]) -> np.ndarray:
    return np.array([weights[quality_level(m)] for m in mos_values], dtype=np.float64)


def weighted_mse_loss(preds: Sequence[float], targets: Sequence[float],
                      weights: Sequence[float]) -> Tuple[float, np.ndarray]:
    """Mean of w_i (y_i - yhat_i)^2 and its gradient with respect to the predictions."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if not preds.size == targets.size == weights.size:
        raise LengthMismatch(f"Lengths differ: preds {preds.size}, targets {targets.size}, weights {weights.size}")
    if preds.size == 0:
        raise LengthMismatch("Loss needs at least one sample")
    residual = targets - preds
    n = preds.size
    loss = float(np.sum(weights * residual ** 2) / n)
    grad = -(2.0 / n) * weights * residual
    return loss, grad
