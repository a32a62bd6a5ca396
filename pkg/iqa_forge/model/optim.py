# iqa_forge/model/optim.py

import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from iqa_forge.utils.enhanced_errors import ShapeMismatch, StepOutOfRange

MAX_LR = 2e-4
WEIGHT_DECAY = 1e-5
WARMUP_FRACTION = 0.3
DIV_FACTOR = 25.0
FINAL_DIV_FACTOR = 1e4


@dataclass
class OptimizerState:
    """AdamW moment accumulators and hyperparameters."""

    weight_decay: float = WEIGHT_DECAY
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(state: OptimizerState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                   lr: float) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """
    One AdamW update, in place on ``params``.

    Weight decay is decoupled: every parameter is first shrunk by lr * weight_decay,
    then moved by the bias-corrected adaptive-moment step.
    """
    if set(params) != set(grads):
        raise ShapeMismatch(f"Parameter names {sorted(params)} do not match gradient names {sorted(grads)}")
    for name, value in params.items():
        if np.shape(grads[name]) != np.shape(value):
            raise ShapeMismatch(f"Gradient for {name} has shape {np.shape(grads[name])}, "
                                f"parameter has {np.shape(value)}",
                                details={"parameter": name})

    beta1, beta2 = state.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step

    for name in params:
        grad = np.asarray(grads[name], dtype=np.float64)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(grad)
            v = np.zeros_like(grad)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v

        # decoupled decay: shrink before the adaptive step, never through the gradient
        value = params[name] * (1.0 - lr * state.weight_decay)
        value = value - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        params[name] = value
    return params, state


def onecycle_lr(step: int, total_steps: int, max_lr: float = MAX_LR,
                warmup_fraction: float = WARMUP_FRACTION, div_factor: float = DIV_FACTOR,
                final_div_factor: float = FINAL_DIV_FACTOR) -> float:
    """
    One-cycle learning rate: cosine warmup from max_lr/25 to max_lr over the
    first 30% of steps, then cosine anneal down to max_lr/1e4 at the last step.
    """
    if total_steps < 1 or not 0 <= step < total_steps:
        raise StepOutOfRange(f"Step {step} outside [0, {total_steps})",
                             details={"step": step, "total_steps": total_steps})
    initial_lr = max_lr / div_factor
    final_lr = max_lr / final_div_factor
    warmup_steps = warmup_fraction * total_steps
    # phase split: steps 0..warmup_steps warm up, the rest anneal; both halves are cosine

    if step <= warmup_steps:
        t = step / warmup_steps if warmup_steps > 0 else 1.0
        # written so t == 1 yields max_lr exactly
        return max_lr - (max_lr - initial_lr) * (1.0 + math.cos(math.pi * t)) / 2.0

    # anneal ends on the last valid step (total_steps - 1), not on total_steps
    anneal_steps = total_steps - 1 - warmup_steps
    if anneal_steps <= 0:
        return final_lr
    u = (step - warmup_steps) / anneal_steps
    return final_lr + (max_lr - final_lr) * (1.0 + math.cos(math.pi * u)) / 2.0
