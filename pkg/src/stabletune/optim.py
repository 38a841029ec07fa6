"""Adam with a bias-correction switch, plus the schedule/clipping/LLRD helpers.

With ``bias_correction=False`` the update uses the raw moving averages, which
is the BERT release's variant of Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.param = name


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True
    weight_decay: float = 0.0
    decay_norm_and_bias: bool = False

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def copy(self) -> "AdamState":
        return AdamState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.t,
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    config: AdamConfig,
    lr_t: float,
    lr_scale: Mapping[str, float] | None = None,
    decay_filter: Callable[[str], bool] | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update; returns new parameters and a new state.

    ``lr_scale`` multiplies ``lr_t`` per parameter (layer-wise decay).
    Decoupled weight decay subtracts ``lr * weight_decay * theta`` for every
    parameter accepted by ``decay_filter`` (default: all of them).
    """
    if lr_t < 0:
        raise ValueError("lr_t must be >= 0")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    b1, b2 = config.beta1, config.beta2
    t = state.t + 1
    if config.bias_correction:
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
    else:
        c1 = c2 = 1.0
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = theta
            continue
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * (g * g) if v is None else b2 * v + (1.0 - b2) * (g * g)
        new_m[name], new_v[name] = m, v
        lr = lr_t * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        out = theta - lr * update
        if config.weight_decay and (decay_filter is None or decay_filter(name)):
            out = out - lr * config.weight_decay * theta
        new_params[name] = out
    for name in state.m:
        if name not in new_m:
            new_m[name], new_v[name] = state.m[name], state.v[name]
    return new_params, AdamState(new_m, new_v, t)


def bias_ratio(t: int, beta1: float = 0.9, beta2: float = 0.999) -> float:
    """Magnitude ratio of the uncorrected to the corrected Adam update at step t.

    ``(1 - beta1**t) / sqrt(1 - beta2**t)`` is the factor by which debiasing
    rescales the step; its reciprocal is the effective learning-rate multiplier
    the uncorrected variant is missing.
    """
    if t < 1:
        raise ValueError("bias_ratio is defined for t >= 1")
    # expm1 keeps precision when beta**t is close to 1
    num = -math.expm1(t * math.log(beta1)) if beta1 > 0 else 1.0
    den = -math.expm1(t * math.log(beta2)) if beta2 > 0 else 1.0
    return num / math.sqrt(den)


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    peak_lr: float
    warmup_ratio: float = 0.1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in (0, 1)")

    @property
    def warmup_steps(self) -> int:
        return max(1, math.ceil(self.warmup_ratio * self.total_steps))


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    """Linear warm-up from 0 to the peak, then linear decay to 0 at the last step."""
    total, warm, peak = schedule.total_steps, schedule.warmup_steps, schedule.peak_lr
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step <= warm:
        return peak * step / warm
    if total == warm:
        return peak
    return peak * (total - step) / (total - warm)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float = 1.0) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


@dataclass(frozen=True)
class LlrdConfig:
    top_lr: float
    decay: float

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if self.top_lr <= 0:
            raise ValueError("top_lr must be positive")


def llrd_multipliers(num_layers: int, decay: float) -> list[float]:
    """Per-layer multipliers ordered top to bottom: 1, decay, decay**2, ..."""
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    if decay <= 0:
        raise ValueError("decay must be positive")
    return [decay**i for i in range(num_layers)]


def llrd_param_scales(names, num_blocks: int, decay: float) -> dict[str, float]:
    """Map parameter names to multipliers.

    Head and pooler share the top rate with block N; embeddings sit one decay
    step below block 1.
    """
    mults = llrd_multipliers(num_blocks + 1, decay)
    out = {}
    for name in names:
        if name.startswith("blocks."):
            block = int(name.split(".", 2)[1])
            out[name] = mults[num_blocks - block]
        elif name.startswith("embeddings."):
            out[name] = mults[num_blocks]
        else:
            out[name] = 1.0
    return out
