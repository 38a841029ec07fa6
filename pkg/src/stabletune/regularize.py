"""Regularisers that pull fine-tuned weights toward the pretrained snapshot."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import is_norm, param_component


@dataclass(frozen=True)
class MixoutConfig:
    p: float
    include_head: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("mixout p must lie in [0, 1]")


@dataclass(frozen=True)
class PriorWdConfig:
    strength: float

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError("weight-decay strength must be >= 0")


def _check_shapes(params: Mapping[str, np.ndarray], snapshot: Mapping[str, np.ndarray], names) -> None:
    for name in names:
        if name not in snapshot:
            raise ValueError(f"snapshot has no parameter {name!r}")
        if np.shape(params[name]) != np.shape(snapshot[name]):
            raise ValueError(
                f"shape mismatch for {name!r}: {np.shape(params[name])} vs {np.shape(snapshot[name])}"
            )


def mixout_targets(names, include_head: bool = False) -> list[str]:
    """Parameters Mixout may replace: everything but layer norms (and the head)."""
    return [
        n for n in names if not is_norm(n) and (include_head or param_component(n) != "head")
    ]


def mixout_masks(
    params: Mapping[str, np.ndarray], p: float, rng, names=None
) -> dict[str, np.ndarray]:
    """Boolean replacement masks, True where the snapshot value is used."""
    names = list(params) if names is None else list(names)
    return {n: rng.random(np.shape(params[n])) < p for n in names}


def mixout_apply(
    params: Mapping[str, np.ndarray],
    snapshot: Mapping[str, np.ndarray],
    p: float,
    rng,
    names=None,
    masks: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Replace each scalar by its snapshot value independently with probability p.

    Plain replacement, no ``1/(1-p)`` rescaling.  Parameters outside ``names``
    (default: all) pass through.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("mixout p must lie in [0, 1]")
    names = list(params) if names is None else list(names)
    _check_shapes(params, snapshot, names)
    if masks is None:
        masks = mixout_masks(params, p, rng, names)
    out = dict(params)
    for n in names:
        out[n] = np.where(masks[n], snapshot[n], params[n])
    return out


def prior_wd_step(
    params: Mapping[str, np.ndarray],
    snapshot: Mapping[str, np.ndarray],
    strength: float,
    names=None,
) -> dict[str, np.ndarray]:
    """``w <- w - strength * (w - w_pretrained)`` for the named parameters."""
    if strength < 0:
        raise ValueError("weight-decay strength must be >= 0")
    names = list(params) if names is None else list(names)
    _check_shapes(params, snapshot, names)
    out = dict(params)
    for n in names:
        w = params[n]
        out[n] = w - strength * (w - snapshot[n])
    return out


def plain_wd_step(
    params: Mapping[str, np.ndarray], strength: float, names=None
) -> dict[str, np.ndarray]:
    """``w <- w - strength * w``: :func:`prior_wd_step` toward zero."""
    if strength < 0:
        raise ValueError("weight-decay strength must be >= 0")
    names = list(params) if names is None else list(names)
    out = dict(params)
    for n in names:
        w = params[n]
        out[n] = w - strength * (w - np.zeros_like(w))
    return out
