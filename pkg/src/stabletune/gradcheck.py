"""Central finite-difference gradient checking.

The relative error of one coordinate is ``|a - n| / max(|a|, |n|, atol)``:
plain relative error wherever the gradient is meaningfully non-zero, and an
absolute error scaled by ``1/atol`` where both values are essentially zero
(there finite-difference round-off dominates any relative measure).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: dict[str, float] = field(default_factory=dict)
    checked: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(
    f: Callable[[], float],
    x: np.ndarray,
    h: float = 1e-5,
    coords: np.ndarray | None = None,
) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    Only the flat positions in ``coords`` are evaluated; the rest stay NaN.
    """
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    if coords is None:
        coords = np.arange(flat.size)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def check_gradients(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    atol: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` with central finite differences.

    ``fn`` receives a mapping of leaf tensors (one per entry of ``inputs``) and
    must return a scalar tensor.  With ``max_coords`` set, at most that many
    randomly chosen coordinates per input are differenced.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    with Tape() as tape:
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        loss = fn(leaves)
    analytic = tape.gradient(loss, leaves)

    def value() -> float:
        consts = {k: Tensor(v) for k, v in arrays.items()}
        return float(fn(consts).data)

    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(max_rel_err=0.0)
    for name, arr in arrays.items():
        n = arr.size
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        numeric = numerical_gradient(value, arr, h=h, coords=coords).reshape(-1)[coords]
        err = relative_error(analytic[name].reshape(-1)[coords], numeric, atol=atol)
        worst = float(err.max()) if err.size else 0.0
        report.per_input[name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
        report.checked += coords.size
    return report
