"""Statistics over finished runs: distributions, degenerate rates, bootstrap
expected performance and one-tailed significance tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class RunRecord:
    run_id: int
    val: float
    test: float
    degenerate: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.val) and math.isfinite(self.test)):
            raise ValueError(f"run {self.run_id}: metrics must be finite")


@dataclass(frozen=True)
class BootstrapCurve:
    """Expected metric of the validation-selected run among n random trials.

    ``test_*`` follows the test score of the selected run, ``val_*`` its
    validation score.  Index i holds n = i + 1.
    """

    n_trials: np.ndarray
    test_mean: np.ndarray
    test_std: np.ndarray
    val_mean: np.ndarray
    val_std: np.ndarray


def _selection_order(records: Sequence[RunRecord]) -> list[RunRecord]:
    # best validation first, ties toward the lower run id
    return sorted(records, key=lambda r: (-r.val, r.run_id))


def _check(records: Sequence[RunRecord], n_max: int) -> None:
    if not records:
        raise ValueError("need at least one record")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")


def bootstrap_curve(
    records: Sequence[RunRecord],
    n_max: int,
    resamples: int = 1000,
    rng: np.random.Generator | None = None,
) -> BootstrapCurve:
    """Monte Carlo: draw n records with replacement, keep the best on validation."""
    _check(records, n_max)
    rng = rng if rng is not None else np.random.default_rng(0)
    ranked = _selection_order(records)
    # after ranking, the smallest sampled position is the selected record
    val = np.array([r.val for r in ranked])
    test = np.array([r.test for r in ranked])
    k = len(ranked)
    out = {f: np.empty(n_max) for f in ("tm", "ts", "vm", "vs")}
    for n in range(1, n_max + 1):
        pick = rng.integers(k, size=(resamples, n)).min(axis=1)
        t, v = test[pick], val[pick]
        out["tm"][n - 1], out["ts"][n - 1] = t.mean(), t.std()
        out["vm"][n - 1], out["vs"][n - 1] = v.mean(), v.std()
    return BootstrapCurve(np.arange(1, n_max + 1), out["tm"], out["ts"], out["vm"], out["vs"])


def selection_probabilities(num_records: int, n: int) -> np.ndarray:
    """P(the k-th ranked record is selected) when drawing n with replacement.

    The k-th record (0-based) wins when every draw lands at rank >= k and
    at least one lands exactly on k.
    """
    k = np.arange(num_records)
    r = float(num_records)
    return ((r - k) / r) ** n - ((r - k - 1) / r) ** n


def expected_curve(records: Sequence[RunRecord], n_max: int) -> BootstrapCurve:
    """Closed-form limit of :func:`bootstrap_curve` as resamples -> infinity."""
    _check(records, n_max)
    ranked = _selection_order(records)
    val = np.array([r.val for r in ranked])
    test = np.array([r.test for r in ranked])
    tm, ts, vm, vs = (np.empty(n_max) for _ in range(4))
    for n in range(1, n_max + 1):
        p = selection_probabilities(len(ranked), n)
        tm[n - 1] = p @ test
        ts[n - 1] = math.sqrt(max(0.0, p @ test**2 - tm[n - 1] ** 2))
        vm[n - 1] = p @ val
        vs[n - 1] = math.sqrt(max(0.0, p @ val**2 - vm[n - 1] ** 2))
    return BootstrapCurve(np.arange(1, n_max + 1), tm, ts, vm, vs)


def distribution_stats(values: Iterable[float]) -> dict[str, float]:
    x = np.asarray(list(values), dtype=np.float64)
    if x.size == 0:
        raise ValueError("no values")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    return {
        "n": int(x.size),
        "mean": float(x.mean()),
        "std": float(x.std(ddof=1)) if x.size > 1 else 0.0,
        "min": float(x.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(x.max()),
    }


def degenerate_rate(
    records: Sequence[RunRecord], baseline: float, margin: float = 0.02, field: str = "val"
) -> float:
    """Fraction of records whose ``field`` does not beat ``baseline + margin``."""
    if field not in ("val", "test"):
        raise ValueError(f"field must be 'val' or 'test', got {field!r}")
    if not records:
        return 0.0
    cut = baseline + margin
    return sum(getattr(r, field) <= cut for r in records) / len(records)


def one_tailed_t_test(a: Sequence[float], b: Sequence[float], equal_var: bool = False) -> float:
    """p-value for mean(a) > mean(b); Welch by default, pooled Student's with ``equal_var``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if equal_var:
        df = na + nb - 2
        pooled = ((na - 1) * va + (nb - 1) * vb) / df
        se2 = pooled * (1.0 / na + 1.0 / nb)
    else:
        se2 = va / na + vb / nb
        if se2 > 0:
            df = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    if se2 == 0:
        if diff == 0:
            return 0.5
        return 0.0 if diff > 0 else 1.0
    return float(stats.t.sf(diff / math.sqrt(se2), df))
