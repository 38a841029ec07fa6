"""Evaluation metrics on the [0, 1] / [-1, 1] scale (not percentages)."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

METRICS = ("acc", "f1", "mcc", "scc")


def _pair(preds, golds) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds)
    g = np.asarray(golds)
    if p.shape != g.shape:
        raise ValueError(f"{p.size} predictions for {g.size} gold labels")
    if p.size == 0:
        raise ValueError("metric of an empty sample is undefined")
    return p, g


def accuracy(preds, golds) -> float:
    p, g = _pair(preds, golds)
    return float(np.mean(p == g))


def f1_binary(preds, golds, positive: int = 1) -> float:
    p, g = _pair(preds, golds)
    tp = int(np.sum((p == positive) & (g == positive)))
    fp = int(np.sum((p == positive) & (g != positive)))
    fn = int(np.sum((p != positive) & (g == positive)))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def matthews(preds, golds) -> float:
    """Matthews correlation (multi-class form); 0 when the denominator vanishes."""
    p, g = _pair(preds, golds)
    classes = np.union1d(p, g)
    lookup = {c: i for i, c in enumerate(classes.tolist())}
    k = len(classes)
    conf = np.zeros((k, k))
    for gi, pi in zip(g.tolist(), p.tolist()):
        conf[lookup[gi], lookup[pi]] += 1
    s = conf.sum()
    c = np.trace(conf)
    t = conf.sum(axis=1)  # true counts
    q = conf.sum(axis=0)  # predicted counts
    num = c * s - float(t @ q)
    den = math.sqrt(s * s - float(q @ q)) * math.sqrt(s * s - float(t @ t))
    if den == 0:
        return 0.0
    return float(np.clip(num / den, -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(preds, golds) -> float:
    """Pearson correlation of average ranks; 0 if either side is constant."""
    p, g = _pair(preds, golds)
    rp = average_ranks(p)
    rg = average_ranks(g)
    rp -= rp.mean()
    rg -= rg.mean()
    den = math.sqrt(float(rp @ rp) * float(rg @ rg))
    if den == 0:
        return 0.0
    return float(np.clip((rp @ rg) / den, -1.0, 1.0))


_FUNCS = {"acc": accuracy, "f1": f1_binary, "mcc": matthews, "scc": spearman}


def metric(preds, golds, kind: str) -> float:
    try:
        fn = _FUNCS[kind]
    except KeyError:
        raise ValueError(f"unknown metric {kind!r}; expected one of {METRICS}") from None
    return fn(preds, golds)


def majority_baseline(golds, kind: str) -> float:
    """Score of a constant predictor: the majority class, or the mean for regression."""
    g = np.asarray(golds)
    if g.size == 0:
        raise ValueError("metric of an empty sample is undefined")
    if kind == "scc":
        return metric(np.full(g.shape, float(np.mean(g))), g, kind)
    counts = Counter(g.tolist())
    top = max(counts.values())
    majority = min(c for c, n in counts.items() if n == top)
    return metric(np.full(g.shape, majority), g, kind)
