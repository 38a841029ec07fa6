"""The instrumented fine-tuning loop.

Per step, in this order: Mixout masks -> forward/backward -> global-norm clip
-> Adam update at the scheduled rate -> weight-decay step.  Validation runs at
``eval_count`` evenly spaced steps (the last one is the final step, step 0 is
never a candidate); the best validation checkpoint is the one reported, and
the test split is scored once, for that checkpoint only.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .data import Dataset, Example, SyntheticTaskSpec, batch_iter, eval_batches, pretext_corpus
from .metrics import majority_baseline, metric
from .optim import (
    AdamConfig,
    AdamState,
    LlrdConfig,
    NonFiniteGradientError,
    ScheduleConfig,
    adam_step,
    clip_global_norm,
    llrd_param_scales,
    lr_at,
)
from .regularize import mixout_masks, mixout_targets, plain_wd_step, prior_wd_step
from .rng import RngStreams

log = logging.getLogger(__name__)

REGULARIZERS = ("none", "mixout", "prior_wd", "plain_wd")


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = "none"
    value: float = 0.0
    include_head: bool = False

    def __post_init__(self):
        if self.kind not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {REGULARIZERS}")
        if self.kind == "mixout" and not 0.0 <= self.value <= 1.0:
            raise ValueError("mixout p must lie in [0, 1]")
        if self.value < 0:
            raise ValueError("regularizer strength must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    init_seed: int = 0
    order_seed: int = 0
    total_steps: int | None = None
    epochs: int = 3
    batch_size: int = 32
    adam: AdamConfig = field(default_factory=AdamConfig)
    warmup_ratio: float = 0.1
    clip_norm: float = 1.0
    reinit: M.ReinitSpec = field(default_factory=M.ReinitSpec)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    llrd: LlrdConfig | None = None
    eval_count: int = 10
    l2_every: int | None = None
    zero_head: bool = False
    degenerate_margin: float = 0.02

    def __post_init__(self):
        if self.eval_count < 1:
            raise ValueError("eval_count must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps is not None and self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.total_steps is None and self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def steps_for(self, n_train: int) -> int:
        if self.total_steps is not None:
            return self.total_steps
        return self.epochs * math.ceil(n_train / self.batch_size)

    def with_seeds(self, init_seed: int, order_seed: int) -> "RunConfig":
        return replace(self, init_seed=int(init_seed), order_seed=int(order_seed))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything except the two seeds."""
        d = self.to_dict()
        d.pop("init_seed")
        d.pop("order_seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunResult:
    config_hash: str
    init_seed: int
    order_seed: int
    init_param_hash: str
    total_steps: int
    train_loss: list[float]
    lr: list[float]
    l2_steps: list[int]
    l2: list[list[float]]
    eval_steps: list[int]
    val_scores: list[float]
    selected_eval_idx: int
    val_metric: float
    test_metric: float
    baseline: float
    degenerate: bool
    diverged: bool = False
    error: str | None = None

    def loss_window(self, start_frac: float, end_frac: float) -> float:
        """Mean training loss over steps in (start_frac*T, end_frac*T]."""
        lo = int(math.floor(start_frac * self.total_steps))
        hi = max(lo + 1, int(math.ceil(end_frac * self.total_steps)))
        window = self.train_loss[lo:hi]
        return float(np.mean(window)) if window else float("nan")

    @property
    def final_train_loss(self) -> float:
        """Mean loss over the last tenth of training (single batches are noisy)."""
        return self.loss_window(0.9, 1.0)

    def loss_at(self, frac: float, half_width: float = 0.05) -> float:
        return self.loss_window(max(0.0, frac - half_width), min(1.0, frac + half_width))


def eval_milestones(total_steps: int, eval_count: int) -> list[int]:
    steps = sorted({max(1, math.ceil(total_steps * k / eval_count)) for k in range(1, eval_count + 1)})
    return steps


def l2_trace(params_t: Mapping[str, np.ndarray], start: Mapping[str, np.ndarray], num_blocks: int) -> list[float]:
    """Per-block L2 distance between current and starting parameters (blocks 1..N)."""
    out = []
    for b in range(1, num_blocks + 1):
        diff = M.block_concat(params_t, b, num_blocks) - M.block_concat(start, b, num_blocks)
        out.append(float(np.sqrt(diff @ diff)))
    return out


def evaluate(params: Mapping[str, np.ndarray], examples, cfg: M.ModelConfig, kind: str) -> float:
    regression = cfg.is_regression
    preds, golds = [], []
    for batch in eval_batches(examples, regression=regression):
        preds.append(M.predict(params, batch, cfg))
        golds.append(batch.labels)
    return metric(np.concatenate(preds), np.concatenate(golds), kind)


def starting_params(
    cfg: M.ModelConfig,
    run: RunConfig,
    streams: RngStreams,
    snapshot: Mapping[str, np.ndarray] | None,
) -> M.ModelParams:
    """Head first, so Re-init and standard runs with one init seed share it."""
    head = M.init_head(cfg, streams.init, zero=run.zero_head)
    if snapshot is None:
        base = M.init_params(cfg, streams.init, include_head=False)
    else:
        base = M.ModelParams(
            {k: np.array(v) for k, v in snapshot.items() if M.param_component(k) != "head"},
            cfg.num_blocks,
        )
    base = M.apply_reinit(base, run.reinit, streams.init, cfg)
    return M.ModelParams({**dict(base.items()), **head}, cfg.num_blocks)


def _decay_filter(adam: AdamConfig):
    if adam.decay_norm_and_bias:
        return None
    return lambda n: not (M.is_norm(n) or M.is_bias(n))


def fine_tune(
    run: RunConfig,
    dataset: Dataset,
    cfg: M.ModelConfig,
    snapshot: Mapping[str, np.ndarray] | None = None,
    streams: RngStreams | None = None,
) -> RunResult:
    """Fine-tune from ``snapshot`` (or a fresh random init when None)."""
    if cfg.num_classes != dataset.num_classes:
        raise ValueError(f"model has {cfg.num_classes} outputs, task has {dataset.num_classes}")
    if not (dataset.train and dataset.val and dataset.test):
        raise ValueError("dataset needs non-empty train, val and test splits")
    streams = streams or RngStreams(run.init_seed, run.order_seed)
    regression = cfg.is_regression

    params = starting_params(cfg, run, streams, snapshot)
    start = params
    reference = dict(start.items())
    names = list(params)

    total = run.steps_for(len(dataset.train))
    peak = run.llrd.top_lr if run.llrd else run.adam.lr
    schedule = ScheduleConfig(total_steps=total, peak_lr=peak, warmup_ratio=run.warmup_ratio)
    lr_scale = llrd_param_scales(names, cfg.num_blocks, run.llrd.decay) if run.llrd else None
    decay_filter = _decay_filter(run.adam)
    milestones = eval_milestones(total, run.eval_count)
    milestone_set = set(milestones)
    l2_every = run.l2_every or max(1, total // 50)

    reg = run.regularizer
    mix_names = mixout_targets(names, reg.include_head) if reg.kind == "mixout" else []
    prior_names = [n for n in names if M.param_component(n) != "head"]
    plain_names = [n for n in names if decay_filter is None or decay_filter(n)]

    state = AdamState()
    cur = dict(params.items())
    losses: list[float] = []
    lrs: list[float] = []
    l2_steps, l2_vals = [0], [l2_trace(cur, reference, cfg.num_blocks)]
    eval_steps: list[int] = []
    val_scores: list[float] = []
    best_idx, best_val, best_params = -1, -math.inf, None
    diverged = False

    epoch, batches, pos = 0, batch_iter(dataset.train, run.batch_size, 0, streams, regression), 0
    for t in range(1, total + 1):
        if pos == len(batches):
            epoch += 1
            batches, pos = batch_iter(dataset.train, run.batch_size, epoch, streams, regression), 0
        batch = batches[pos]
        pos += 1
        lr = lr_at(t, schedule)

        masks = None
        fwd = cur
        if mix_names:
            masks = mixout_masks(cur, reg.value, streams.noise, mix_names)
            fwd = dict(cur)
            for n in mix_names:
                fwd[n] = np.where(masks[n], reference[n], cur[n])

        with T.Tape() as tape:
            leaves = M.as_tensors(fwd, requires_grad=True)
            out = M.forward(leaves, batch, cfg, streams.noise, training=True)
            loss = M.task_loss(out, batch.labels, cfg)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            diverged = True
            log.warning("run %s/%s diverged at step %d", run.init_seed, run.order_seed, t)
            break
        grads = tape.gradient(loss, leaves)
        if masks is not None:
            for n in mix_names:
                grads[n] = np.where(masks[n], 0.0, grads[n])
        grads = clip_global_norm(grads, run.clip_norm)
        try:
            cur, state = adam_step(cur, grads, state, run.adam, lr, lr_scale, decay_filter)
        except NonFiniteGradientError as exc:
            diverged = True
            log.warning("run %s/%s: %s at step %d", run.init_seed, run.order_seed, exc, t)
            break
        if reg.kind == "prior_wd" and reg.value:
            cur = prior_wd_step(cur, reference, reg.value, prior_names)
        elif reg.kind == "plain_wd" and reg.value:
            cur = plain_wd_step(cur, reg.value, plain_names)

        losses.append(loss_val)
        lrs.append(lr)
        if t % l2_every == 0 or t == total:
            l2_steps.append(t)
            l2_vals.append(l2_trace(cur, reference, cfg.num_blocks))
        if t in milestone_set:
            score = evaluate(cur, dataset.val, cfg, dataset.metric)
            eval_steps.append(t)
            val_scores.append(score)
            if score > best_val:
                best_idx, best_val, best_params = len(val_scores) - 1, score, cur

    if best_params is None:
        # diverged before the first milestone: the last finite parameters are the only candidate
        score = evaluate(cur, dataset.val, cfg, dataset.metric)
        eval_steps.append(len(losses))
        val_scores.append(score)
        best_idx, best_val, best_params = 0, score, cur

    test_score = evaluate(best_params, dataset.test, cfg, dataset.metric)
    golds = np.array([ex.label for ex in dataset.val])
    baseline = majority_baseline(golds, dataset.metric)
    degenerate = diverged or best_val <= baseline + run.degenerate_margin
    return RunResult(
        config_hash=run.digest(),
        init_seed=run.init_seed,
        order_seed=run.order_seed,
        init_param_hash=start.digest(),
        total_steps=total,
        train_loss=losses,
        lr=lrs,
        l2_steps=l2_steps,
        l2=l2_vals,
        eval_steps=eval_steps,
        val_scores=val_scores,
        selected_eval_idx=best_idx,
        val_metric=float(best_val),
        test_metric=float(test_score),
        baseline=float(baseline),
        degenerate=bool(degenerate),
        diverged=diverged,
    )


# ---------------------------------------------------------------------------
# pretraining stand-in


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    corpus_size: int = 8000
    mask_prob: float = 0.15
    warmup_ratio: float = 0.06


def _mask_tokens(batch, rng, mask_prob: float, vocab_size: int):
    ids = batch.ids.copy()
    content = batch.mask & (ids >= M.NUM_SPECIAL)
    pick = content & (rng.random(ids.shape) < mask_prob)
    if not pick.any():
        rows, cols = np.nonzero(content)
        j = int(rng.integers(rows.size))
        pick[rows[j], cols[j]] = True
    targets = ids[pick]
    roll = rng.random(targets.size)
    replaced = ids[pick]
    replaced = np.where(roll < 0.8, M.MASK, replaced)
    rand_tok = rng.integers(M.NUM_SPECIAL, vocab_size, size=targets.size)
    replaced = np.where((roll >= 0.8) & (roll < 0.9), rand_tok, replaced)
    ids[pick] = replaced
    return ids, np.nonzero(pick), targets


def mlm_loss(p: Mapping[str, T.Tensor], batch, cfg: M.ModelConfig, rng, training: bool = True,
             mask_prob: float = 0.15):
    ids, where, targets = _mask_tokens(batch, rng, mask_prob, cfg.vocab_size)
    hidden = M.encode(p, ids, batch.mask, cfg, rng, training)
    picked = T.index(hidden, where)
    decoder = T.transpose(p["embeddings.token"], (1, 0))
    logits = T.add_bias(T.matmul(picked, decoder), p["mlm.bias"])
    return T.softmax_cross_entropy(logits, targets)


def pretrain_tiny(
    cfg: M.ModelConfig,
    task: SyntheticTaskSpec,
    seed: int,
    pcfg: PretrainConfig = PretrainConfig(),
) -> tuple[M.ModelParams, list[float]]:
    """Masked-token pretraining on an unlabeled corpus drawn like ``task``.

    Returns (snapshot without head, loss trace).  The decoder is tied to the
    token embeddings plus a private output bias, dropped from the snapshot.
    """
    if task.vocab_size > cfg.vocab_size:
        raise ValueError(f"task vocab {task.vocab_size} exceeds model vocab {cfg.vocab_size}")
    corpus = pretext_corpus(task, pcfg.corpus_size, seed)
    streams = RngStreams(seed, seed)
    params = dict(M.init_params(cfg, streams.init, include_head=False).items())
    params["mlm.bias"] = np.zeros(cfg.vocab_size)
    examples = [Example(tuple(s), 0) for s in corpus]
    schedule = ScheduleConfig(total_steps=pcfg.steps, peak_lr=pcfg.lr, warmup_ratio=pcfg.warmup_ratio)
    adam = AdamConfig(lr=pcfg.lr)
    state = AdamState()
    losses = []
    epoch, batches, pos = 0, batch_iter(examples, pcfg.batch_size, 0, streams), 0
    for t in range(1, pcfg.steps + 1):
        if pos == len(batches):
            epoch += 1
            batches, pos = batch_iter(examples, pcfg.batch_size, epoch, streams), 0
        batch = batches[pos]
        pos += 1
        with T.Tape() as tape:
            leaves = M.as_tensors(params, requires_grad=True)
            loss = mlm_loss(leaves, batch, cfg, streams.noise, True, pcfg.mask_prob)
        grads = clip_global_norm(tape.gradient(loss, leaves), 1.0)
        params, state = adam_step(params, grads, state, adam, lr_at(t, schedule))
        losses.append(float(loss.data))
        if t % 250 == 0:
            log.info("pretrain step %d loss %.4f", t, np.mean(losses[-250:]))
    params.pop("mlm.bias")
    return M.ModelParams(params, cfg.num_blocks), losses


# ---------------------------------------------------------------------------
# sweeps


def _normalise_seeds(seeds: Iterable) -> list[tuple[int, int]]:
    out = []
    for s in seeds:
        if isinstance(s, (tuple, list)):
            out.append((int(s[0]), int(s[1])))
        else:
            out.append((int(s), int(s)))
    return out


def _run_one(args) -> RunResult:
    run, dataset, cfg, snapshot = args
    try:
        return fine_tune(run, dataset, cfg, snapshot)
    except Exception as exc:  # isolated per run, reported in the result
        log.exception("run %s/%s failed", run.init_seed, run.order_seed)
        return RunResult(
            config_hash=run.digest(),
            init_seed=run.init_seed,
            order_seed=run.order_seed,
            init_param_hash="",
            total_steps=0,
            train_loss=[],
            lr=[],
            l2_steps=[],
            l2=[],
            eval_steps=[],
            val_scores=[],
            selected_eval_idx=-1,
            val_metric=float("nan"),
            test_metric=float("nan"),
            baseline=float("nan"),
            degenerate=True,
            error=f"{type(exc).__name__}: {exc}",
        )


def sweep(
    configs: Sequence[RunConfig],
    seeds: Iterable,
    dataset: Dataset,
    cfg: M.ModelConfig,
    snapshot: Mapping[str, np.ndarray] | None = None,
    workers: int = 1,
) -> list[RunResult]:
    """Every config under every seed pair, config-major; ints mean (s, s)."""
    pairs = _normalise_seeds(seeds)
    if not configs or not pairs:
        raise ValueError("sweep needs at least one config and one seed")
    snap = dict(snapshot.items()) if snapshot is not None else None
    tasks = [(c.with_seeds(i, o), dataset, cfg, snap) for c in configs for i, o in pairs]
    if workers <= 1:
        return [_run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, tasks))
