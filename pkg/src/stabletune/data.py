"""Few-sample tasks: synthetic generation, TSV files, downsampling and batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import METRICS
from .model import CLS, NUM_SPECIAL, PAD, SEP, UNK
from .rng import RngStreams, epoch_generator


@dataclass(frozen=True)
class Example:
    tokens_a: tuple[int, ...]
    label: float | int
    tokens_b: tuple[int, ...] | None = None


@dataclass(frozen=True)
class Dataset:
    """Train/val/test splits of one task.

    ``vocab_size`` counts the reserved ids, so it is a valid model vocab size.
    """

    train: tuple[Example, ...]
    val: tuple[Example, ...]
    test: tuple[Example, ...]
    task_kind: str = "classification"
    metric: str = "acc"
    num_classes: int = 2
    vocab_size: int = 64
    max_seq_len: int = 32
    vocab: Mapping[str, int] | None = field(default=None, compare=False)
    label_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.task_kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if (self.metric == "scc") != (self.task_kind == "regression"):
            raise ValueError("SCC is the regression metric and only that")
        if self.task_kind == "regression" and self.num_classes != 1:
            raise ValueError("regression tasks use num_classes == 1")

    def split(self, name: str) -> tuple[Example, ...]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Knobs of the synthetic few-sample task.

    Each sequence has a latent class that tilts its filler tokens toward a
    class-specific pool ("topic").  ``signal_count`` signal tokens are placed
    among the filler, each belonging to the latent class w.p.
    ``signal_purity``; the label is the plurality class of the signal tokens,
    flipped to another class w.p. ``label_noise``.
    """

    vocab_size: int = 64
    seq_len: int = 15
    min_len: int = 8
    num_classes: int = 2
    train_size: int = 1000
    val_size: int = 500
    test_size: int = 500
    label_noise: float = 0.1
    signal_count: int = 3
    signal_tokens_per_class: int = 4
    signal_purity: float = 0.8
    topic_strength: float = 0.5
    pair: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.train_size, self.val_size, self.test_size) < 1:
            raise ValueError("split sizes must be >= 1")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if self.signal_count < 1 or self.signal_count > self.min_len:
            raise ValueError("signal_count must lie in [1, min_len]")
        if not 1 <= self.min_len <= self.seq_len:
            raise ValueError("need 1 <= min_len <= seq_len")
        classes = max(self.num_classes, 2)
        if self.vocab_size - NUM_SPECIAL <= classes * self.signal_tokens_per_class + classes:
            raise ValueError("vocab too small for the signal and filler pools")

    @property
    def is_regression(self) -> bool:
        return self.num_classes == 1


class _Pools:
    def __init__(self, spec: SyntheticTaskSpec):
        k = max(spec.num_classes, 2)
        start = NUM_SPECIAL
        self.signal = [
            np.arange(start + c * spec.signal_tokens_per_class, start + (c + 1) * spec.signal_tokens_per_class)
            for c in range(k)
        ]
        filler = np.arange(start + k * spec.signal_tokens_per_class, spec.vocab_size)
        self.filler = filler
        self.topics = np.array_split(filler, k)
        self.lookup = {int(t): c for c, toks in enumerate(self.signal) for t in toks}


def signal_class_counts(tokens: Sequence[int], spec: SyntheticTaskSpec) -> np.ndarray:
    pools = _Pools(spec)
    counts = np.zeros(max(spec.num_classes, 2), dtype=int)
    for t in tokens:
        c = pools.lookup.get(int(t))
        if c is not None:
            counts[c] += 1
    return counts


def rule_label(tokens: Sequence[int], spec: SyntheticTaskSpec):
    """Noise-free label: plurality class of the signal tokens (regression:
    fraction of signal tokens from class 0)."""
    counts = signal_class_counts(tokens, spec)
    if spec.is_regression:
        return float(counts[0] / counts.sum())
    return int(np.argmax(counts))


def _sample_example(spec: SyntheticTaskSpec, pools: _Pools, rng) -> tuple[list[int], object]:
    k = max(spec.num_classes, 2)
    while True:
        latent = int(rng.integers(k))
        own = rng.random(spec.signal_count) < spec.signal_purity
        others = rng.integers(k - 1, size=spec.signal_count)
        classes = np.where(own, latent, (latent + 1 + others) % k)
        counts = np.bincount(classes, minlength=k)
        if spec.is_regression or (counts == counts.max()).sum() == 1:
            break
    length = int(rng.integers(spec.min_len, spec.seq_len + 1))
    n_fill = length - spec.signal_count
    topical = rng.random(n_fill) < spec.topic_strength
    topic_pool = pools.topics[latent]
    fill = np.where(
        topical,
        topic_pool[rng.integers(topic_pool.size, size=n_fill)],
        pools.filler[rng.integers(pools.filler.size, size=n_fill)],
    )
    sig = np.array([pools.signal[c][rng.integers(spec.signal_tokens_per_class)] for c in classes])
    tokens = np.concatenate([fill, sig])
    tokens = tokens[rng.permutation(tokens.size)]
    label = rule_label(tokens, spec)
    if spec.is_regression:
        label = float(label + spec.label_noise * rng.normal())
    elif rng.random() < spec.label_noise:
        label = int((label + 1 + rng.integers(k - 1)) % k)
    return [int(t) for t in tokens], label


def _to_example(tokens: list[int], label, pair: bool) -> Example:
    if pair:
        cut = len(tokens) // 2
        return Example(tuple(tokens[:cut]), label, tuple(tokens[cut:]))
    return Example(tuple(tokens), label)


def generate_synthetic(spec: SyntheticTaskSpec) -> Dataset:
    """Deterministic in ``spec`` (including its seed)."""
    rng = np.random.default_rng([spec.seed, 7])
    pools = _Pools(spec)

    def draw(n: int) -> tuple[Example, ...]:
        return tuple(_to_example(*_sample_example(spec, pools, rng), spec.pair) for _ in range(n))

    train, val, test = draw(spec.train_size), draw(spec.val_size), draw(spec.test_size)
    specials = 3 if spec.pair else 2
    return Dataset(
        train=train,
        val=val,
        test=test,
        task_kind="regression" if spec.is_regression else "classification",
        metric="scc" if spec.is_regression else "acc",
        num_classes=spec.num_classes,
        vocab_size=spec.vocab_size,
        max_seq_len=spec.seq_len + specials,
    )


def pretext_corpus(spec: SyntheticTaskSpec, size: int, seed: int) -> list[list[int]]:
    """Unlabelled token sequences from the same generator, for masked-token pretraining."""
    rng = np.random.default_rng([seed, 11])
    pools = _Pools(spec)
    return [_sample_example(spec, pools, rng)[0] for _ in range(size)]


# ---------------------------------------------------------------------------
# TSV files


def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, expected a header row") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} tab-separated fields, got {len(row)}"
                )
            rows.append((lineno, row))
    return header, rows


def _split_paths(path) -> dict[str, Path]:
    if isinstance(path, Mapping):
        return {k: Path(v) for k, v in path.items()}
    root = Path(path)
    out = {}
    for split, names in (("train", ["train.tsv"]), ("val", ["val.tsv", "dev.tsv"]), ("test", ["test.tsv"])):
        for n in names:
            if (root / n).exists():
                out[split] = root / n
                break
        else:
            raise FileNotFoundError(f"{root}: missing {names[0]}")
    return out


def load_tsv(
    path,
    columns: Mapping[str, str] | None = None,
    task_kind: str = "classification",
    metric: str | None = None,
    max_seq_len: int = 32,
) -> Dataset:
    """Read train/val/test TSV files (a directory or a split->path mapping).

    ``columns`` maps ``text_a`` / ``text_b`` (optional) / ``label`` to header
    names.  Text is split on whitespace; the vocabulary comes from the train
    split only and unseen tokens map to the reserved UNK id.
    """
    columns = dict(columns or {"text_a": "text_a", "text_b": "text_b", "label": "label"})
    paths = _split_paths(path)
    raw: dict[str, list[tuple[int, list[str]]]] = {}
    cols: dict[str, dict[str, int]] = {}
    for split, p in paths.items():
        header, rows = _read_rows(p)
        idx = {}
        for role in ("text_a", "label"):
            name = columns.get(role)
            if name not in header:
                raise ValueError(f"{p}: missing column {name!r} (role {role})")
            idx[role] = header.index(name)
        b_name = columns.get("text_b")
        if b_name is not None and b_name in header:
            idx["text_b"] = header.index(b_name)
        raw[split] = rows
        cols[split] = idx

    vocab: dict[str, int] = {}
    words = set()
    for _, row in raw["train"]:
        words.update(row[cols["train"]["text_a"]].split())
        if "text_b" in cols["train"]:
            words.update(row[cols["train"]["text_b"]].split())
    for i, w in enumerate(sorted(words)):
        vocab[w] = NUM_SPECIAL + i

    regression = task_kind == "regression"
    label_names: tuple[str, ...] | None = None
    label_map: dict[str, int] = {}
    if not regression:
        seen = sorted({row[cols["train"]["label"]] for _, row in raw["train"]}, key=_label_sort_key)
        label_names = tuple(seen)
        label_map = {name: i for i, name in enumerate(seen)}

    budget = max_seq_len - 3

    def convert(split: str) -> tuple[Example, ...]:
        out = []
        idx = cols[split]
        for lineno, row in raw[split]:
            a = [vocab.get(w, UNK) for w in row[idx["text_a"]].split()]
            b = [vocab.get(w, UNK) for w in row[idx["text_b"]].split()] if "text_b" in idx else None
            a, b = _truncate(a, b, budget if b is not None else max_seq_len - 2)
            text = row[idx["label"]]
            if regression:
                try:
                    label = float(text)
                except ValueError:
                    raise ValueError(f"{paths[split]}:{lineno}: label {text!r} is not a number") from None
            else:
                if text not in label_map:
                    raise ValueError(f"{paths[split]}:{lineno}: label {text!r} not seen in train")
                label = label_map[text]
            out.append(Example(tuple(a), label, tuple(b) if b is not None else None))
        return tuple(out)

    return Dataset(
        train=convert("train"),
        val=convert("val"),
        test=convert("test"),
        task_kind=task_kind,
        metric=metric or ("scc" if regression else "acc"),
        num_classes=1 if regression else len(label_map),
        vocab_size=NUM_SPECIAL + len(vocab),
        max_seq_len=max_seq_len,
        vocab=vocab,
        label_names=label_names,
    )


def _label_sort_key(s: str):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


def _truncate(a: list[int], b: list[int] | None, budget: int):
    if b is None:
        return a[:budget], None
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a = a[:-1]
        else:
            b = b[:-1]
    return a, b


def export_tsv(dataset: Dataset, directory) -> None:
    """Write train/val/test TSVs that :func:`load_tsv` reads back.

    Token ids are rendered as words ``t<id>``; labels as integers (or reals).
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    pair = any(ex.tokens_b is not None for ex in dataset.train)
    for split in ("train", "val", "test"):
        with open(root / f"{split}.tsv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", quoting=csv.QUOTE_NONE, lineterminator="\n")
            w.writerow(["text_a", "text_b", "label"] if pair else ["text_a", "label"])
            for ex in dataset.split(split):
                a = " ".join(f"t{t}" for t in ex.tokens_a)
                label = repr(float(ex.label)) if dataset.task_kind == "regression" else str(int(ex.label))
                if pair:
                    w.writerow([a, " ".join(f"t{t}" for t in ex.tokens_b or ()), label])
                else:
                    w.writerow([a, label])


# ---------------------------------------------------------------------------
# sampling and batching


def downsample(dataset: Dataset, k: int, seed: int) -> Dataset:
    """Uniformly sample ``k`` training examples without replacement."""
    n = len(dataset.train)
    if k > n:
        raise ValueError(f"cannot downsample {n} training examples to {k}")
    rng = np.random.default_rng([seed, 3])
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return replace(dataset, train=tuple(dataset.train[i] for i in idx))


@dataclass
class Batch:
    ids: np.ndarray  # [B, S] int
    mask: np.ndarray  # [B, S] bool, True on real tokens
    labels: np.ndarray
    indices: np.ndarray  # positions in the source split


def encode_example(ex: Example) -> list[int]:
    ids = [CLS, *ex.tokens_a, SEP]
    if ex.tokens_b is not None:
        ids += [*ex.tokens_b, SEP]
    return ids


def make_batch(examples: Sequence[Example], indices: Sequence[int], regression: bool = False) -> Batch:
    seqs = [encode_example(examples[i]) for i in indices]
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    dtype = np.float64 if regression else np.int64
    labels = np.array([examples[i].label for i in indices], dtype=dtype)
    return Batch(ids, mask, labels, np.asarray(indices))


def batch_iter(
    examples: Sequence[Example],
    batch_size: int,
    epoch: int,
    order: "int | RngStreams",
    regression: bool = False,
) -> list[Batch]:
    """One epoch of shuffled batches; the last short batch is kept.

    The permutation comes from the data-order stream of ``order`` (an order
    seed or a run's :class:`RngStreams`) for this ``epoch``, so it is fixed by
    the pair (order seed, epoch) and never touches the weight-init stream.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = order.epoch_order(epoch) if isinstance(order, RngStreams) else epoch_generator(order, epoch)
    perm = rng.permutation(len(examples))
    return [
        make_batch(examples, perm[i : i + batch_size], regression)
        for i in range(0, len(perm), batch_size)
    ]


def eval_batches(examples: Sequence[Example], batch_size: int = 256, regression: bool = False) -> list[Batch]:
    idx = np.arange(len(examples))
    return [make_batch(examples, idx[i : i + batch_size], regression) for i in range(0, len(idx), batch_size)]
