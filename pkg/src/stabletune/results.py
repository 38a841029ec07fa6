"""Versioned CSV tables written and read by the command line tool.

Every file starts with a comment line ``# stabletune <kind> v<N>``; readers
refuse files whose kind or version differ, and name any missing columns.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

from .trainer import RunConfig, RunResult

SCHEMA_VERSION = 1

RUN_COLUMNS = [
    "run_id",
    "init_seed",
    "order_seed",
    "bias_correction",
    "reinit_L",
    "reinit_pooler",
    "regularizer",
    "lambda_or_p",
    "llrd_decay",
    "total_steps",
    "selected_eval_idx",
    "val_metric",
    "test_metric",
    "degenerate",
    # extensions beyond the core schema
    "lr",
    "baseline",
    "diverged",
    "config_hash",
    "error",
]

BOOTSTRAP_COLUMNS = ["group", "label", "n_trials", "mean", "std", "selection"]
STATS_COLUMNS = [
    "group", "label", "field", "n", "mean", "std", "min", "q1", "median", "q3", "max", "degenerate_rate",
]


class SchemaError(ValueError):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def header_line(kind: str) -> str:
    return f"# stabletune {kind} v{SCHEMA_VERSION}"


def write_table(path, kind: str, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(header_line(kind) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"{kind}: row has {len(row)} values for {len(columns)} columns")
            w.writerow([_fmt(v) for v in row])


def read_table(path, kind: str, required: Sequence[str]) -> list[dict[str, str]]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\r\n")
        if first != header_line(kind):
            raise SchemaError(f"{path}: expected header {header_line(kind)!r}, found {first!r}")
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing columns {', '.join(missing)}")
        return list(reader)


def run_row(run_id: int, cfg: RunConfig, res: RunResult) -> list:
    reg = cfg.regularizer
    lr = cfg.llrd.top_lr if cfg.llrd else cfg.adam.lr
    return [
        run_id,
        res.init_seed,
        res.order_seed,
        cfg.adam.bias_correction,
        cfg.reinit.num_blocks,
        cfg.reinit.reinit_pooler,
        reg.kind,
        reg.value if reg.kind != "none" else None,
        cfg.llrd.decay if cfg.llrd else None,
        res.total_steps,
        res.selected_eval_idx,
        res.val_metric,
        res.test_metric,
        res.degenerate,
        lr,
        res.baseline,
        res.diverged,
        res.config_hash,
        res.error,
    ]


def write_runs(path, rows: Iterable[tuple[int, RunConfig, RunResult]]) -> None:
    write_table(path, "runs", RUN_COLUMNS, (run_row(i, c, r) for i, c, r in rows))


def read_runs(path) -> list[dict[str, str]]:
    return read_table(path, "runs", RUN_COLUMNS[:14])


def trace_columns(num_blocks: int) -> list[str]:
    return ["run_id", "step", "train_loss", "lr"] + [f"l2_block_{b}" for b in range(1, num_blocks + 1)]


def trace_rows(run_id: int, res: RunResult) -> list[list]:
    l2 = dict(zip(res.l2_steps, res.l2))
    num_blocks = len(res.l2[0]) if res.l2 else 0
    steps = sorted(set(range(len(res.train_loss) + 1)) | set(l2))
    rows = []
    for s in steps:
        loss = res.train_loss[s - 1] if 1 <= s <= len(res.train_loss) else None
        lr = res.lr[s - 1] if 1 <= s <= len(res.lr) else None
        dists = l2.get(s, [None] * num_blocks)
        rows.append([run_id, s, loss, lr, *dists])
    return rows


def write_traces(path, rows: Iterable[tuple[int, RunResult]], num_blocks: int) -> None:
    def gen():
        for run_id, res in rows:
            yield from trace_rows(run_id, res)

    write_table(path, "traces", trace_columns(num_blocks), gen())


def read_traces(path) -> list[dict[str, str]]:
    return read_table(path, "traces", ["run_id", "step", "train_loss", "lr"])


def parse_float(s: str) -> float | None:
    return float(s) if s not in ("", None) else None


def parse_bool(s: str) -> bool:
    return s == "1"
