"""Command line entry point: ``stabletune {pretrain,run,sweep,grid,analyze,plot}``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import analysis as A
from . import model as M
from . import svg
from .config import ConfigError, ExperimentConfig, load_experiment, parse_seeds
from .data import Dataset, SyntheticTaskSpec, downsample, generate_synthetic, load_tsv
from .optim import LlrdConfig
from .results import (
    BOOTSTRAP_COLUMNS,
    STATS_COLUMNS,
    SchemaError,
    parse_bool,
    parse_float,
    read_runs,
    read_table,
    read_traces,
    write_runs,
    write_table,
    write_traces,
)
from .trainer import RegularizerConfig, RunConfig, pretrain_tiny, sweep

log = logging.getLogger("stabletune")

SNAPSHOT_NAME = "snapshot.ckpt"


class InputError(Exception):
    """Bad or missing input files (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# resolving an experiment


def _experiment(args) -> ExperimentConfig:
    exp = load_experiment(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "out", None):
        exp = dataclasses.replace(exp, output=args.out)
    if getattr(args, "workers", None):
        if args.workers < 1:
            raise ConfigError("--workers: must be >= 1")
        exp = dataclasses.replace(exp, workers=args.workers)
    if getattr(args, "seeds", None):
        exp = dataclasses.replace(exp, seeds=parse_seeds(args.seeds, "--seeds"))
    return exp


def resolve_dataset(exp: ExperimentConfig) -> tuple[Dataset, SyntheticTaskSpec | None]:
    sec = exp.dataset
    spec = None
    if sec.tsv is not None:
        t = sec.tsv
        ds = load_tsv(t.path, t.columns, t.task_kind, t.metric, t.max_seq_len)
    else:
        spec = sec.synthetic or SyntheticTaskSpec()
        ds = generate_synthetic(spec)
    if sec.downsample is not None:
        try:
            ds = downsample(ds, sec.downsample, sec.downsample_seed)
        except ValueError as exc:
            raise ConfigError(f"dataset.downsample: {exc}") from None
    return ds, spec


def resolve_model(exp: ExperimentConfig, ds: Dataset) -> M.ModelConfig:
    fields = {"vocab_size": ds.vocab_size, "max_seq_len": ds.max_seq_len, "num_classes": ds.num_classes}
    fields.update(exp.model)
    if fields["num_classes"] != ds.num_classes:
        raise ConfigError(f"model.num_classes: {fields['num_classes']} but the task has {ds.num_classes}")
    if fields["vocab_size"] < ds.vocab_size:
        raise ConfigError(f"model.vocab_size: {fields['vocab_size']} is below the task vocabulary {ds.vocab_size}")
    if fields["max_seq_len"] < ds.max_seq_len:
        raise ConfigError(f"model.max_seq_len: {fields['max_seq_len']} is below the task length {ds.max_seq_len}")
    try:
        return M.ModelConfig(**fields)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def _same_arch(a: M.ModelConfig, b: M.ModelConfig) -> bool:
    keep = ("vocab_size", "max_seq_len", "hidden_dim", "num_heads", "num_blocks", "ffn_dim")
    return all(getattr(a, k) == getattr(b, k) for k in keep)


def resolve_snapshot(exp: ExperimentConfig, cfg: M.ModelConfig, spec: SyntheticTaskSpec | None):
    if exp.pretrain.fresh:
        return None
    path = Path(exp.pretrain.snapshot) if exp.pretrain.snapshot else Path(exp.output) / SNAPSHOT_NAME
    if path.exists():
        params, saved = M.load_params(path)
        if saved is not None and not _same_arch(saved, cfg):
            raise ConfigError(f"pretrain.snapshot: {path} was saved for a different model shape")
        return params
    if spec is None:
        raise ConfigError("pretrain.snapshot: TSV datasets need an existing snapshot or pretrain.fresh: true")
    log.info("no snapshot at %s, pretraining one", path)
    params, _ = pretrain_tiny(cfg, spec, exp.pretrain.seed, exp.pretrain.settings)
    M.save_params(path, params, cfg)
    return params


def _write_manifest(out: Path, command: str, args, started: float, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": str(getattr(args, "config", None)),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "elapsed_s": round(time.time() - started, 3),
    }
    manifest.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _execute(exp: ExperimentConfig, configs: list[RunConfig], out: Path) -> list:
    ds, spec = resolve_dataset(exp)
    cfg = resolve_model(exp, ds)
    snapshot = resolve_snapshot(exp, cfg, spec)
    results = sweep(configs, exp.seeds, ds, cfg, snapshot, workers=exp.workers)
    pairs = [c.with_seeds(i, o) for c in configs for i, o in exp.seeds]
    rows = list(zip(range(len(results)), pairs, results))
    write_runs(out / "runs.csv", rows)
    write_traces(out / "traces.csv", [(i, r) for i, _, r in rows], cfg.num_blocks)
    failed = [r for r in results if r.error]
    for r in failed:
        log.error("run %s/%s failed: %s", r.init_seed, r.order_seed, r.error)
    return rows


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args) -> int:
    started = time.time()
    exp = _experiment(args)
    ds, spec = resolve_dataset(exp)
    if spec is None:
        raise ConfigError("dataset: pretraining needs a synthetic dataset spec")
    cfg = resolve_model(exp, ds)
    out = Path(exp.output)
    params, losses = pretrain_tiny(cfg, spec, exp.pretrain.seed, exp.pretrain.settings)
    M.save_params(out / SNAPSHOT_NAME, params, cfg)
    write_table(out / "pretrain.csv", "pretrain", ["step", "loss"], ([i + 1, v] for i, v in enumerate(losses)))
    _write_manifest(out, "pretrain", args, started, {"snapshot_digest": params.digest()})
    print(f"snapshot written to {out / SNAPSHOT_NAME}")
    return 0


def cmd_run(args) -> int:
    started = time.time()
    exp = _experiment(args)
    exp = dataclasses.replace(exp, seeds=exp.seeds[:1])
    out = Path(exp.output)
    rows = _execute(exp, [exp.run], out)
    _, _, res = rows[0]
    _write_manifest(out, "run", args, started)
    print(f"val {res.val_metric:.4f} test {res.test_metric:.4f} degenerate {res.degenerate}")
    return 2 if res.error else 0


def cmd_sweep(args) -> int:
    started = time.time()
    exp = _experiment(args)
    out = Path(exp.output)
    rows = _execute(exp, [exp.run], out)
    _write_manifest(out, "sweep", args, started)
    tests = [r.test_metric for _, _, r in rows if not r.error]
    if tests:
        print(f"{len(rows)} runs, test mean {np.mean(tests):.4f} std {np.std(tests, ddof=1) if len(tests) > 1 else 0.0:.4f}")
    return 2 if any(r.error for _, _, r in rows) else 0


def grid_configs(base: RunConfig, method: str, values: list) -> list[tuple[object, RunConfig]]:
    """One config per grid point, in a canonical (sorted) order."""
    out = []
    for v in values:
        if method == "lr":
            cfg = dataclasses.replace(base, adam=dataclasses.replace(base.adam, lr=float(v)))
            key = float(v)
        elif method == "llrd":
            if not (isinstance(v, (list, tuple)) and len(v) == 2):
                raise ConfigError(f"grid.values: llrd points are [top_lr, decay] pairs, got {v!r}")
            key = (float(v[0]), float(v[1]))
            cfg = dataclasses.replace(base, llrd=LlrdConfig(*key))
        elif method == "steps":
            key = int(v)
            cfg = dataclasses.replace(base, total_steps=key)
        else:
            key = float(v)
            cfg = dataclasses.replace(base, regularizer=RegularizerConfig(method, key))
        out.append((key, cfg))
    keys = [k for k, _ in out]
    if len(set(keys)) != len(keys):
        raise ConfigError("grid.values: duplicate grid points")
    return sorted(out, key=lambda kv: kv[0])


def cmd_grid(args) -> int:
    started = time.time()
    exp = _experiment(args)
    if exp.grid is None:
        raise ConfigError("grid: the grid subcommand needs a grid section")
    values = exp.grid.resolved_values()
    if not values:
        raise ConfigError("grid.values: empty grid")
    points = grid_configs(exp.run, exp.grid.method, values)
    out = Path(exp.output)
    rows = _execute(exp, [c for _, c in points], out)
    per = len(exp.seeds)
    summary = []
    for j, (key, _) in enumerate(points):
        chunk = [r for _, _, r in rows[j * per : (j + 1) * per] if not r.error]
        vals = [r.val_metric for r in chunk]
        tests = [r.test_metric for r in chunk]
        summary.append([json.dumps(key), len(chunk), float(np.mean(vals)) if vals else float("nan"),
                        float(np.mean(tests)) if tests else float("nan")])
    best = select_best([s[2] for s in summary])
    table = [s + [i == best] for i, s in enumerate(summary)]
    write_table(out / "grid.csv", "grid", ["value", "n", "mean_val", "mean_test", "selected"], table)
    _write_manifest(out, "grid", args, started, {"method": exp.grid.method})
    print(f"best {exp.grid.method} = {summary[best][0]} (mean val {summary[best][2]:.4f})")
    return 2 if any(r.error for _, _, r in rows) else 0


def select_best(mean_vals: list[float]) -> int:
    """Index of the highest mean validation score; NaN never wins, ties go to the first."""
    scores = [v if np.isfinite(v) else -np.inf for v in mean_vals]
    return int(np.argmax(scores))


def _group_key(row: dict) -> tuple:
    cols = ("bias_correction", "reinit_L", "reinit_pooler", "regularizer", "lambda_or_p", "llrd_decay",
            "total_steps", "lr")
    return tuple(row.get(c, "") for c in cols)


def _group_label(key: tuple) -> str:
    bc, L, pool, reg, lam, decay, steps, lr = key
    parts = [f"bc={bc}", f"reinit={L}{'+pool' if pool == '1' else ''}"]
    if reg and reg != "none":
        parts.append(f"{reg}={lam}")
    if decay:
        parts.append(f"llrd={decay}")
    parts.append(f"T={steps}")
    if lr:
        parts.append(f"lr={lr}")
    return " ".join(parts)


def _load_runs(out: Path) -> list[dict]:
    path = out / "runs.csv"
    if not path.exists():
        raise InputError(f"no runs found in {out}")
    rows = [r for r in read_runs(path) if not r.get("error")]
    if not rows:
        raise InputError(f"no runs found in {out}")
    return rows


def _groups(rows: list[dict]) -> dict[tuple, list[dict]]:
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in rows:
        groups[_group_key(r)].append(r)
    return dict(sorted(groups.items()))


def _records(rows: list[dict]) -> list[A.RunRecord]:
    return [
        A.RunRecord(int(r["run_id"]), float(r["val_metric"]), float(r["test_metric"]), parse_bool(r["degenerate"]))
        for r in rows
    ]


def cmd_analyze(args) -> int:
    started = time.time()
    out = Path(args.out)
    groups = _groups(_load_runs(out))
    boot_rows, stat_rows = [], []
    for gi, (key, rows) in enumerate(groups.items()):
        label = _group_label(key)
        records = _records(rows)
        n_max = args.n_max or len(records)
        curve = A.bootstrap_curve(records, n_max, args.resamples, np.random.default_rng(args.seed))
        for n, m, s in zip(curve.n_trials, curve.test_mean, curve.test_std):
            boot_rows.append([gi, label, int(n), float(m), float(s), "val->test"])
        for n, m, s in zip(curve.n_trials, curve.val_mean, curve.val_std):
            boot_rows.append([gi, label, int(n), float(m), float(s), "val->val"])
        rate = sum(r.degenerate for r in records) / len(records)
        for fld in ("val", "test"):
            st = A.distribution_stats(getattr(r, fld) for r in records)
            stat_rows.append([gi, label, fld, st["n"], st["mean"], st["std"], st["min"], st["q1"],
                              st["median"], st["q3"], st["max"], rate])
    write_table(out / "bootstrap.csv", "bootstrap", BOOTSTRAP_COLUMNS, boot_rows)
    write_table(out / "stats.csv", "stats", STATS_COLUMNS, stat_rows)
    _write_manifest(out, "analyze", args, started)
    for row in stat_rows:
        if row[2] == "test":
            print(f"{row[1]}: test mean {row[4]:.4f} std {row[5]:.4f} degenerate {row[11]:.2f} (n={row[3]})")
    return 0


def cmd_plot(args) -> int:
    started = time.time()
    out = Path(args.out)
    groups = _groups(_load_runs(out))
    figs = out / "figures"
    labels = {key: _group_label(key) for key in groups}

    svg.box_plot([(labels[k], [float(r["test_metric"]) for r in rows]) for k, rows in groups.items()],
                 "Test metric across seeds", "test metric", figs / "test_box.svg")

    traces_path = out / "traces.csv"
    if traces_path.exists():
        by_run: dict[str, list[dict]] = defaultdict(list)
        for r in read_traces(traces_path):
            by_run[r["run_id"]].append(r)
        loss_series, l2_series = [], []
        for key, rows in groups.items():
            runs = [by_run[r["run_id"]] for r in rows if r["run_id"] in by_run]
            s = _band([[parse_float(t["train_loss"]) for t in tr] for tr in runs],
                      [[int(t["step"]) for t in tr] for tr in runs])
            if s:
                loss_series.append(svg.Series(labels[key], *s))
            l2cols = sorted((c for c in (runs[0][0] if runs else {}) if c.startswith("l2_block_")),
                            key=lambda c: int(c.rsplit("_", 1)[1]))
            if l2cols:
                top = l2cols[-1]
                s = _band([[parse_float(t[top]) for t in tr] for tr in runs],
                          [[int(t["step"]) for t in tr] for tr in runs])
                if s:
                    l2_series.append(svg.Series(labels[key], *s))
        if loss_series:
            svg.line_plot(loss_series, "Training loss (mean and range)", "step", "train loss",
                          figs / "loss_curves.svg")
        if l2_series:
            svg.line_plot(l2_series, "L2 distance of the top block from its start", "step", "L2 distance",
                          figs / "l2_top_block.svg")

    boot_path = out / "bootstrap.csv"
    if boot_path.exists():
        series = []
        for sel in ("val->test", "val->val"):
            curves: dict[str, list] = defaultdict(list)
            for r in read_table(boot_path, "bootstrap", BOOTSTRAP_COLUMNS):
                if r["selection"] == sel:
                    curves[r["label"]].append((int(r["n_trials"]), float(r["mean"]), float(r["std"])))
            for label, pts in curves.items():
                n, m, s = map(np.array, zip(*sorted(pts)))
                series.append(svg.Series(f"{label} [{sel}]", n, m, m - s, m + s))
        if series:
            svg.line_plot(series, "Expected performance of the best of n trials", "random trials n",
                          "expected metric", figs / "bootstrap.svg")

    steps = sorted({int(k[6]) for k in groups if k[6]})
    if len(steps) > 1:
        means = []
        for t in steps:
            vals = [float(r["val_metric"]) for k, rows in groups.items() if k[6] == str(t) for r in rows]
            means.append(float(np.mean(vals)))
        svg.line_plot([svg.Series("mean val", steps, means)], "Validation metric vs. training steps",
                      "total steps", "mean val metric", figs / "steps_sweep.svg", logx=True)
    _write_manifest(out, "plot", args, started)
    print(f"figures written to {figs}")
    return 0


def _band(values: list[list[float | None]], steps: list[list[int]]):
    """Mean/min/max over runs at the steps every run recorded."""
    per_step: dict[int, list[float]] = defaultdict(list)
    for vs, ss in zip(values, steps):
        for v, s in zip(vs, ss):
            if v is not None:
                per_step[s].append(v)
    xs = [s for s in sorted(per_step) if len(per_step[s]) == len(values)]
    if not xs:
        return None
    arr = [np.asarray(per_step[s]) for s in xs]
    return xs, [a.mean() for a in arr], [a.min() for a in arr], [a.max() for a in arr]


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stabletune", description="Few-sample fine-tuning stability lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_config: bool = True):
        if needs_config:
            sp.add_argument("--config", type=str, help="YAML or JSON experiment file")
            sp.add_argument("--workers", type=int, default=None)
            sp.add_argument("--seeds", type=str, default=None, help='comma list, e.g. "0,1,2"')
        sp.add_argument("--out", type=str, default=None if needs_config else "runs")

    for name, fn in (("pretrain", cmd_pretrain), ("run", cmd_run), ("sweep", cmd_sweep), ("grid", cmd_grid)):
        sp = sub.add_parser(name)
        common(sp)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("analyze")
    common(sp, needs_config=False)
    sp.add_argument("--resamples", type=int, default=1000)
    sp.add_argument("--n-max", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("plot")
    common(sp, needs_config=False)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, SchemaError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
