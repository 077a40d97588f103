"""Command-line entry point: ``lrvd {train,eval,diagnose,sweep}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

from . import __version__
from . import adapter as lr
from . import diagnostics as dg
from . import evaluator as ev
from .config import ConfigError, RunConfig, build_task, load_config
from .models import build_model
from .numerics import Rng
from .trainer import CheckpointError, NumericalError, load_checkpoint, save_checkpoint, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def _log(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def parse_list(text: str, kind=float) -> list:
    """``"0,5,10"`` or an inclusive integer range ``"1:8"`` / ``"0:16:4"``."""
    text = (text or "").strip()
    if not text:
        return []
    if ":" in text and "," not in text:
        parts = [int(p) for p in text.split(":")]
        if len(parts) not in (2, 3):
            raise UsageError(f"bad range {text!r}; expected start:stop[:step]")
        step = parts[2] if len(parts) == 3 else 1
        if step < 1:
            raise UsageError(f"bad range {text!r}; step must be >= 1")
        return [kind(v) for v in range(parts[0], parts[1] + 1, step)]
    try:
        return [kind(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def _stamp(cfg: RunConfig | None, command: str, extra: dict | None = None) -> dict:
    out = {"version": __version__, "command": command}
    if cfg is not None:
        out["config"] = cfg.raw
        out["resolved_config"] = cfg.resolved()
    if extra:
        out.update(extra)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: "" if row.get(c) is None else row[c] for c in columns})
    path.write_text(buf.getvalue())


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load(args)
    task = build_task(cfg)
    model = build_model(cfg.model_spec(task))
    out = _out_dir(args)
    t0 = time.perf_counter()

    def progress(row):
        r_eff = ", ".join(f"{k}={v}" for k, v in row["r_eff"].items())
        _log(args, f"step {row['step']:>6}  loss {row['train_loss']:.4f}  r_eff {r_eff}")

    model, record = train(model, task, cfg.train, on_row=progress)
    seconds = time.perf_counter() - t0

    test = ev.mc_predict(model, task.x_test, 0, labels=task.y_test if task.kind == "classification" else None)
    metrics = {"k0": ev.summarize(test, task.y_test, cfg.train.obs_std)}
    k = cfg.train.eval_k
    if k > 0:
        mc = ev.mc_predict(model, task.x_test, k, Rng(cfg.eval["seed"]),
                           labels=task.y_test if task.kind == "classification" else None)
        metrics[f"k{k}"] = ev.summarize(mc, task.y_test, cfg.train.obs_std)

    stamp = _stamp(cfg, "train")
    save_checkpoint(model, out / "checkpoint.json", extra=stamp)
    (out / "run.jsonl").write_text(record.to_jsonl())
    summary = {
        **stamp,
        "r_eff": {f"layer{i}": lr.effective_rank(a, cfg.train.tau) for i, a in model.adapters},
        "active": {f"layer{i}": int(a.active_mask.sum()) for i, a in model.adapters},
        "log_alpha": {f"layer{i}": a.log_alpha.tolist() for i, a in model.adapters},
        "trainable_parameters": model.trainable_parameter_count(),
        "test_metrics": metrics,
        "steps": cfg.train.steps,
        "seconds": seconds,
    }
    _write_json(out / "summary.json", summary)
    _log(args, f"wrote {out}/checkpoint.json, run.jsonl, summary.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    k_list = parse_list(args.k, int) if args.k is not None else [int(k) for k in cfg.eval["k"]]
    if not k_list:
        raise UsageError("empty k list")
    if any(k < 0 for k in k_list):
        raise UsageError(f"k values must be >= 0, got {k_list}")
    model = load_checkpoint(args.checkpoint)
    task = build_task(cfg)
    if task.d_in != model.d_in or task.n_outputs != model.n_outputs or task.kind != model.task_kind:
        raise UsageError(
            f"checkpoint ({model.task_kind}, {model.d_in} -> {model.n_outputs}) does not match "
            f"task ({task.kind}, {task.d_in} -> {task.n_outputs})"
        )
    x, y = (task.x_test, task.y_test) if cfg.eval["split"] == "test" else (task.x_val, task.y_val)
    rows = ev.sample_sweep(model, x, y, k_list, Rng(cfg.eval["seed"]), n_bins=int(cfg.eval["n_bins"]))
    out = _out_dir(args)
    (out / "metrics.csv").write_text(ev.rows_to_csv(rows))
    _write_json(out / "eval_manifest.json", _stamp(cfg, "eval", {"checkpoint": str(args.checkpoint), "k": k_list}))
    for row in rows:
        _log(args, "  ".join(f"{c}={_fmt(row[c])}" for c in ev.METRIC_COLUMNS if row.get(c) is not None))
    return EXIT_OK


ENERGY_COLUMNS = ["adapter", "ordering", "replicate", "step", "energy"]
AUC_COLUMNS = ["adapter", "active", "auc_svd", "auc_learned", "auc_random_mean", "auc_random_std", "improvement", "skipped"]


def cmd_diagnose(args) -> int:
    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    if args.theorem_suite:
        report = dg.theorem_suite(seed=seed)
        _write_json(out / "symmetry_report.json", {**_stamp(None, "diagnose --theorem-suite"), **report})
        _log(args, f"theorem suite: {report['probes']} probes, {len(report['failures'])} failures")
        return EXIT_OK if report["passed"] else EXIT_NUMERIC

    model = load_checkpoint(args.checkpoint)
    adapters = [(f"layer{i}", a) for i, a in model.adapters]
    if not adapters:
        raise UsageError("checkpoint has no adapters")
    rng = Rng(seed)
    curves = []
    for n, (label, a) in enumerate(adapters):
        if not a.active_mask.any():
            continue
        for ordering in ("svd", "learned-alpha"):
            c = dg.energy_curve(a, ordering)
            curves += [{"adapter": label, "ordering": ordering, "replicate": 0, "step": j, "energy": e}
                       for j, e in enumerate(c.fractions)]
        for rep in range(args.n_random):
            c = dg.energy_curve(a, "random-permutation", rng.substream(n, rep))
            curves += [{"adapter": label, "ordering": c.ordering, "replicate": rep, "step": j, "energy": e}
                       for j, e in enumerate(c.fractions)]
    summary = dg.gauge_ordering_experiment(adapters, n_random=args.n_random, rng=rng.substream(1000))
    _write_csv(out / "energy_curves.csv", curves, ENERGY_COLUMNS)
    _write_csv(out / "auc_summary.csv", summary, AUC_COLUMNS)
    _write_json(out / "diagnose_manifest.json",
                _stamp(None, "diagnose", {"checkpoint": str(args.checkpoint), "seed": seed, "n_random": args.n_random}))
    for row in summary:
        _log(args, ", ".join(f"{k}={_fmt(v)}" for k, v in row.items() if v is not None))
    return EXIT_OK


SWEEP_COLUMNS = {
    "beta": ["kind", "value", "seed", "r_eff", "accuracy", "ece", "nll", "mse"],
    "tau": ["kind", "value", "seed", "r_eff"],
    "mc": ["kind", "value", "seed", "k", "accuracy", "ece", "nll", "seconds"],
}


def cmd_sweep(args) -> int:
    cfg = _load(args)
    grid = parse_list(args.grid, float)
    if not grid:
        raise UsageError("empty grid")
    if args.kind == "mc" and any(g < 0 or g != int(g) for g in grid):
        raise UsageError(f"mc grid values must be non-negative integers, got {grid}")
    seeds = parse_list(args.seeds, int) if args.seeds else [cfg.train.seed]
    if not seeds:
        raise UsageError("empty seed list")
    task_params = {k: v for k, v in cfg.task.items() if k != "seed"}
    # model_spec needs concrete task dims; derive them from the first seed
    spec = cfg.model_spec(build_task(cfg))
    rows = dg.sweep(args.kind, grid, cfg.train, task_params, spec, seeds, k_rng_seed=int(cfg.eval["seed"]))

    columns = list(SWEEP_COLUMNS[args.kind])
    columns += sorted({k for r in rows for k in r} - set(columns))
    metric_cols = [c for c in columns if c not in ("kind", "value", "seed", "k")]
    rows = rows + dg.aggregate(rows, metric_cols)
    out = _out_dir(args)
    _write_csv(out / "sweep.csv", rows, columns)
    _write_json(out / "sweep_manifest.json",
                _stamp(cfg, "sweep", {"kind": args.kind, "grid": grid, "seeds": seeds}))
    _log(args, f"wrote {len(rows)} rows to {out}/sweep.csv")
    return EXIT_OK


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lrvd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--out", required=True, metavar="DIR", help="output directory (created if absent)")
        sp.add_argument("--seed", type=int, default=None, metavar="N", help="override task.seed and train.seed")
        sp.add_argument("--quiet", action="store_true", help="suppress progress output")
        if config_required:
            sp.add_argument("--config", required=True, metavar="PATH", help="flat JSON config")

    sp = sub.add_parser("train", help="train a model and write checkpoint, run log and summary")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="posterior-mean and Monte Carlo metrics for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.add_argument("--k", default=None, metavar="LIST", help="sample counts, e.g. 0,5,10 (default: eval.k)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("diagnose", help="symmetry suite or energy-curve analysis")
    common(sp, config_required=False)
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", metavar="PATH")
    group.add_argument("--theorem-suite", action="store_true")
    sp.add_argument("--n-random", type=int, default=20, metavar="N", help="random orderings per adapter")
    sp.set_defaults(fn=cmd_diagnose)

    sp = sub.add_parser("sweep", help="beta, tau or MC-sample sweep over seeds")
    common(sp)
    sp.add_argument("--kind", required=True, choices=("beta", "tau", "mc"))
    sp.add_argument("--grid", required=True, metavar="SPEC", help="comma list or inclusive range a:b[:step]")
    sp.add_argument("--seeds", default=None, metavar="LIST", help="e.g. 0,1,2 or 0:4 (default: train.seed)")
    sp.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError, UsageError, CheckpointError, dg.ZeroUpdateError) as exc:
        print(f"lrvd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"lrvd {args.command}: numerical failure at {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"lrvd {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"lrvd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"lrvd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
