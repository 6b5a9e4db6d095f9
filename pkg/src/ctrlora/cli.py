"""Command-line entry point: ``ctrlora <command> --config run.yaml``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure (divergence or
NaN), 4 gradient-check tolerance breach.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config, reference_markdown
from .data import SplitError
from .experiment import (
    GRADCHECK_TOLERANCES,
    baseline_config,
    budget_curve,
    build_run,
    curve_means,
    gradcheck,
    write_curve_csv,
)
from .model import ShapeError, merge_adapters, predict
from .scheduler import BudgetPlan
from .trainer import DivergenceError, MetricsRecord, NumericError, evaluate, initial_state, make_plan, make_proxies, train

log = logging.getLogger("ctrlora")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 2, 3, 4

PLAN_FILE = "plan.json"
ALLOCATION_FILE = "allocation.txt"
CHECKPOINT_FILE = "checkpoint.ckpt"
METRICS_JSONL = "metrics.jsonl"
METRICS_CSV = "metrics.csv"
TIMING_CSV = "timing.csv"
SUMMARY_FILE = "summary.txt"
CURVE_CSV = "budget_curve.csv"

METRIC_COLUMNS = ("step", "task_loss", "penalty_value", "total_loss", "lam", "lr",
                  "grad_norm", "eval_loss", "eval_accuracy")


# ------------------------------------------------------------------ helpers


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    tc = cfg.train
    if getattr(args, "log_every", None) is not None:
        tc = dataclasses.replace(tc, log_every=args.log_every)
    if getattr(args, "steps", None) is not None:
        tc = dataclasses.replace(tc, steps=args.steps)
    if getattr(args, "policy", None) is not None:
        tc = dataclasses.replace(tc, policy=args.policy)
    if getattr(args, "baseline", None) == "lora":
        tc = baseline_config(tc)
    cfg = dataclasses.replace(cfg, train=tc)
    if getattr(args, "out_dir", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out_dir))
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def allocation_report(plan: BudgetPlan) -> str:
    util: dict[int, float] = {}
    for s in plan.selection_log:
        util[s.layer_id] = util.get(s.layer_id, 0.0) + s.utility
    lines = [
        f"policy        {plan.policy}",
        f"budget        {plan.spent} / {plan.budget_limit} parameters",
        f"total utility {plan.total_utility():.6e}",
        "",
        f"{'layer':>5} {'rank':>5} {'unit_cost':>10} {'params':>8} {'utility':>13}",
    ]
    for i in sorted(plan.ranks):
        cost = plan.costs.get(i, 0)
        lines.append(f"{i:>5} {plan.ranks[i]:>5} {cost:>10} {plan.ranks[i] * cost:>8} {util.get(i, 0.0):>13.6e}")
    if plan.selection_log:
        lines += ["", "selection order (layer, index, sigma, utility)"]
        lines += [f"  {s.layer_id} {s.index} {s.sigma:.6e} {s.utility:.6e}" for s in plan.selection_log]
    return "\n".join(lines) + "\n"


class MetricsWriter:
    """Streams records to JSONL and CSV; wall-clock times go to a separate file."""

    def __init__(self, out: Path, layer_ids: Sequence[int], append: bool):
        self.layer_cols = [f"metric_norm_{i}" for i in layer_ids]
        mode = "a" if append else "w"
        self.jsonl = open(out / METRICS_JSONL, mode)
        self.csv = open(out / METRICS_CSV, mode, newline="")
        self.timing = open(out / TIMING_CSV, mode, newline="")
        self.w = csv.writer(self.csv, lineterminator="\n")
        self.tw = csv.writer(self.timing, lineterminator="\n")
        if not append:
            self.w.writerow([*METRIC_COLUMNS, *self.layer_cols])
            self.tw.writerow(["step", "wall_ms"])

    def __call__(self, rec: MetricsRecord) -> None:
        det = rec.deterministic()
        self.jsonl.write(json.dumps(det, sort_keys=True) + "\n")
        norms = rec.layer_metric_norms
        self.w.writerow([_fmt(det[c]) for c in METRIC_COLUMNS] + [_fmt(norms[int(c.rsplit("_", 1)[1])]) for c in self.layer_cols])
        self.tw.writerow([rec.step, f"{rec.wall_ms:.3f}"])

    def close(self) -> None:
        for fh in (self.jsonl, self.csv, self.timing):
            fh.close()


def truncate_metrics(out: Path, step: int) -> None:
    """Drop records logged after ``step`` (written before an interruption, not covered by the checkpoint)."""
    for name in (METRICS_JSONL, METRICS_CSV, TIMING_CSV):
        path = out / name
        if not path.exists():
            continue
        lines = path.read_text().splitlines(keepends=True)
        if name == METRICS_JSONL:
            kept = [ln for ln in lines if json.loads(ln)["step"] <= step]
        else:
            kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
        path.write_text("".join(kept))


def _render(out: Path, enabled: bool) -> None:
    if not enabled:
        return
    from .plots import plot_run_dir

    for p in plot_run_dir(out):
        log.info("wrote %s", p)


# ----------------------------------------------------------------- commands


def cmd_allocate(args) -> int:
    cfg = _load(args)
    if cfg.train.budget_fraction == 0:
        log.warning("budget_fraction is 0; every layer gets rank 0")
    network, dataset = build_run(cfg)
    proxies = make_proxies(network, None, dataset, cfg.train, step=0)
    plan = make_plan(network, dataset, cfg.train, proxies)
    out = _out_dir(cfg)
    plan.save(out / PLAN_FILE)
    report = allocation_report(plan)
    (out / ALLOCATION_FILE).write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


def _summary(cfg: RunConfig, plan: BudgetPlan, final_loss: float, final_acc, last: MetricsRecord | None,
             status: str) -> str:
    lines = [
        f"status            {status}",
        f"seed              {cfg.seed}",
        f"steps             {last.step if last else 0} / {cfg.train.steps}",
        f"final_eval_loss   {final_loss!r}",
        f"final_eval_acc    {final_acc!r}" if final_acc is not None else "final_eval_acc    n/a",
        f"final_task_loss   {last.task_loss!r}" if last else "final_task_loss   n/a",
        f"final_penalty     {last.penalty_value!r}" if last else "final_penalty     n/a",
        f"budget            {plan.spent} / {plan.budget_limit}",
        "ranks             " + " ".join(f"{i}:{r}" for i, r in sorted(plan.ranks.items())),
    ]
    return "\n".join(lines) + "\n"


def cmd_train(args) -> int:
    cfg = _load(args)
    if cfg.train.budget_fraction == 0:
        log.warning("budget_fraction is 0; training has no trainable parameters")
    network, dataset = build_run(cfg)
    out = _out_dir(cfg)
    state = None
    plan = BudgetPlan.load(args.plan) if args.plan else None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.config and ckpt.config.get("train") != cfg.to_dict()["train"]:
            raise ConfigError("--resume checkpoint was written with a different train config")
        network = ckpt.network
        state = ckpt.train_state()
        truncate_metrics(out, state.step)
        plan = state.plan
        append = True
    else:
        state = initial_state(network, dataset, cfg.train, plan)
        plan = state.plan
        append = False
    if not append:
        plan.save(out / PLAN_FILE)
        (out / ALLOCATION_FILE).write_text(allocation_report(plan))
    writer = MetricsWriter(out, sorted(plan.ranks), append=append)
    records: list[MetricsRecord] = []

    def on_record(rec):
        records.append(rec)
        writer(rec)

    def checkpoint(st):
        save_checkpoint(out / CHECKPOINT_FILE, Checkpoint(
            network, st.adapters, st.plan, st.proxies, st.optimizer, st.step, st.initial_loss,
            {"generator": "philox", "seed": cfg.seed}, cfg.to_dict(),
        ))

    t0 = time.perf_counter()
    status, code = "completed", EXIT_OK
    try:
        res = train(network, dataset, cfg.train, plan=plan, state=state, stop_after=args.stop_after,
                    on_record=on_record, on_checkpoint=checkpoint)
        final_state, final_loss, final_acc = res.state, res.final_eval_loss, res.final_eval_accuracy
        if final_state.step < cfg.train.steps:
            status = "interrupted"
    except DivergenceError as exc:
        log.error("divergence: %s; keeping last good checkpoint (step %d)", exc, exc.state.step)
        final_state = exc.state
        final_loss, final_acc = evaluate(network, final_state.adapters, dataset.eval_set())
        status, code = "diverged", EXIT_NUMERIC
    finally:
        writer.close()
    checkpoint(final_state)
    summary = _summary(cfg, final_state.plan, final_loss, final_acc, records[-1] if records else None, status)
    (out / SUMMARY_FILE).write_text(summary)
    sys.stdout.write(summary)
    sys.stdout.write(f"wall_time_s       {time.perf_counter() - t0:.3f}\n")
    _render(out, not args.no_plot)
    return code


def _checkpoint_path(args, cfg: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / CHECKPOINT_FILE


def cmd_eval(args) -> int:
    cfg = _load(args)
    ckpt = load_checkpoint(_checkpoint_path(args, cfg))
    _, dataset = build_run(cfg)
    loss, acc = evaluate(ckpt.network, ckpt.adapters, dataset.eval_set())
    report = {"eval_loss": loss, "eval_accuracy": acc, "step": ckpt.step}
    out = _out_dir(cfg)
    (out / "eval.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    sys.stdout.write(json.dumps(report, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_merge(args) -> int:
    cfg = _load(args)
    src = _checkpoint_path(args, cfg)
    ckpt = load_checkpoint(src)
    merged = merge_adapters(ckpt.network, ckpt.adapters)
    _, dataset = build_run(cfg)
    x = dataset.eval_set().inputs
    gap = float(np.max(np.abs(predict(merged, None, x) - predict(ckpt.network, ckpt.adapters, x)), initial=0.0))
    dest = Path(args.output) if args.output else Path(cfg.out_dir) / "merged.ckpt"
    save_checkpoint(dest, Checkpoint(merged, config=ckpt.config))
    sys.stdout.write(f"merged {len(ckpt.adapters)} adapters into {dest}\nmax_output_gap {gap!r}\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    checks = [c.strip() for c in args.checks.split(",") if c.strip()]
    results = gradcheck(cfg, checks, corrupt=args.corrupt)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.check] = max(worst.get(r.check, 0.0), r.max_rel_error)
    for check in checks:
        tol = GRADCHECK_TOLERANCES[check]
        verdict = "ok" if worst.get(check, 0.0) <= tol else "FAIL"
        sys.stdout.write(f"{check:<11} max_rel_error {worst.get(check, 0.0):.3e}  tol {tol:.0e}  {verdict}\n")
    failed = [r for r in results if not r.passed]
    for r in failed:
        sys.stdout.write(f"  breach: {r.check} {r.tensor} rel_error {r.max_rel_error:.3e} > {r.tolerance:.0e}\n")
    return EXIT_TOLERANCE if failed else EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {text!r}") from exc
    if not vals:
        raise ConfigError("list must not be empty")
    return vals


def cmd_budget_curve(args) -> int:
    cfg = _load(args)
    budgets = _floats(args.budgets)
    seeds = [int(s) for s in _floats(args.seeds)]
    for b in budgets:
        if not 0.0 <= b <= 1.0:
            raise ConfigError(f"budget fraction {b} outside [0, 1]")
    cells = budget_curve(cfg, budgets, seeds, jobs=args.jobs)
    out = _out_dir(cfg)
    write_curve_csv(out / CURVE_CSV, cells)
    for (b, m), v in curve_means(cells).items():
        sys.stdout.write(f"budget {b!r:<8} {m:<8} mean_final_loss {v!r}\n")
    failed = [c for c in cells if c.status != "ok"]
    for c in failed:
        log.warning("cell budget=%s method=%s seed=%d: %s", c.budget_fraction, c.method, c.seed, c.status)
    _render(out, not args.no_plot)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_plot(args) -> int:
    from .plots import plot_run_dir

    made = plot_run_dir(args.out_dir)
    if not made:
        raise ConfigError(f"no metrics.csv or {CURVE_CSV} in {args.out_dir}")
    for p in made:
        sys.stdout.write(f"wrote {p}\n")
    return EXIT_OK


def cmd_config_reference(args) -> int:
    text = reference_markdown()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_show_config(args) -> int:
    sys.stdout.write(dump_config(_load(args)))
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ctrlora",
        description="Curvature-aware rank allocation and trust-region training for low-rank adapters.",
        epilog="Every configurable key and its default is listed by `ctrlora config-reference`.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, help="YAML run config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out-dir", help="override the config out_dir")
        sp.add_argument("--log-every", type=int, help="override train.log_every")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes (budget curve only)")
        return sp

    sp = common(sub.add_parser("allocate", help="estimate curvature and write a rank plan"))
    sp.add_argument("--policy", choices=("raw-utility", "utility-per-cost"))
    sp.set_defaults(func=cmd_allocate)

    sp = common(sub.add_parser("train", help="train adapters and write checkpoint and metrics"))
    sp.add_argument("--plan", help="use this plan file instead of allocating")
    sp.add_argument("--policy", choices=("raw-utility", "utility-per-cost"))
    sp.add_argument("--baseline", choices=("lora",), help="lora: uniform ranks, no penalty")
    sp.add_argument("--steps", type=int, help="override train.steps")
    sp.add_argument("--resume", help="continue from this checkpoint")
    sp.add_argument("--stop-after", type=int, help="stop once this many steps are done (resumable)")
    sp.add_argument("--no-plot", action="store_true", help="skip rendering metrics.png")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate a checkpoint on the eval split"))
    sp.add_argument("--checkpoint", help="defaults to <out_dir>/checkpoint.ckpt")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("merge", help="fold adapters into the base weights"))
    sp.add_argument("--checkpoint", help="defaults to <out_dir>/checkpoint.ckpt")
    sp.add_argument("--output", help="defaults to <out_dir>/merged.ckpt")
    sp.set_defaults(func=cmd_merge)

    sp = common(sub.add_parser("gradcheck", help="finite-difference checks on a small config"))
    sp.add_argument("--checks", default="adapter,penalty,hutchinson",
                    help="comma list from: adapter, penalty, hutchinson")
    sp.add_argument("--corrupt", type=int, help="test hook: perturb the analytic gradient of this layer")
    sp.set_defaults(func=cmd_gradcheck)

    sp = common(sub.add_parser("diag-budget-curve", help="CTR vs uniform final loss over budgets and seeds"))
    sp.add_argument("--budgets", default="0.001,0.003", help="comma list of budget fractions")
    sp.add_argument("--seeds", default="0,1,2", help="comma list of seeds")
    sp.add_argument("--no-plot", action="store_true", help="skip rendering budget_curve.png")
    sp.set_defaults(func=cmd_budget_curve)

    sp = sub.add_parser("plot", help="render PNGs from the CSV files in a run directory")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("config-reference", help="print every config key with its default")
    sp.add_argument("--output", help="write to this file instead of stdout")
    sp.set_defaults(func=cmd_config_reference)

    sp = common(sub.add_parser("show-config", help="print the fully resolved config"))
    sp.set_defaults(func=cmd_show_config)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    logging.captureWarnings(True)
    warnings.simplefilter("default")
    if getattr(args, "jobs", 1) < 1:
        sys.stderr.write("error: --jobs must be >= 1\n")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, SplitError, ShapeError, CheckpointError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except (NumericError, ArithmeticError) as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
