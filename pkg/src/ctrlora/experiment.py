"""Pipeline glue shared by the CLI and the acceptance tests."""
from __future__ import annotations

import csv
import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError, RunConfig
from .curvature import estimate_hutchinson_diag, estimate_proxies
from .data import Dataset, PlantedSpec, gen_planted_task, split
from .linalg import make_rng
from .model import AdapterPair, BaseNetwork, build_network, loss_and_adapter_grads
from .trainer import DivergenceError, NumericError, TrainConfig, penalty_value_and_grad, train

GRADCHECK_TOLERANCES = {"adapter": 1e-5, "penalty": 1e-6, "hutchinson": 5e-2}
GRADCHECK_MAX_DIM = 64
CURVE_FIELDS = ("budget_fraction", "method", "final_loss", "seed", "status")


def build_run(cfg: RunConfig) -> tuple[BaseNetwork, Dataset]:
    """Base network and split planted dataset, both pure functions of ``cfg``."""
    network = build_network(cfg.arch, cfg.seed)
    t = cfg.task
    spec = PlantedSpec(t.ranks, t.scales, t.decay, t.noise, t.n_samples, t.input_scale, cfg.seed)
    dataset = split(gen_planted_task(network, spec), cfg.train.calibration_size, t.eval_fraction, cfg.seed)
    return network, dataset


def baseline_config(train_cfg: TrainConfig) -> TrainConfig:
    """Plain LoRA: uniform ranks and no trust-region penalty."""
    return dataclasses.replace(train_cfg, rank_mode="uniform", lambda_start=0.0, lambda_end=0.0)


# ---------------------------------------------------------------- gradcheck


@dataclass(frozen=True)
class CheckResult:
    check: str
    tensor: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; zero when both tensors vanish."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def _central_diff(f, x: np.ndarray, eps: float) -> np.ndarray:
    out = np.zeros_like(x)
    flat, g = x.reshape(-1), out.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        fp = f()
        flat[k] = old - eps
        fm = f()
        flat[k] = old
        g[k] = (fp - fm) / (2.0 * eps)
    return out


def _random_adapters(network: BaseNetwork, rank: int, seed: int) -> dict[int, AdapterPair]:
    ads = {}
    for i in network.eligible_ids():
        d_out, d_in = network.shape(i)
        r = min(rank, d_out, d_in)
        rng = make_rng([seed, 0x6C, i])
        ads[i] = AdapterPair(i, rng.standard_normal((d_out, r)) / math.sqrt(d_out),
                             rng.standard_normal((d_in, r)) / math.sqrt(d_in))
    return ads


def coupled_quadratic_hessian(diag: Sequence[float], coupling: float = 0.05, seed: int = 0) -> np.ndarray:
    """SPD matrix with the given diagonal and weak random off-diagonal coupling.

    With a purely diagonal Hessian every Rademacher probe returns the exact
    diagonal, so estimator variance only shows up once off-diagonal terms exist.
    """
    d = np.sqrt(np.asarray(diag, dtype=np.float64))
    n = d.size
    rng = make_rng([seed, 0xC0DE])
    c = rng.uniform(-coupling, coupling, (n, n))
    c = np.triu(c, 1)
    c = c + c.T + np.eye(n)
    return d[:, None] * c * d[None, :]


def gradcheck(
    cfg: RunConfig,
    checks: Iterable[str] = ("adapter", "penalty", "hutchinson"),
    corrupt: int | None = None,
    n_examples: int = 8,
    eps: float = 1e-6,
) -> list[CheckResult]:
    """Finite-difference checks of adapter gradients, penalty gradients and the Hutchinson diagonal.

    ``corrupt`` perturbs the analytic adapter/penalty gradient of that layer id,
    which must then show up as a failing tensor.
    """
    checks = list(checks)
    bad = sorted(set(checks) - set(GRADCHECK_TOLERANCES))
    if bad:
        raise ConfigError(f"unknown check(s): {', '.join(bad)}")
    network, dataset = build_run(cfg)
    for i in network.eligible_ids():
        if max(network.shape(i)) > GRADCHECK_MAX_DIM:
            raise ConfigError(f"gradcheck needs layer dims <= {GRADCHECK_MAX_DIM}; layer {i} is {network.shape(i)}")
    if corrupt is not None and corrupt not in network.eligible_ids():
        raise ConfigError(f"cannot corrupt layer {corrupt}: not adapter-eligible")
    batch = dataset.batch(dataset.train_idx[:n_examples])
    adapters = _random_adapters(network, 2, cfg.seed)
    results: list[CheckResult] = []

    def corrupted(i, g):
        return g + 1e-3 * (np.max(np.abs(g)) + 1.0) if corrupt == i else g

    if "adapter" in checks:
        _, grads = loss_and_adapter_grads(network, adapters, batch)
        for i, ad in sorted(adapters.items()):
            for name, arr, ana in (("A", ad.a_factor, grads[i][0]), ("B", ad.b_factor, grads[i][1])):
                num = _central_diff(lambda: loss_and_adapter_grads(network, adapters, batch)[0], arr, eps)
                results.append(CheckResult("adapter", f"layer {i} {name}",
                                           relative_error(corrupted(i, ana), num), GRADCHECK_TOLERANCES["adapter"]))
    if "penalty" in checks:
        proxies = estimate_proxies(
            cfg.train.proxy_kind, network, None, dataset.calibration_batches(),
            damping=cfg.train.damping, fisher=cfg.train.fisher,
            probes=cfg.train.hutchinson_probes, fd_step=cfg.train.fd_step, seed=cfg.seed,
        )
        _, pgrads = penalty_value_and_grad(adapters, proxies)
        for i, ad in sorted(adapters.items()):
            for name, arr, ana in (("A", ad.a_factor, pgrads[i][0]), ("B", ad.b_factor, pgrads[i][1])):
                num = _central_diff(lambda: penalty_value_and_grad(adapters, proxies)[0], arr, eps)
                results.append(CheckResult("penalty", f"layer {i} {name}",
                                           relative_error(corrupted(i, ana), num), GRADCHECK_TOLERANCES["penalty"]))
    if "hutchinson" in checks:
        h = coupled_quadratic_hessian(np.arange(1, 17), seed=cfg.seed)
        est = estimate_hutchinson_diag(lambda th: h @ th, np.zeros(16), probes=1000, seed=[cfg.seed, 0x4C7])
        exact = np.diag(h)
        err = float(np.max(np.abs(est - exact) / exact))
        results.append(CheckResult("hutchinson", "quadratic diag(1..16)", err, GRADCHECK_TOLERANCES["hutchinson"]))
    return results


# ------------------------------------------------------------- budget curve


@dataclass(frozen=True)
class CurveCell:
    budget_fraction: float
    method: str  # ctr | uniform
    seed: int
    final_loss: float = float("nan")
    status: str = "ok"

    def row(self) -> dict:
        loss = "" if not math.isfinite(self.final_loss) else repr(float(self.final_loss))
        return {"budget_fraction": repr(float(self.budget_fraction)), "method": self.method,
                "final_loss": loss, "seed": self.seed, "status": self.status}


def curve_config(cfg: RunConfig, budget: float, method: str, seed: int) -> RunConfig:
    run = cfg.with_seed(seed)
    tc = dataclasses.replace(run.train, budget_fraction=float(budget))
    if method == "uniform":
        tc = baseline_config(tc)
    return dataclasses.replace(run, train=tc)


def run_cell(args: tuple[RunConfig, float, str, int]) -> CurveCell:
    cfg, budget, method, seed = args
    try:
        run = curve_config(cfg, budget, method, seed)
        network, dataset = build_run(run)
        res = train(network, dataset, run.train)
        return CurveCell(budget, method, seed, res.final_eval_loss)
    except DivergenceError:
        return CurveCell(budget, method, seed, status="diverged")
    except (NumericError, ArithmeticError, ValueError) as exc:
        return CurveCell(budget, method, seed, status=f"error: {type(exc).__name__}")


def budget_curve(
    cfg: RunConfig,
    budgets: Sequence[float],
    seeds: Sequence[int],
    methods: Sequence[str] = ("ctr", "uniform"),
    jobs: int = 1,
) -> list[CurveCell]:
    """Every (budget, method, seed) cell, in a fixed order regardless of ``jobs``."""
    if not budgets:
        raise ConfigError("budget curve needs at least one budget")
    cells = [(cfg, float(b), m, int(s)) for b in budgets for m in methods for s in seeds]
    if jobs <= 1:
        return [run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_cell, cells))


def write_curve_csv(path: str | Path, cells: Iterable[CurveCell]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        w.writeheader()
        for c in cells:
            w.writerow(c.row())


def read_curve_csv(path: str | Path) -> list[CurveCell]:
    with open(path, newline="") as fh:
        return [
            CurveCell(float(r["budget_fraction"]), r["method"], int(r["seed"]),
                      float(r["final_loss"]) if r["final_loss"] else float("nan"), r["status"])
            for r in csv.DictReader(fh)
        ]


def curve_means(cells: Iterable[CurveCell]) -> dict[tuple[float, str], float]:
    """Mean final loss per (budget, method) over cells that finished."""
    acc: dict[tuple[float, str], list[float]] = {}
    for c in cells:
        if c.status == "ok":
            acc.setdefault((c.budget_fraction, c.method), []).append(c.final_loss)
    return {k: float(np.mean(v)) for k, v in sorted(acc.items())}
