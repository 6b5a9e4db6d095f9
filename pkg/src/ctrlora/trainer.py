"""Trust-region regularized adapter training.

The objective per step is ``task_loss + lambda(step) * sum_l ||A_l B_l^T||_{M_l}^2``
where ``M_l`` is the most recent curvature proxy. Proxies are refreshed every
``refresh_interval`` steps; ranks stay fixed after the initial allocation.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from .curvature import CurvatureProxy, FISHER_KINDS, estimate_proxies, metric_norm_sq
from .data import Dataset
from .linalg import make_rng
from .model import (
    AdapterPair,
    Adapters,
    BaseNetwork,
    Batch,
    init_adapters,
    loss_and_adapter_grads,
    predict,
    loss_and_output_grad,
)
from .scheduler import POLICIES, BudgetPlan, SvdParams, budget_from_fraction, schedule, uniform_plan


class NumericError(ArithmeticError):
    pass


class DivergenceError(NumericError):
    """Raised by the divergence guard; carries the last good state."""

    def __init__(self, message: str, state: "TrainState | None" = None, metrics=None):
        super().__init__(message)
        self.state = state
        self.metrics = metrics or []


@dataclass
class TrainConfig:
    budget_fraction: float = 0.003
    steps: int = 2000
    batch_size: int = 64
    peak_lr: float = 2e-4
    warmup_fraction: float = 0.03
    lambda_start: float = 0.1
    lambda_end: float = 0.0
    lambda_schedule: str = "linear"
    refresh_interval: int = 50
    calibration_size: int = 256
    proxy_kind: str = "kfac"
    fisher: str = "sampled"
    damping: float = 1e-3
    seed: int = 0
    policy: str = "raw-utility"
    k_max: int = 8
    rank_mode: str = "ctr"  # ctr | uniform
    weight_decay: float = 0.0
    adapter_sigma: float | None = None
    log_every: int = 10
    eval_every: int = 100
    checkpoint_every: int = 0  # 0 = only at the end
    divergence_factor: float = 10.0
    hutchinson_probes: int = 64
    fd_step: float = 1e-4
    svd_oversample: int = 8
    svd_power_iters: int = 2

    def validate(self) -> None:
        if not self.lambda_start >= self.lambda_end >= 0:
            raise ValueError("need lambda_start >= lambda_end >= 0")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size, log_every and eval_every must be positive")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if not 0.0 <= self.budget_fraction <= 1.0:
            raise ValueError("budget_fraction must lie in [0, 1]")
        if self.lambda_schedule not in ("linear", "cosine"):
            raise ValueError(f"unknown lambda schedule {self.lambda_schedule!r}")
        if self.proxy_kind not in ("kfac", "hutchinson"):
            raise ValueError(f"unknown proxy kind {self.proxy_kind!r}")
        if self.fisher not in FISHER_KINDS:
            raise ValueError(f"unknown fisher estimator {self.fisher!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.rank_mode not in ("ctr", "uniform"):
            raise ValueError(f"unknown rank mode {self.rank_mode!r}")
        if self.calibration_size < 1:
            raise ValueError("calibration_size must be >= 1")
        if self.k_max < 0 or self.peak_lr < 0 or self.damping < 0 or self.weight_decay < 0:
            raise ValueError("k_max, peak_lr, damping and weight_decay must be non-negative")

    def svd_params(self) -> SvdParams:
        return SvdParams(self.svd_oversample, self.svd_power_iters)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


def lambda_at(config: TrainConfig, step: int) -> float:
    if config.steps == 0 or step <= 0:
        return float(config.lambda_start)
    if step >= config.steps:
        return float(config.lambda_end)
    frac = step / config.steps
    if config.lambda_schedule == "cosine":
        frac = 0.5 * (1.0 - math.cos(math.pi * frac))
    return config.lambda_start + (config.lambda_end - config.lambda_start) * frac


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear warm-up to ``peak_lr`` then cosine decay to zero at ``steps``."""
    if config.steps == 0:
        return 0.0
    warm = config.warmup_fraction * config.steps
    if step < warm:
        return config.peak_lr * step / warm
    if step >= config.steps:
        return 0.0
    progress = (step - warm) / (config.steps - warm)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def penalty_value_and_grad(
    adapters: Adapters, proxies: Mapping[int, CurvatureProxy]
) -> tuple[float, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """``sum_l ||A_l B_l^T||_{M_l}^2`` and its analytic gradient.

    K-FAC layers never form the dense metric: the value is
    ``<A^T L A, B^T R B>`` and the gradients are ``2 L A (B^T R B)`` and
    ``2 R B (A^T L A)``.
    """
    total = 0.0
    grads = {}
    for i, ad in adapters.items():
        a, b = ad.a_factor, ad.b_factor
        p = proxies[i]
        if p.shape != (a.shape[0], b.shape[0]):
            raise ValueError(f"adapter {i} does not match proxy shape {p.shape}")
        if ad.rank == 0:
            grads[i] = (np.zeros_like(a), np.zeros_like(b))
            continue
        if p.variant == "kfac":
            la = p.l_factor @ a
            rb = p.r_factor @ b
            ala = a.T @ la
            brb = b.T @ rb
            total += max(float(np.sum(ala * brb)), 0.0)
            grads[i] = (2.0 * la @ brb, 2.0 * rb @ ala)
        else:
            dx = p.d_entries * (a @ b.T)
            total += float(np.sum(dx * (a @ b.T)))
            grads[i] = (2.0 * dx @ b, 2.0 * dx.T @ a)
    return total, grads


@dataclass
class OptimizerState:
    m: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    v: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(
    state: OptimizerState,
    adapters: Adapters,
    grads: Mapping[int, tuple[np.ndarray, np.ndarray]],
    lr: float,
    weight_decay: float = 0.0,
) -> dict[int, AdapterPair]:
    """Bias-corrected Adam moments with decoupled weight decay; mutates ``state``."""
    for i, (ga, gb) in grads.items():
        if not (np.all(np.isfinite(ga)) and np.all(np.isfinite(gb))):
            raise NumericError(f"non-finite gradient for adapter {i}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = {}
    for i, ad in adapters.items():
        ga, gb = grads[i]
        new = []
        for name, p, g in (("A", ad.a_factor, ga), ("B", ad.b_factor, gb)):
            key = (i, name)
            m = state.m.get(key)
            v = state.v.get(key)
            if m is None:
                m, v = np.zeros_like(p), np.zeros_like(p)
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.m[key], state.v[key] = m, v
            p = p * (1.0 - lr * weight_decay)
            p = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            new.append(p)
        out[i] = AdapterPair(i, new[0], new[1])
    return out


@dataclass
class MetricsRecord:
    step: int
    task_loss: float
    penalty_value: float
    total_loss: float
    lam: float
    lr: float
    grad_norm: float
    layer_metric_norms: dict[int, float]
    eval_loss: float | None = None
    eval_accuracy: float | None = None
    wall_ms: float = 0.0  # excluded from determinism comparisons

    def deterministic(self) -> dict:
        d = asdict(self)
        d.pop("wall_ms")
        return d


@dataclass
class TrainState:
    """Everything needed to resume a run exactly."""

    adapters: dict[int, AdapterPair]
    optimizer: OptimizerState
    proxies: dict[int, CurvatureProxy]
    plan: BudgetPlan
    step: int
    initial_loss: float


@dataclass
class TrainResult:
    adapters: dict[int, AdapterPair]
    plan: BudgetPlan
    metrics: list[MetricsRecord]
    state: TrainState
    final_eval_loss: float
    final_eval_accuracy: float | None
    diverged: bool = False


def evaluate(network: BaseNetwork, adapters: Adapters | None, eval_set: Batch) -> tuple[float, float | None]:
    if len(eval_set) == 0:
        raise ValueError("empty eval set")
    out = predict(network, adapters, eval_set.inputs)
    loss, _ = loss_and_output_grad(network, out, eval_set.targets)
    acc = None
    if network.arch.task == "classification":
        acc = float(np.mean(np.argmax(out, axis=1) == np.asarray(eval_set.targets)))
    return loss, acc


def batch_indices(n_train: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices (into the train split) for a given step; a fresh permutation each epoch."""
    bs = min(batch_size, n_train)
    per_epoch = n_train // bs
    epoch, pos = divmod(step, per_epoch)
    perm = make_rng([seed, 0xBA7C, epoch]).permutation(n_train)
    return perm[pos * bs : (pos + 1) * bs]


def make_proxies(network, adapters, dataset: Dataset, config: TrainConfig, step: int):
    batches = dataset.calibration_batches(config.batch_size * 4)
    return estimate_proxies(
        config.proxy_kind, network, adapters, batches,
        damping=config.damping, fisher=config.fisher,
        probes=config.hutchinson_probes, fd_step=config.fd_step,
        seed=config.seed, step=step,
    )


def make_plan(network, dataset: Dataset, config: TrainConfig, proxies) -> BudgetPlan:
    budget = budget_from_fraction(network, config.budget_fraction)
    if config.rank_mode == "uniform":
        return uniform_plan(network, budget, config.k_max)
    return schedule(
        network, None, dataset.calibration_batches(config.batch_size * 4), proxies,
        config.budget_fraction, config.k_max, config.policy, config.seed, config.svd_params(),
    )


def initial_state(network, dataset: Dataset, config: TrainConfig, plan: BudgetPlan | None = None) -> TrainState:
    proxies = make_proxies(network, None, dataset, config, step=0)
    if plan is None:
        plan = make_plan(network, dataset, config, proxies)
    adapters = init_adapters(network, plan, config.adapter_sigma, config.seed)
    init_loss, _ = evaluate(network, adapters, dataset.eval_set() if len(dataset.eval_idx) else dataset.train_set())
    return TrainState(adapters, OptimizerState(), proxies, plan, 0, init_loss)


def train(
    network: BaseNetwork,
    dataset: Dataset,
    config: TrainConfig,
    plan: BudgetPlan | None = None,
    state: TrainState | None = None,
    stop_after: int | None = None,
    on_record: Callable[[MetricsRecord], None] | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
) -> TrainResult:
    """Run (or resume) training.

    ``state`` resumes from a checkpoint; ``stop_after`` halts once that many
    steps have completed, leaving a resumable state in the result.
    ``on_checkpoint`` receives the state every ``config.checkpoint_every`` steps.
    """
    config.validate()
    if state is None:
        state = initial_state(network, dataset, config, plan)
    metrics: list[MetricsRecord] = []
    eval_set = dataset.eval_set() if len(dataset.eval_idx) else dataset.train_set()
    n_train = len(dataset.train_idx)
    adapters, opt, proxies = state.adapters, state.optimizer, state.proxies
    t0 = time.perf_counter()

    def emit(rec):
        metrics.append(rec)
        if on_record is not None:
            on_record(rec)

    if state.step == 0:
        # step-0 record: losses on the first training batch, no update applied
        el, ea = evaluate(network, adapters, eval_set)
        batch = dataset.batch(dataset.train_idx[batch_indices(n_train, config.batch_size, config.seed, 0)])
        loss0, grads0 = loss_and_adapter_grads(network, adapters, batch)
        pen, pgrads = penalty_value_and_grad(adapters, proxies)
        lam0 = lambda_at(config, 0)
        gnorm0 = math.sqrt(sum(
            float(np.sum((ga + lam0 * pgrads[i][0]) ** 2) + np.sum((gb + lam0 * pgrads[i][1]) ** 2))
            for i, (ga, gb) in grads0.items()
        ))
        emit(_record(0, loss0, pen, lam0, lr_at(config, 0), gnorm0, adapters, proxies, el, ea, t0))

    end = config.steps if stop_after is None else min(config.steps, stop_after)
    last_good = _snapshot(state)
    step = state.step
    while step < end:
        idx = dataset.train_idx[batch_indices(n_train, config.batch_size, config.seed, step)]
        batch = dataset.batch(idx)
        loss, grads = loss_and_adapter_grads(network, adapters, batch)
        lam, lr = lambda_at(config, step), lr_at(config, step)
        pen, pgrads = penalty_value_and_grad(adapters, proxies)
        if not math.isfinite(loss) or loss > config.divergence_factor * state.initial_loss:
            raise DivergenceError(
                f"task loss {loss:.4g} at step {step} exceeds {config.divergence_factor:g}x "
                f"initial loss {state.initial_loss:.4g}",
                last_good, metrics,
            )
        total = {
            i: (ga + lam * pgrads[i][0], gb + lam * pgrads[i][1]) for i, (ga, gb) in grads.items()
        }
        gnorm = math.sqrt(sum(float(np.sum(a * a) + np.sum(b * b)) for a, b in total.values()))
        try:
            adapters = adamw_step(opt, adapters, total, lr, config.weight_decay)
        except NumericError as exc:
            raise DivergenceError(str(exc), last_good, metrics) from exc
        step += 1
        if step % config.refresh_interval == 0 and step < config.steps:
            proxies = make_proxies(network, adapters, dataset, config, step)
        state = TrainState(adapters, opt, proxies, state.plan, step, state.initial_loss)
        if step % config.log_every == 0 or step == config.steps:
            el = ea = None
            if step % config.eval_every == 0 or step == config.steps:
                el, ea = evaluate(network, adapters, eval_set)
            emit(_record(step, loss, pen, lam, lr, gnorm, state.adapters, proxies, el, ea, t0))
            last_good = _snapshot(state)
        if on_checkpoint is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            on_checkpoint(state)

    final_loss, final_acc = evaluate(network, adapters, eval_set)
    return TrainResult(adapters, state.plan, metrics, state, final_loss, final_acc)


def _snapshot(state: TrainState) -> TrainState:
    opt = OptimizerState(
        {k: v.copy() for k, v in state.optimizer.m.items()},
        {k: v.copy() for k, v in state.optimizer.v.items()},
        state.optimizer.step,
    )
    return TrainState(
        {i: a.copy() for i, a in state.adapters.items()}, opt, state.proxies,
        state.plan, state.step, state.initial_loss,
    )


def layer_metric_norms(adapters: Adapters, proxies: Mapping[int, CurvatureProxy]) -> dict[int, float]:
    return {i: metric_norm_sq(proxies[i], ad.delta()) for i, ad in sorted(adapters.items())}


def _record(step, loss, pen, lam, lr, gnorm, adapters, proxies, el, ea, t0) -> MetricsRecord:
    return MetricsRecord(
        step=step,
        task_loss=float(loss),
        penalty_value=float(pen),
        total_loss=float(loss + lam * pen),
        lam=float(lam),
        lr=float(lr),
        grad_norm=float(gnorm),
        layer_metric_norms=layer_metric_norms(adapters, proxies),
        eval_loss=el,
        eval_accuracy=ea,
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )
