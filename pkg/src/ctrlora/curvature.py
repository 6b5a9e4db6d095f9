"""Per-layer curvature proxies: Kronecker factors or a Hutchinson diagonal.

For a K-FAC proxy the metric on a weight-shaped matrix ``X`` is
``<X, L X R>`` with ``L`` built from output gradients and ``R`` from layer
inputs, so whitening is the two-sided product ``L^{-1/2} G R^{-1/2}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

from .linalg import (
    DimensionError,
    SingularMetricError,
    inv_sqrt_spd,
    kron_quadratic_form,
    make_rng,
    symmetrize,
)
from .model import Adapters, BaseNetwork, Batch, run_pass

FISHER_KINDS = ("sampled", "empirical")


class StepSizeError(ArithmeticError):
    pass


@dataclass(frozen=True)
class WhitenCache:
    layer_id: int
    l_inv_sqrt: np.ndarray | None = None
    r_inv_sqrt: np.ndarray | None = None
    d_inv_sqrt: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class CurvatureProxy:
    layer_id: int
    variant: str  # "kfac" | "diagonal"
    l_factor: np.ndarray | None = None  # (d_out, d_out)
    r_factor: np.ndarray | None = None  # (d_in, d_in)
    d_entries: np.ndarray | None = None  # (d_out, d_in)
    damping: float = 0.0
    sample_count: int = 1
    step_estimated: int = 0
    estimator: str = "sampled"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant == "kfac":
            if self.l_factor is None or self.r_factor is None:
                raise ValueError("kfac proxy needs both factors")
        elif self.variant == "diagonal":
            if self.d_entries is None:
                raise ValueError("diagonal proxy needs entries")
            if np.any(self.d_entries <= 0):
                raise SingularMetricError("diagonal metric entries must be positive")
        else:
            raise ValueError(f"unknown proxy variant {self.variant!r}")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")

    @property
    def shape(self) -> tuple[int, int]:
        if self.variant == "kfac":
            return self.l_factor.shape[0], self.r_factor.shape[0]
        return self.d_entries.shape

    @cached_property
    def whitener(self) -> WhitenCache:
        if self.variant == "kfac":
            return WhitenCache(
                self.layer_id, inv_sqrt_spd(self.l_factor), inv_sqrt_spd(self.r_factor)
            )
        return WhitenCache(self.layer_id, d_inv_sqrt=1.0 / np.sqrt(self.d_entries))

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise DimensionError(f"matrix of shape {x.shape} does not match proxy {self.shape}")
        return x


def identity_proxy(layer_id: int, d_out: int, d_in: int) -> CurvatureProxy:
    return CurvatureProxy(layer_id, "kfac", np.eye(d_out), np.eye(d_in), estimator="identity")


def metric_norm_sq(proxy: CurvatureProxy, x: np.ndarray) -> float:
    """``||X||_M^2 = <X, M X>``."""
    x = proxy._check(x)
    if proxy.variant == "kfac":
        return kron_quadratic_form(proxy.l_factor, proxy.r_factor, x)
    return float(np.sum(proxy.d_entries * x * x))


def whiten_gradient(proxy: CurvatureProxy, g: np.ndarray) -> np.ndarray:
    g = proxy._check(g)
    w = proxy.whitener
    if proxy.variant == "kfac":
        return w.l_inv_sqrt @ g @ w.r_inv_sqrt
    return g * w.d_inv_sqrt


def unwhiten_direction(proxy: CurvatureProxy, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map a whitened rank-one direction back to weight coordinates (unit vectors).

    Exact for K-FAC proxies. A diagonal metric does not factor over rows and
    columns, so the closest rank-one matrix to ``(u v^T) / sqrt(D)`` is used.
    """
    w = proxy.whitener
    if proxy.variant == "kfac":
        uu, vv = w.l_inv_sqrt @ u, w.r_inv_sqrt @ v
    else:
        x = np.outer(u, v) * w.d_inv_sqrt
        left, s, right_t = np.linalg.svd(x, full_matrices=False)
        uu, vv = left[:, 0] * s[0], right_t[0]
    return uu / np.linalg.norm(uu), vv / np.linalg.norm(vv)


# --------------------------------------------------------------------------- estimation


def _effective_damping(raw: np.ndarray, damping: float, relative: bool) -> float:
    if not relative:
        return float(damping)
    scale = float(np.mean(np.diag(raw))) if raw.ndim == 2 else float(np.mean(raw))
    return damping * scale if scale > 0 else float(damping)


def sampled_output_grad(network: BaseNetwork, output: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Output gradient of the batch-mean loss under targets drawn from the model.

    The per-example outer product has expectation equal to the loss Hessian in
    output space, so the resulting factors estimate the Fisher / Gauss-Newton block.
    """
    n = output.shape[0]
    if network.arch.task == "classification":
        z = output - output.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        u = rng.random(n)
        labels = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), p.shape[1] - 1)
        grad = p.copy()
        grad[np.arange(n), labels] -= 1.0
        return grad / n
    d_out = output.shape[1]
    return math.sqrt(2.0 / d_out) * rng.standard_normal(output.shape) / n


def estimate_kfac(
    network: BaseNetwork,
    adapters: Adapters | None,
    calibration_batches: Sequence[Batch],
    damping: float = 1e-3,
    relative: bool = True,
    fisher: str = "sampled",
    seed: int = 0,
    step: int = 0,
) -> dict[int, CurvatureProxy]:
    """Kronecker factors ``L = E[g g^T]`` and ``R = E[a a^T]`` per eligible layer.

    ``fisher="empirical"`` uses the actual loss gradients, ``"sampled"`` draws
    targets from the model's predictive distribution. Damping is absolute, or a
    fraction of each factor's mean diagonal when ``relative`` is true.
    """
    if fisher not in FISHER_KINDS:
        raise ValueError(f"unknown fisher estimator {fisher!r}")
    batches = list(calibration_batches)
    if not batches or sum(len(b) for b in batches) == 0:
        raise ValueError("empty calibration set")
    eligible = network.eligible_ids()
    l_acc = {i: 0.0 for i in eligible}
    r_acc = {i: 0.0 for i in eligible}
    n_examples = n_rows = 0
    for bi, batch in enumerate(batches):
        out_grad = None
        if fisher == "sampled":
            rng = make_rng([seed, 0xF15, step, bi])
            out_grad = lambda out, rng=rng: sampled_output_grad(network, out, rng)  # noqa: E731
        res = run_pass(network, adapters, batch, output_grad=out_grad)
        n = res.n_examples
        for i in eligible:
            a = res.a[i]
            g = res.dy[i] * n  # per-example loss gradient
            l_acc[i] = l_acc[i] + g.T @ g
            r_acc[i] = r_acc[i] + a.T @ a
        n_examples += n
        n_rows += res.a[eligible[0]].shape[0] if eligible else n

    proxies = {}
    for i in eligible:
        # rows are tokens for the transformer block: L sums tokens per example
        l_raw = symmetrize(l_acc[i] / n_examples)
        r_raw = symmetrize(r_acc[i] / n_rows)
        dl = _effective_damping(l_raw, damping, relative)
        dr = _effective_damping(r_raw, damping, relative)
        proxies[i] = CurvatureProxy(
            i,
            "kfac",
            l_raw + dl * np.eye(l_raw.shape[0]),
            r_raw + dr * np.eye(r_raw.shape[0]),
            damping=min(dl, dr),
            sample_count=n_examples,
            step_estimated=step,
            estimator=fisher,
            meta={"l_damping": dl, "r_damping": dr},
        )
    return proxies


def estimate_hutchinson_diag(
    grad_at: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    probes: int = 64,
    fd_step: float = 1e-4,
    seed: int | Sequence[int] = 0,
    return_samples: bool = False,
):
    """Hutchinson diagonal ``mean(v * Hv)`` over Rademacher probes.

    ``Hv`` is a central difference of the gradient callable. With
    ``return_samples`` the per-probe ``v * Hv`` stack is returned as well.
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    theta = np.asarray(theta, dtype=np.float64)
    rng = make_rng(seed)
    acc = np.zeros_like(theta)
    samples = [] if return_samples else None
    for _ in range(probes):
        v = rng.integers(0, 2, size=theta.shape) * 2.0 - 1.0
        with np.errstate(invalid="ignore", over="ignore"):
            hv = (grad_at(theta + fd_step * v) - grad_at(theta - fd_step * v)) / (2.0 * fd_step)
        if not np.all(np.isfinite(hv)):
            raise StepSizeError(f"non-finite Hessian-vector product; try a smaller fd_step than {fd_step:g}")
        contrib = v * hv
        acc += contrib
        if samples is not None:
            samples.append(contrib)
    est = acc / probes
    if return_samples:
        return est, np.stack(samples)
    return est


def layer_grad_fn(
    network: BaseNetwork, adapters: Adapters | None, batches: Sequence[Batch], layer_id: int
) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Effective weight of one layer and a callable mapping it to the mean loss gradient."""
    base = network.layers[layer_id].weight
    ad = (adapters or {}).get(layer_id)
    theta0 = base + ad.delta() if ad is not None and ad.rank else base.copy()
    total = sum(len(b) for b in batches)

    def grad_at(theta):
        offset = theta - base
        # adapter contribution is folded into the offset, so drop it here
        others = {k: v for k, v in (adapters or {}).items() if k != layer_id}
        g = np.zeros_like(base)
        for b in batches:
            res = run_pass(network, others, b, offsets={layer_id: offset})
            g += res.full_gradient(layer_id) * (len(b) / total)
        return g

    return theta0, grad_at


def estimate_hutchinson(
    network: BaseNetwork,
    adapters: Adapters | None,
    calibration_batches: Sequence[Batch],
    probes: int = 64,
    fd_step: float = 1e-4,
    damping: float = 1e-3,
    relative: bool = True,
    seed: int = 0,
    step: int = 0,
) -> dict[int, CurvatureProxy]:
    """Diagonal proxies from layer-restricted Hutchinson estimates.

    Negative curvature estimates are clipped to zero before damping so the
    metric stays positive definite.
    """
    batches = list(calibration_batches)
    if not batches:
        raise ValueError("empty calibration set")
    n = sum(len(b) for b in batches)
    proxies = {}
    for i in network.eligible_ids():
        theta, grad_at = layer_grad_fn(network, adapters, batches, i)
        est = estimate_hutchinson_diag(grad_at, theta, probes, fd_step, seed=[seed, 0x4C7, step, i])
        clipped = np.clip(est, 0.0, None)
        d = _effective_damping(clipped, damping, relative)
        if d <= 0:
            d = 1e-12
        proxies[i] = CurvatureProxy(
            i,
            "diagonal",
            d_entries=clipped + d,
            damping=d,
            sample_count=n,
            step_estimated=step,
            estimator="hutchinson",
            meta={"probes": probes, "fd_step": fd_step},
        )
    return proxies


def estimate_proxies(kind: str, network, adapters, batches, *, damping, fisher="sampled",
                     probes=64, fd_step=1e-4, seed=0, step=0) -> dict[int, CurvatureProxy]:
    if kind == "kfac":
        return estimate_kfac(network, adapters, batches, damping, True, fisher, seed, step)
    if kind == "hutchinson":
        return estimate_hutchinson(network, adapters, batches, probes, fd_step, damping, True, seed, step)
    raise ValueError(f"unknown proxy kind {kind!r}")


def proxy_arrays(proxies: Mapping[int, CurvatureProxy]) -> tuple[dict, dict]:
    """Split proxies into (metadata, arrays) for checkpointing."""
    meta, arrays = {}, {}
    for i, p in proxies.items():
        meta[str(i)] = {
            "variant": p.variant,
            "damping": p.damping,
            "sample_count": p.sample_count,
            "step_estimated": p.step_estimated,
            "estimator": p.estimator,
            "meta": p.meta,
        }
        if p.variant == "kfac":
            arrays[f"proxy_{i}_l"] = p.l_factor
            arrays[f"proxy_{i}_r"] = p.r_factor
        else:
            arrays[f"proxy_{i}_d"] = p.d_entries
    return meta, arrays


def proxies_from_arrays(meta: Mapping, arrays: Mapping) -> dict[int, CurvatureProxy]:
    out = {}
    for key, m in meta.items():
        i = int(key)
        if m["variant"] == "kfac":
            out[i] = CurvatureProxy(
                i, "kfac", arrays[f"proxy_{i}_l"], arrays[f"proxy_{i}_r"],
                damping=m["damping"], sample_count=m["sample_count"],
                step_estimated=m["step_estimated"], estimator=m["estimator"], meta=m["meta"],
            )
        else:
            out[i] = CurvatureProxy(
                i, "diagonal", d_entries=arrays[f"proxy_{i}_d"],
                damping=m["damping"], sample_count=m["sample_count"],
                step_estimated=m["step_estimated"], estimator=m["estimator"], meta=m["meta"],
            )
    return out
