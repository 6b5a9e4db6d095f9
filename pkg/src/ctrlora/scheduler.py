"""Rank scheduling from whitened-gradient spectra under a global parameter budget."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .curvature import (
    CurvatureProxy,
    metric_norm_sq,
    unwhiten_direction,
    whiten_gradient,
)
from .linalg import exact_svd, randomized_svd
from .model import Adapters, BaseNetwork, Batch, run_pass

POLICIES = ("raw-utility", "utility-per-cost")
PLAN_SCHEMA = "ctrlora-plan/1"


@dataclass(frozen=True)
class SvdParams:
    oversample: int = 8
    power_iters: int = 2
    exact_below: int = 64  # use the dense SVD when min(d_out, d_in) <= this


@dataclass(eq=False)
class CandidateDirection:
    layer_id: int
    index: int  # position in the layer's spectrum
    sigma: float
    u: np.ndarray  # whitened left vector (d_out)
    v: np.ndarray  # whitened right vector (d_in)
    u_raw: np.ndarray  # unit vector in weight coordinates
    v_raw: np.ndarray
    cost: int

    @property
    def utility(self) -> float:
        return 0.5 * self.sigma * self.sigma


@dataclass(frozen=True)
class Selection:
    layer_id: int
    index: int
    sigma: float
    utility: float
    cost: int


@dataclass
class BudgetPlan:
    ranks: dict[int, int]
    budget_limit: int
    spent: int = 0
    selection_log: list[Selection] = field(default_factory=list)
    policy: str = "raw-utility"
    costs: dict[int, int] = field(default_factory=dict)

    def total_utility(self) -> float:
        return sum(s.utility for s in self.selection_log)

    def to_dict(self) -> dict:
        return {
            "schema": PLAN_SCHEMA,
            "policy": self.policy,
            "budget_limit": self.budget_limit,
            "spent": self.spent,
            "layers": [
                {"layer_id": k, "rank": self.ranks[k], "unit_cost": self.costs.get(k)}
                for k in sorted(self.ranks)
            ],
            "selections": [
                {"layer_id": s.layer_id, "index": s.index, "sigma": s.sigma,
                 "utility": s.utility, "cost": s.cost}
                for s in self.selection_log
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BudgetPlan":
        if d.get("schema") != PLAN_SCHEMA:
            raise ValueError(f"unsupported plan schema {d.get('schema')!r}")
        ranks = {int(e["layer_id"]): int(e["rank"]) for e in d["layers"]}
        costs = {int(e["layer_id"]): int(e["unit_cost"]) for e in d["layers"] if e["unit_cost"] is not None}
        log = [Selection(int(s["layer_id"]), int(s["index"]), float(s["sigma"]),
                         float(s["utility"]), int(s["cost"])) for s in d["selections"]]
        return cls(ranks, int(d["budget_limit"]), int(d["spent"]), log, d["policy"], costs)

    def __eq__(self, other) -> bool:
        return isinstance(other, BudgetPlan) and self.to_dict() == other.to_dict()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "BudgetPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def predicted_decrease(
    g: np.ndarray, proxy: CurvatureProxy, u: np.ndarray, v: np.ndarray
) -> tuple[float, float]:
    """Optimal step along ``u v^T`` in the local quadratic model and the resulting decrease."""
    direction = np.outer(u, v)
    inner = float(np.sum(np.asarray(g) * direction))
    curv = metric_norm_sq(proxy, direction)
    if curv <= 0.0:
        raise ZeroDivisionError("metric norm of the direction is zero")
    return inner / curv, 0.5 * inner * inner / curv


def score_layer(
    g: np.ndarray,
    proxy: CurvatureProxy,
    k_max: int,
    svd_params: SvdParams = SvdParams(),
    seed: int | Sequence[int] = 0,
) -> list[CandidateDirection]:
    """Leading singular triples of the whitened gradient as rank-one candidates."""
    d_out, d_in = proxy.shape
    if k_max < 0 or k_max > min(d_out, d_in):
        raise ValueError(f"k_max={k_max} outside [0, {min(d_out, d_in)}]")
    if k_max == 0:
        return []
    gw = whiten_gradient(proxy, g)
    if min(d_out, d_in) <= svd_params.exact_below:
        svd = exact_svd(gw, k_max)
    else:
        svd = randomized_svd(gw, k_max, svd_params.oversample, svd_params.power_iters, seed)
    out = []
    for i in range(k_max):
        sigma, u, v = svd.triple(i)
        u_raw, v_raw = unwhiten_direction(proxy, u, v)
        out.append(CandidateDirection(proxy.layer_id, i, sigma, u, v, u_raw, v_raw, d_in + d_out))
    return out


def deflate(g_whitened: np.ndarray, triple: tuple[float, np.ndarray, np.ndarray]) -> np.ndarray:
    sigma, u, v = triple
    return np.asarray(g_whitened) - sigma * np.outer(u, v)


def allocate_greedy(
    candidates_by_layer: Mapping[int, Sequence[CandidateDirection]],
    budget: int,
    policy: str = "raw-utility",
) -> BudgetPlan:
    """Greedy allocation, one rank unit per selection.

    Each layer's candidates are consumed in spectrum order. A layer whose next
    unit no longer fits the remaining budget drops out (all its units cost the
    same). Ties go to the lower layer id, then the lower spectrum index.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    ranks = {int(k): 0 for k in candidates_by_layer}
    costs = {}
    heap = []
    for layer_id, cands in candidates_by_layer.items():
        if cands:
            costs[int(layer_id)] = int(cands[0].cost)
            heap.append(_heap_key(cands[0], policy) + (int(layer_id), 0))
    heapq.heapify(heap)
    remaining = int(budget)
    log: list[Selection] = []
    while heap:
        *_, layer_id, pos = heapq.heappop(heap)
        cand = candidates_by_layer[layer_id][pos]
        if cand.cost > remaining:
            continue
        remaining -= cand.cost
        ranks[layer_id] += 1
        log.append(Selection(layer_id, cand.index, float(cand.sigma), float(cand.utility), int(cand.cost)))
        if pos + 1 < len(candidates_by_layer[layer_id]):
            heapq.heappush(heap, _heap_key(candidates_by_layer[layer_id][pos + 1], policy) + (layer_id, pos + 1))
    return BudgetPlan(ranks, int(budget), int(budget) - remaining, log, policy, costs)


def _heap_key(cand: CandidateDirection, policy: str) -> tuple:
    score = cand.utility if policy == "raw-utility" else cand.utility / cand.cost
    return (-score, cand.layer_id, cand.index)


def budget_from_fraction(network: BaseNetwork, budget_fraction: float) -> int:
    # small epsilon guards against fractions like 0.003 * 1000 landing just below an integer
    return int(math.floor(budget_fraction * network.param_count() + 1e-9))


def calibration_gradients(
    network: BaseNetwork, adapters: Adapters | None, batches: Sequence[Batch]
) -> dict[int, np.ndarray]:
    """Batch-size weighted mean of the full-matrix gradients over the calibration set."""
    total = sum(len(b) for b in batches)
    grads = {i: np.zeros(network.shape(i)) for i in network.eligible_ids()}
    for b in batches:
        res = run_pass(network, adapters, b)
        for i in grads:
            grads[i] += res.full_gradient(i) * (len(b) / total)
    return grads


def schedule(
    network: BaseNetwork,
    adapters: Adapters | None,
    calibration_batches: Sequence[Batch],
    proxies: Mapping[int, CurvatureProxy],
    budget_fraction: float,
    k_max: int = 8,
    policy: str = "raw-utility",
    seed: int = 0,
    svd_params: SvdParams = SvdParams(),
) -> BudgetPlan:
    if not 0.0 <= budget_fraction <= 1.0:
        raise ValueError("budget_fraction must lie in [0, 1]")
    grads = calibration_gradients(network, adapters, calibration_batches)
    candidates = {}
    for i in network.eligible_ids():
        d_out, d_in = network.shape(i)
        k = min(k_max, d_out, d_in)
        candidates[i] = score_layer(grads[i], proxies[i], k, svd_params, seed=[seed, 0x5C0, i])
    return allocate_greedy(candidates, budget_from_fraction(network, budget_fraction), policy)


def uniform_plan(network: BaseNetwork, budget: int, k_max: int | None = None) -> BudgetPlan:
    """Largest common rank over all eligible layers that fits ``budget``."""
    ids = network.eligible_ids()
    per_rank = sum(sum(network.shape(i)) for i in ids)
    cap = min(min(network.shape(i)) for i in ids)
    if k_max is not None:
        cap = min(cap, k_max)
    r = min(budget // per_rank, cap) if per_rank else 0
    return BudgetPlan(
        {i: int(r) for i in ids}, int(budget), int(r * per_rank), [], "uniform",
        {i: int(sum(network.shape(i))) for i in ids},
    )
