from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlora.curvature import CurvatureProxy, estimate_kfac, identity_proxy, whiten_gradient
from ctrlora.data import PlantedSpec, gen_planted_task, split
from ctrlora.linalg import make_rng
from ctrlora.model import ArchSpec, build_network
from ctrlora.scheduler import (
    BudgetPlan,
    CandidateDirection,
    SvdParams,
    allocate_greedy,
    budget_from_fraction,
    calibration_gradients,
    deflate,
    predicted_decrease,
    schedule,
    score_layer,
    uniform_plan,
)


def random_spd(n, rng, shift=0.5):
    a = rng.standard_normal((n, n))
    return a @ a.T + shift * np.eye(n)


def random_kfac(d_out, d_in, rng, layer_id=0):
    return CurvatureProxy(layer_id, "kfac", random_spd(d_out, rng), random_spd(d_in, rng))


def unit(v):
    return v / np.linalg.norm(v)


def fake_candidates(layer_id, utilities, cost):
    return [
        CandidateDirection(layer_id, i, float(np.sqrt(2 * u)), None, None, None, None, cost)
        for i, u in enumerate(utilities)
    ]


def brute_force(utilities_by_layer, cost, budget):
    """Best summed utility over every rank vector that fits the budget."""
    ids = sorted(utilities_by_layer)
    best = 0.0
    for ranks in itertools.product(*[range(len(utilities_by_layer[i]) + 1) for i in ids]):
        if sum(ranks) * cost <= budget:
            best = max(best, sum(sum(utilities_by_layer[i][:r]) for i, r in zip(ids, ranks)))
    return best


# --------------------------------------------------------- predicted_decrease


def test_predicted_decrease_identity_example():
    rng = make_rng(0)
    u, v = unit(rng.standard_normal(4)), unit(rng.standard_normal(3))
    alpha, dec = predicted_decrease(3 * np.outer(u, v), identity_proxy(0, 4, 3), u, v)
    assert alpha == pytest.approx(3.0, rel=1e-12)
    assert dec == pytest.approx(4.5, rel=1e-12)


def test_predicted_decrease_orthogonal_direction():
    g = np.outer([1.0, 0.0], [1.0, 0.0])
    alpha, dec = predicted_decrease(g, identity_proxy(0, 2, 2), np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert alpha == 0.0 and dec == 0.0


def test_predicted_decrease_reproduces_dense_quadratic_model():
    rng = make_rng(1)
    for _ in range(100):
        m, n = rng.integers(1, 7, size=2)
        p = random_kfac(m, n, rng)
        g = rng.standard_normal((m, n))
        u, v = unit(rng.standard_normal(m)), unit(rng.standard_normal(n))
        alpha, dec = predicted_decrease(g, p, u, v)
        dw = alpha * np.outer(u, v)
        vec = dw.reshape(-1, order="F")
        model = -np.sum(g * dw) + 0.5 * vec @ np.kron(p.r_factor, p.l_factor) @ vec
        assert abs(model + dec) <= 1e-10 * max(1.0, dec)


# ------------------------------------------------------------- score_layer


def test_score_layer_identity_diag_example():
    g = np.zeros((4, 3))
    g[0, 0], g[1, 1] = 4.0, 2.0
    cands = score_layer(g, identity_proxy(0, 4, 3), 2)
    assert [c.utility for c in cands] == pytest.approx([8.0, 2.0], rel=1e-12)
    assert [c.index for c in cands] == [0, 1]
    assert all(c.cost == 7 for c in cands)


def test_score_layer_k_zero_and_bounds():
    assert score_layer(np.ones((3, 2)), identity_proxy(0, 3, 2), 0) == []
    with pytest.raises(ValueError):
        score_layer(np.ones((3, 2)), identity_proxy(0, 3, 2), 3)


def test_score_layer_candidates_unit_and_consistent():
    rng = make_rng(2)
    p = random_kfac(6, 5, rng)
    g = rng.standard_normal((6, 5))
    for c in score_layer(g, p, 5):
        assert abs(np.linalg.norm(c.u) - 1) < 1e-8 and abs(np.linalg.norm(c.v) - 1) < 1e-8
        # utility from the stored weight-space pair equals sigma^2 / 2
        _, dec = predicted_decrease(g, p, c.u_raw, c.v_raw)
        assert dec == pytest.approx(c.utility, rel=1e-8, abs=1e-12)


def test_score_layer_randomized_path_matches_exact():
    rng = make_rng(3)
    p = random_kfac(20, 18, rng)
    g = rng.standard_normal((20, 18))
    exact = score_layer(g, p, 3)
    approx = score_layer(g, p, 3, SvdParams(exact_below=0), seed=1)
    assert np.allclose([c.sigma for c in approx], [c.sigma for c in exact], rtol=1e-6)


def test_singular_pair_optimality_monte_carlo():
    rng = make_rng(4)
    for _ in range(20):
        m, n = rng.integers(2, 9, size=2)
        p = random_kfac(m, n, rng)
        g = rng.standard_normal((m, n))
        top = score_layer(g, p, 1)[0]
        sigma1 = np.linalg.svd(whiten_gradient(p, g), compute_uv=False)[0]
        _, dec_top = predicted_decrease(g, p, top.u_raw, top.v_raw)
        assert abs(dec_top - 0.5 * sigma1**2) <= 1e-9 * max(1.0, sigma1**2)
        us = rng.standard_normal((2000, m))
        vs = rng.standard_normal((2000, n))
        best = max(predicted_decrease(g, p, unit(a), unit(b))[1] for a, b in zip(us, vs))
        assert best <= 0.5 * sigma1**2 + 1e-9


# ----------------------------------------------------------------- deflate


def test_deflate_rank_one_to_zero():
    rng = make_rng(5)
    u, v = unit(rng.standard_normal(5)), unit(rng.standard_normal(4))
    assert np.max(np.abs(deflate(2.5 * np.outer(u, v), (2.5, u, v)))) < 1e-10


def test_deflate_exposes_next_singular_value():
    e1 = np.array([1.0, 0.0])
    out = deflate(np.diag([5.0, 3.0]), (5.0, e1, e1))
    assert np.linalg.svd(out, compute_uv=False)[0] == pytest.approx(3.0)


# ---------------------------------------------------------- allocate_greedy


def test_allocate_zero_budget():
    plan = allocate_greedy({0: fake_candidates(0, [5, 1], 10)}, 0)
    assert plan.ranks == {0: 0} and plan.spent == 0


def test_allocate_worked_example():
    cands = {1: fake_candidates(1, [5, 1], 10), 2: fake_candidates(2, [3, 2], 10)}
    plan = allocate_greedy(cands, 30)
    assert plan.ranks == {1: 1, 2: 2}
    assert [s.utility for s in plan.selection_log] == pytest.approx([5, 3, 2])
    assert plan.total_utility() == pytest.approx(brute_force({1: [5, 1], 2: [3, 2]}, 10, 30))


def test_allocate_budget_covers_everything():
    cands = {0: fake_candidates(0, [4, 3, 1], 5), 1: fake_candidates(1, [2], 7)}
    plan = allocate_greedy(cands, 1000)
    assert plan.ranks == {0: 3, 1: 1}
    assert plan.spent == 3 * 5 + 7


def test_allocate_empty_candidates_gives_zero_plan():
    plan = allocate_greedy({0: [], 1: []}, 50)
    assert plan.ranks == {0: 0, 1: 0} and plan.spent == 0


def test_allocate_tie_breaking():
    cands = {2: fake_candidates(2, [1, 1], 1), 0: fake_candidates(0, [1, 1], 1)}
    plan = allocate_greedy(cands, 3)
    assert [(s.layer_id, s.index) for s in plan.selection_log] == [(0, 0), (0, 1), (2, 0)]


def test_allocate_unknown_policy():
    with pytest.raises(ValueError):
        allocate_greedy({}, 1, policy="best")


def test_allocate_utility_per_cost_prefers_cheap_layer():
    cands = {0: fake_candidates(0, [10], 100), 1: fake_candidates(1, [6], 10)}
    assert allocate_greedy(cands, 100).ranks == {0: 1, 1: 0}
    assert allocate_greedy(cands, 100, policy="utility-per-cost").ranks == {0: 0, 1: 1}


utilities = st.lists(st.floats(0.0, 10.0, allow_nan=False), min_size=0, max_size=4).map(
    lambda xs: sorted(xs, reverse=True)
)


@settings(max_examples=300, deadline=None)
@given(layers=st.lists(utilities, min_size=1, max_size=4), cost=st.integers(1, 5), budget=st.integers(0, 60))
def test_greedy_equals_brute_force_on_equal_costs(layers, cost, budget):
    by_layer = dict(enumerate(layers))
    cands = {i: fake_candidates(i, u, cost) for i, u in by_layer.items()}
    plan = allocate_greedy(cands, budget)
    assert plan.total_utility() == pytest.approx(brute_force(by_layer, cost, budget), rel=1e-12, abs=1e-12)
    # monotone utilities, feasibility and termination
    logged = [s.utility for s in plan.selection_log]
    assert all(b <= a for a, b in zip(logged, logged[1:]))
    assert plan.spent <= budget
    left = sum(len(u) for u in layers) - sum(plan.ranks.values())
    if left:
        assert plan.spent > budget - cost


@settings(max_examples=100, deadline=None)
@given(costs=st.lists(st.integers(1, 20), min_size=1, max_size=4), budget=st.integers(0, 100),
       seed=st.integers(0, 1000))
def test_budget_feasibility_heterogeneous(costs, budget, seed):
    rng = make_rng(seed)
    cands = {i: fake_candidates(i, sorted(rng.random(3) * 5, reverse=True), c) for i, c in enumerate(costs)}
    for policy in ("raw-utility", "utility-per-cost"):
        plan = allocate_greedy(cands, budget, policy)
        assert plan.spent == sum(plan.ranks[i] * c for i, c in enumerate(costs)) <= budget
        # nothing that is left would still fit
        for i, c in enumerate(costs):
            if plan.ranks[i] < 3:
                assert c > budget - plan.spent


# --------------------------------------------------------------- BudgetPlan


def test_plan_round_trip(tmp_path):
    cands = {1: fake_candidates(1, [5, 1], 10), 2: fake_candidates(2, [3, 2], 10)}
    plan = allocate_greedy(cands, 30)
    path = tmp_path / "plan.json"
    plan.save(path)
    assert BudgetPlan.load(path) == plan
    text = path.read_text()
    plan.save(path)
    assert path.read_text() == text


def test_plan_rejects_foreign_schema():
    with pytest.raises(ValueError):
        BudgetPlan.from_dict({"schema": "other"})


# ----------------------------------------------------------------- schedule


def planted_setup(scales, dims=(10, 12, 12, 12, 6), seed=0, n=400):
    net = build_network(ArchSpec(dims=list(dims), activation="gelu"), seed=seed)
    spec = PlantedSpec(ranks={i: 2 for i in scales}, scales=scales, noise=0.01, n_samples=n, seed=seed)
    ds = split(gen_planted_task(net, spec), 128, 0.2, seed)
    return net, ds


def test_schedule_one_unit_goes_to_largest_utility():
    net, ds = planted_setup({1: 3.0})
    batches = ds.calibration_batches()
    proxies = estimate_kfac(net, None, batches, seed=0)
    # one unit of the cheapest layer; all eligible layers here cost 24 per unit except the first/last
    costs = {i: sum(net.shape(i)) for i in net.eligible_ids()}
    frac = (max(costs.values()) + 0.5) / net.param_count()
    plan = schedule(net, None, batches, proxies, frac)
    assert sum(plan.ranks.values()) == 1
    grads = calibration_gradients(net, None, batches)
    top = {i: np.linalg.svd(whiten_gradient(proxies[i], grads[i]), compute_uv=False)[0] for i in grads}
    assert plan.selection_log[0].layer_id == max(top, key=top.get)
    assert plan.selection_log[0].sigma == pytest.approx(max(top.values()), rel=1e-10)


def test_schedule_prefers_layer_with_larger_target():
    # the second layer's planted update is 10x the first's; budgets of one and two
    # units cannot cover both layers, so the choice is forced
    for seed in range(3):
        net = build_network(ArchSpec(dims=[16, 32, 8], activation="gelu"), seed=seed)
        spec = PlantedSpec(ranks={0: 2, 1: 2}, scales={0: 0.3, 1: 3.0}, noise=0.01, n_samples=600, seed=seed)
        ds = split(gen_planted_task(net, spec), 256, 0.2, seed)
        batches = ds.calibration_batches()
        proxies = estimate_kfac(net, None, batches, seed=seed)
        for units in (1, 2):
            frac = (units * sum(net.shape(1)) + 0.5) / net.param_count()
            plan = schedule(net, None, batches, proxies, frac, seed=seed)
            assert plan.ranks[1] > plan.ranks[0]


def test_schedule_deterministic_and_zero_budget():
    net, ds = planted_setup({1: 3.0})
    batches = ds.calibration_batches()
    proxies = estimate_kfac(net, None, batches, seed=0)
    assert schedule(net, None, batches, proxies, 0.2) == schedule(net, None, batches, proxies, 0.2)
    zero = schedule(net, None, batches, proxies, 0.0)
    assert set(zero.ranks.values()) == {0}
    with pytest.raises(ValueError):
        schedule(net, None, batches, proxies, 1.5)


def test_planted_single_layer_concentrates_rank():
    # rank-one target on one layer, nothing elsewhere, budget of one unit of that layer
    picked = []
    for planted in (0, 1, 2):
        for seed in range(3):
            net = build_network(ArchSpec(dims=[16, 16, 16, 16, 8], activation="gelu"), seed=seed)
            spec = PlantedSpec(ranks={planted: 1}, scales={planted: 3.0}, noise=0.01, n_samples=600, seed=seed)
            ds = split(gen_planted_task(net, spec), 256, 0.2, seed)
            batches = ds.calibration_batches()
            proxies = estimate_kfac(net, None, batches, seed=seed)
            frac = (sum(net.shape(planted)) + 0.5) / net.param_count()
            plan = schedule(net, None, batches, proxies, frac, seed=seed)
            picked.append(plan.ranks[planted] / max(1, sum(plan.ranks.values())))
    assert np.mean(picked) >= 0.8


# -------------------------------------------------------- uniform baseline


def test_uniform_plan_largest_common_rank():
    net = build_network(ArchSpec(dims=[8, 16, 4]), seed=0)
    per_rank = (8 + 16) + (16 + 4)
    plan = uniform_plan(net, 3 * per_rank + 5)
    assert plan.ranks == {0: 3, 1: 3}
    assert plan.spent == 3 * per_rank
    assert uniform_plan(net, per_rank - 1).ranks == {0: 0, 1: 0}
    assert uniform_plan(net, 10**6).ranks == {0: 4, 1: 4}
    assert uniform_plan(net, 10**6, k_max=2).ranks == {0: 2, 1: 2}


def test_budget_from_fraction():
    net = build_network(ArchSpec(dims=[8, 16, 4]), seed=0)
    assert net.param_count() == 8 * 16 + 16 + 16 * 4 + 4
    assert budget_from_fraction(net, 0.5) == net.param_count() // 2
    assert budget_from_fraction(net, 0.0) == 0
