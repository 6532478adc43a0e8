import math

import numpy as np
import pytest

from harvestopt.fixtures import _circle, _single_target_scenario
from harvestopt.optimizer import (
    OptimizerConfig,
    armijo_step,
    default_trajectories,
    optimize,
    segment_search,
)
from harvestopt.trajectory import EllipseParams, FourierParams, flatten_all, position


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(backtrack=1.5)
    with pytest.raises(ValueError):
        OptimizerConfig(decrease_coeff=0.0)
    with pytest.raises(ValueError):
        OptimizerConfig(seed_policy="sometimes")


def test_armijo_hand_run_quadratic():
    # J(t) = t^2 at t=1 with gradient 2: nu=1 lands at J(-1)=1 (insufficient),
    # one backtrack to nu=0.5 lands at J(0)=0 (sufficient)
    cfg = OptimizerConfig(step_init=1.0, backtrack=0.5, decrease_coeff=0.1)
    calls = []

    def evaluate(vec):
        calls.append(float(vec[0]))
        return float(vec[0]) ** 2

    theta = np.array([1.0])
    grad = np.array([2.0])
    new, nu, accepted = armijo_step(theta, grad, evaluate, cfg, j_current=1.0)
    assert accepted
    assert nu == pytest.approx(0.5)
    assert new[0] == pytest.approx(0.0)
    assert calls == [-1.0, 0.0]  # exactly one backtrack


def test_armijo_zero_gradient_trivial():
    cfg = OptimizerConfig()
    theta = np.array([2.0, 3.0])
    new, nu, accepted = armijo_step(theta, np.zeros(2), lambda v: 1.0, cfg)
    assert accepted and nu == 0.0
    assert np.array_equal(new, theta)


def test_armijo_all_backtracks_fail():
    cfg = OptimizerConfig(max_backtracks=5)
    theta = np.array([1.0])
    # constant objective: no decrease possible
    new, nu, accepted = armijo_step(theta, np.array([1.0]), lambda v: 7.0, cfg, j_current=7.0)
    assert not accepted
    assert nu == 0.0
    assert np.array_equal(new, theta)


def test_armijo_warm_start_expands():
    cfg = OptimizerConfig(step_init=1.0, backtrack=0.5, decrease_coeff=1e-4)
    theta = np.array([4.0])
    grad = np.array([2.0])  # J = t^2/... use J(t)=t^2/8 so optimum step large
    evaluate = lambda v: float(v[0]) ** 2 / 8.0
    new, nu, accepted = armijo_step(theta, grad, evaluate, cfg, j_current=2.0, step_init=0.125)
    assert accepted
    assert nu > 0.125  # walked back up the schedule


def test_optimize_zero_budget_records_initial_evaluation():
    sc = _single_target_scenario((7.0, 7.0), mu=1.0, horizon=6.0)
    hist = optimize(sc, "ellipse", [_circle(9.2, 7.0, 2.0)], OptimizerConfig(max_iters=0))
    assert len(hist.records) == 1
    assert math.isfinite(hist.records[0].cost.total)


def test_optimize_deterministic_decrease_and_reproducibility():
    sc = _single_target_scenario((7.0, 7.0), mu=1.0, horizon=6.0)
    init = [_circle(8.8, 7.0, 1.8)]
    cfg = OptimizerConfig(max_iters=4, ipa_mode="augmented")
    h1 = optimize(sc, "ellipse", init, cfg)
    h2 = optimize(sc, "ellipse", init, cfg)
    accepted = [r.cost.total for r in h1.records if r.accepted]
    assert all(b < a for a, b in zip(accepted, accepted[1:]))
    assert [r.cost.total for r in h1.records] == [r.cost.total for r in h2.records]
    assert np.array_equal(flatten_all(h1.final), flatten_all(h2.final))


def test_optimize_family_mismatch_rejected():
    sc = _single_target_scenario((7.0, 7.0))
    with pytest.raises(ValueError, match="family"):
        optimize(sc, "fourier", [_circle(9.2, 7.0, 2.0)], OptimizerConfig(max_iters=1))


def test_orientation_normalized_after_steps():
    sc = _single_target_scenario((7.0, 7.0), mu=1.0, horizon=5.0)
    init = [_circle(8.8, 7.0, 1.8)]
    hist = optimize(sc, "ellipse", init, OptimizerConfig(max_iters=3))
    for traj in hist.final:
        for p in traj.segments:
            assert 0.0 <= p.phi < math.pi


def test_degenerate_candidate_rejected_not_fatal():
    # a giant gradient that would drive the semi-axes negative must not
    # crash the search; backtracking shrinks the step until valid
    cfg = OptimizerConfig(step_init=1.0, max_backtracks=40)
    sc = _single_target_scenario((7.0, 7.0), mu=1.0, horizon=4.0)
    trajs = [_circle(8.8, 7.0, 1.5)]
    from harvestopt.hybridsim import simulate
    from harvestopt.objective import sample_cost
    from harvestopt.trajectory import with_flat_all

    theta = flatten_all(trajs)

    def evaluate(vec):
        try:
            return sample_cost(simulate(sc, with_flat_all(trajs, vec), 1), sc).total
        except Exception:
            return math.inf

    grad = np.zeros_like(theta)
    grad[2] = 100.0  # pushes radius negative at large steps
    new, nu, accepted = armijo_step(theta, grad, evaluate, cfg)
    assert accepted
    assert new[2] > 0.0


def test_default_trajectories_shapes():
    sc = _single_target_scenario((7.0, 7.0), n_agents=2)
    ell = default_trajectories(sc, family="ellipse", segments=2)
    assert len(ell) == 2 and all(t.n_segments == 2 for t in ell)
    # circles pass through the base
    for t in ell:
        p = t.segments[0]
        d = math.hypot(p.cx - 2.0, p.cy - 2.0)
        assert d == pytest.approx(p.a, rel=1e-12)
    four = default_trajectories(sc, family="fourier", harmonics=3)
    assert four[0].segments[0].gamma_x == 3
    assert np.allclose(position(four[0].segments[0], 0.0), [2.0, 2.0])
    # agents are fanned differently
    assert not np.allclose(flatten_all(four[:1]), flatten_all(four[1:]))


def test_segment_search_stops_when_no_better():
    # single target easily covered by one circle: E=2 cannot beat E=1
    sc = _single_target_scenario((5.0, 3.6), mu=1.0, horizon=8.0).with_overrides(m_constraint=10.0)
    cfg = OptimizerConfig(max_iters=2)

    def builder(e):
        return default_trajectories(sc, family="ellipse", segments=e, radius=1.6)

    result = segment_search(sc, builder, cfg, max_segments=3)
    assert result.best_segments >= 1
    assert set(result.per_segment_count) >= {1, 2}
    if not result.cap_hit:
        counts = sorted(result.per_segment_count)
        worse = result.per_segment_count[result.best_segments + 1].final_cost.total
        assert worse >= result.best.final_cost.total


def test_stochastic_mode_common_random_numbers():
    # uniform arrivals: replicated evaluation with shared seeds inside an
    # iteration; the run completes with recorded, finite costs and any
    # accepted step satisfied the per-iteration sufficient decrease
    from harvestopt.scenario import ArrivalProcess

    arr = ArrivalProcess(kind="uniform", lo=0.1, hi=0.9, resample=1.0)
    sc = _single_target_scenario((7.0, 7.0), mu=1.0, horizon=5.0, arrival=arr)
    cfg = OptimizerConfig(max_iters=3, replications=3, seed_policy="common", ipa_mode="augmented")
    hist = optimize(sc, "ellipse", [_circle(8.8, 7.0, 1.8)], cfg)
    assert len(hist.records) >= 2
    assert all(math.isfinite(r.cost.total) for r in hist.records)
    assert any(r.accepted for r in hist.records)
