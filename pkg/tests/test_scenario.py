import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harvestopt.fixtures import fixture
from harvestopt.scenario import (
    ArrivalProcess,
    ScenarioFormatError,
    ScenarioValidationError,
    export_scenario,
    load_scenario,
    realize_arrivals,
    replication_rng,
    validate_scenario,
)

PAPER_CONFIG = {
    "mission": {"l1": 20.0, "l2": 20.0},
    "base": {"x": 10.0, "y": 10.0},
    "targets": [
        {
            "x": 10.0 + 5.0 * np.cos(k * np.pi / 4),
            "y": 10.0 + 5.0 * np.sin(k * np.pi / 4),
            "q": 1.0,
            "arrival": {"kind": "constant", "rate": 0.5},
        }
        for k in range(8)
    ],
    "agents": {"count": 2, "family": "fourier", "segments": 1, "harmonics": 5},
    "rates": {"mu": 50.0, "beta": 500.0},
    "ranges": {"r": 1.0, "r_base": 1.0},
    "weights": {"alpha": 0.5, "m_idle": 1.0, "m_constraint": 1000.0},
    "sim": {"horizon": 100.0, "step": 0.001, "event_tol": 1e-9, "seed": 42},
}


def test_load_benchmark_config():
    sc = load_scenario(json.dumps(PAPER_CONFIG))
    assert sc.n_targets == 8
    assert sc.n_agents == 2
    assert np.all(sc.mu == 50.0)
    assert np.all(sc.beta == 500.0)
    assert sc.alpha == 0.5
    assert np.all(sc.r == 1.0)
    assert sc.m_idle == 1.0
    assert sc.horizon == 100.0
    assert validate_scenario(sc) == []


def test_defaults_applied():
    cfg = json.loads(json.dumps(PAPER_CONFIG))
    del cfg["sim"]["step"]
    del cfg["sim"]["event_tol"]
    del cfg["weights"]["m_constraint"]
    sc = load_scenario(json.dumps(cfg))
    assert sc.step == 1e-3
    assert sc.event_tol == 1e-9
    assert sc.m_constraint == 1e3


def test_zero_targets_rejected():
    cfg = json.loads(json.dumps(PAPER_CONFIG))
    cfg["targets"] = []
    with pytest.raises(ScenarioValidationError, match="M must be >= 1"):
        load_scenario(json.dumps(cfg))


def test_target_too_close_to_base_rejected():
    cfg = json.loads(json.dumps(PAPER_CONFIG))
    # distance r + r_base - 0.1: collection and delivery regions overlap
    cfg["targets"][0]["x"] = 10.0 + 1.9
    cfg["targets"][0]["y"] = 10.0
    with pytest.raises(ScenarioValidationError) as err:
        load_scenario(json.dumps(cfg))
    assert any(v.code == "TargetBaseRangeOverlap" for v in err.value.violations)


def test_parse_error_names_key():
    with pytest.raises(ScenarioFormatError, match="rates.mu"):
        cfg = json.loads(json.dumps(PAPER_CONFIG))
        del cfg["rates"]["mu"]
        load_scenario(json.dumps(cfg))
    with pytest.raises(ScenarioFormatError, match="<root>"):
        load_scenario("not json {")


def test_validate_alpha_out_of_range():
    sc = fixture("paper-8t2a-det").scenario
    bad = sc.with_overrides(alpha=1.5)
    codes = [v.code for v in validate_scenario(bad)]
    assert codes == ["WeightOutOfRange"]


def test_validate_target_outside_mission():
    sc = fixture("paper-8t2a-det").scenario
    bad = sc.with_overrides(l1=5.0, l2=5.0)
    codes = {v.code for v in validate_scenario(bad)}
    assert "TargetOutsideMission" in codes


def test_paper_fixture_valid():
    for name in ("paper-8t2a-det", "paper-8t2a-stoch", "one-target-crossing"):
        assert validate_scenario(fixture(name).scenario) == []


def test_roundtrip_identity():
    sc = load_scenario(json.dumps(PAPER_CONFIG))
    sc2 = load_scenario(export_scenario(sc))
    assert sc2.l1 == sc.l1 and sc2.l2 == sc.l2
    assert np.array_equal(sc2.base, sc.base)
    assert np.array_equal(sc2.mu, sc.mu)
    assert np.array_equal(sc2.beta, sc.beta)
    assert np.array_equal(sc2.r, sc.r)
    assert np.array_equal(sc2.r_base, sc.r_base)
    assert (sc2.alpha, sc2.m_idle, sc2.m_constraint) == (sc.alpha, sc.m_idle, sc.m_constraint)
    assert (sc2.horizon, sc2.step, sc2.event_tol, sc2.seed) == (sc.horizon, sc.step, sc.event_tol, sc.seed)
    for a, b in zip(sc.targets, sc2.targets):
        assert np.array_equal(a.position, b.position)
        assert a.weight == b.weight
        assert a.arrival == b.arrival
    # byte-level stability of the canonical form
    assert export_scenario(sc) == export_scenario(sc2)


@st.composite
def scenario_docs(draw):
    """Random configs, some valid and some violating single invariants."""
    m = draw(st.integers(1, 4))
    doc = json.loads(json.dumps(PAPER_CONFIG))
    doc["targets"] = doc["targets"][:m]
    doc["agents"]["count"] = draw(st.integers(1, 3))
    doc["weights"]["alpha"] = draw(st.floats(-0.5, 1.5, allow_nan=False))
    doc["ranges"]["r"] = draw(st.sampled_from([0.5, 1.0, 2.0]))
    doc["targets"][0]["x"] = draw(st.floats(-2.0, 22.0, allow_nan=False))
    doc["weights"]["m_idle"] = draw(st.sampled_from([0.0, 1.0, -1.0]))
    return doc


@given(scenario_docs())
@settings(max_examples=60, deadline=None)
def test_validation_matches_invariants(doc):
    """validate_scenario is empty exactly when every invariant holds."""
    try:
        sc = load_scenario(json.dumps(doc))
    except ScenarioValidationError as err:
        assert err.violations
        return
    except ScenarioFormatError:
        return
    violations = validate_scenario(sc)
    assert violations == []
    assert 0.0 <= sc.alpha <= 1.0
    assert sc.m_idle >= 0
    for t in sc.targets:
        assert 0 <= t.position[0] <= sc.l1 and 0 <= t.position[1] <= sc.l2
        d = float(np.hypot(*(t.position - sc.base)))
        assert all(d > sc.r[t.index, j] + sc.r_base[j] for j in range(sc.n_agents))


def test_uniform_schedule_draws_and_jump_times():
    proc = ArrivalProcess(kind="uniform", lo=0.1, hi=0.9, resample=1.0)
    sched = realize_arrivals(proc, 10.0, replication_rng(5, 0))
    assert len(sched.times) == 10
    assert np.all(sched.rates >= 0.1) and np.all(sched.rates <= 0.9)
    assert np.array_equal(sched.jump_times(10.0), np.arange(1.0, 10.0))
    # integral is exact piecewise sum
    assert np.isclose(sched.integral(10.0), sched.rates.sum())
    assert np.isclose(sched.integral(2.5), sched.rates[0] + sched.rates[1] + 0.5 * sched.rates[2])


def test_piecewise_schedule():
    proc = ArrivalProcess(kind="piecewise", breakpoints=((0.0, 0.5), (5.0, 0.8)))
    sched = realize_arrivals(proc, 10.0, replication_rng(5, 0))
    assert sched.rate_at(1.0) == 0.5
    assert sched.rate_at(6.0) == 0.8
    assert np.isclose(sched.integral(10.0), 0.5 * 5 + 0.8 * 5)


def test_replication_rng_independent_and_reproducible():
    a = replication_rng(9, 0).uniform(size=4)
    b = replication_rng(9, 0).uniform(size=4)
    c = replication_rng(9, 1).uniform(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
