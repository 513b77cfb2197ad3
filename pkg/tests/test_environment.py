import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from derreserve.allocators import CASES
from derreserve.environment import (EnvConfig, InfeasibleStateError, ReserveAction, ReserveEnv,
                                    ReserveState, project_action, reserve_cost_component,
                                    reserve_violation_component, reward, sample_state, step,
                                    to_action, voltage_node_reward)

CASE_I, CASE_II = CASES["I"], CASES["II"]
PROPOSED_I = ReserveAction([165.03, 180.87, 150.0, 104.10])
PROPOSED_II = ReserveAction([98.11, 80.0, 100.0, 71.89])


@st.composite
def states(draw, n=None):
    n = n or draw(st.integers(1, 6))
    r_max = np.array(draw(st.lists(st.floats(1.0, 500.0), min_size=n, max_size=n)))
    prices = np.array(draw(st.lists(st.floats(0.0, 30.0), min_size=n, max_size=n)))
    frac = draw(st.floats(1e-3, 1.0))
    return ReserveState(r_max, prices, frac * r_max.sum())


# ---------------------------------------------------------------- states


def test_state_rejects_infeasible_request():
    with pytest.raises(InfeasibleStateError):
        ReserveState([10, 10], [1, 1], 25)
    with pytest.raises(InfeasibleStateError):
        ReserveState([10, 10], [1, 1], 0)
    with pytest.raises(InfeasibleStateError):
        ReserveState([10, -1], [1, 1], 5)


def test_collapsed_ranges_give_that_state():
    cfg = EnvConfig.collapsed(CASE_I)
    s = sample_state(7, cfg)
    np.testing.assert_array_equal(s.r_max, CASE_I.r_max)
    np.testing.assert_array_equal(s.prices, CASE_I.prices)
    assert s.r_tot == CASE_I.r_tot


def test_sampling_is_seeded():
    a, b = sample_state(3, EnvConfig()), sample_state(3, EnvConfig())
    np.testing.assert_array_equal(a.r_max, b.r_max)
    assert a.r_tot == b.r_tot


def test_sampled_requests_are_feasible():
    rng = np.random.default_rng(0)
    cfg = EnvConfig()
    for _ in range(10_000):
        s = sample_state(rng, cfg)
        assert 0 < s.r_tot <= s.r_max.sum()
        assert np.all((50 <= s.r_max) & (s.r_max <= 200))
        assert np.all((8 <= s.prices) & (s.prices <= 16))


def test_empty_range_rejected():
    with pytest.raises(ValueError):
        sample_state(0, EnvConfig(r_max_low=200, r_max_high=50))


def test_config_invariants():
    with pytest.raises(ValueError):
        EnvConfig(v_lb=1.0)
    with pytest.raises(ValueError):
        EnvConfig(beta_p=-1)


# ---------------------------------------------------------------- projection


def test_projection_symmetric():
    s = ReserveState([100, 100], [1, 1], 100)
    np.testing.assert_allclose(project_action([0.5, 0.5], s).r, [50, 50])


def test_projection_pins_cap():
    s = ReserveState([100, 10], [1, 1], 105)
    np.testing.assert_allclose(project_action([0.5, 0.9], s).r, [95, 10])


def test_projection_equal_raw_is_capacity_split():
    np.testing.assert_allclose(project_action(np.full(4, 0.3), CASE_I).r, [160, 160, 120, 160])


def test_projection_zero_raw_falls_back_to_capacity():
    np.testing.assert_allclose(project_action(np.zeros(4), CASE_I).r, [160, 160, 120, 160])


def test_projection_fuzz_many():
    rng = np.random.default_rng(5)
    for _ in range(100_000):
        n = rng.integers(1, 7)
        r_max = rng.uniform(1, 300, n)
        s = ReserveState(r_max, np.ones(n), rng.uniform(1e-3, 1) * r_max.sum())
        raw = rng.uniform(-0.2, 1.2, n) * (rng.random(n) > 0.1)
        r = project_action(raw, s).r
        assert abs(r.sum() - s.r_tot) <= 1e-6
        assert np.all(r >= 0) and np.all(r <= s.r_max)


@settings(max_examples=300, deadline=None)
@given(states(), st.data())
def test_projection_feasible(state, data):
    raw = np.array(data.draw(st.lists(st.floats(0, 1), min_size=state.n, max_size=state.n)))
    r = project_action(raw, state).r
    assert r.sum() == pytest.approx(state.r_tot, abs=1e-6)
    assert np.all(r >= 0)
    assert np.all(r <= state.r_max)


@settings(max_examples=300, deadline=None)
@given(states(), st.data())
def test_projection_idempotent(state, data):
    raw = np.array(data.draw(st.lists(st.floats(0, 1), min_size=state.n, max_size=state.n)))
    r = project_action(raw, state).r
    again = project_action(r / state.r_max, state).r
    np.testing.assert_allclose(again, r, atol=1e-9, rtol=0)


def test_disabled_projection_only_rescales():
    cfg = EnvConfig(project=False)
    a = to_action([1.0, 1.0, 1.0, 0.0], CASE_I, cfg)
    assert a.r.sum() == pytest.approx(600)
    assert reserve_violation_component(CASE_I, a) > 0


# ---------------------------------------------------------------- reward components


def test_cost_component_examples():
    assert reserve_cost_component(CASE_I, PROPOSED_I) == pytest.approx(6928.14 / 600, abs=1e-3)
    assert reserve_cost_component(CASE_II, PROPOSED_II) == pytest.approx(3840 / 350, abs=1e-3)
    cap = ReserveAction([160, 160, 120, 160])
    assert reserve_cost_component(CASE_I, cap) == pytest.approx(11.8, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(states(), st.floats(0.1, 30), st.data())
def test_cost_component_equal_prices(state, p, data):
    s = ReserveState(state.r_max, np.full(state.n, p), state.r_tot)
    raw = np.array(data.draw(st.lists(st.floats(0, 1), min_size=s.n, max_size=s.n)))
    assert reserve_cost_component(s, project_action(raw, s)) == pytest.approx(p, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(states(), st.data())
def test_cost_component_permutation_invariant(state, data):
    raw = np.array(data.draw(st.lists(st.floats(0, 1), min_size=state.n, max_size=state.n)))
    a = project_action(raw, state)
    perm = np.array(data.draw(st.permutations(range(state.n))))
    s2 = ReserveState(state.r_max[perm], state.prices[perm], state.r_tot)
    assert reserve_cost_component(s2, ReserveAction(a.r[perm])) == pytest.approx(
        reserve_cost_component(state, a), rel=1e-12)


@pytest.mark.parametrize("r, expected", [
    ([10, 10, 10], 0.0),
    ([25, 10, 10], 5.0),
    ([25, 30, 10], 30.0),
])
def test_violation_component(r, expected):
    s = ReserveState([20, 20, 20], [1, 1, 1], 30)
    assert reserve_violation_component(s, r) == expected


def test_voltage_node_reward_examples():
    cfg = EnvConfig()
    assert voltage_node_reward(1.0, cfg) == 1.0
    assert voltage_node_reward(1.05, cfg) == pytest.approx(0.0, abs=1e-12)
    assert voltage_node_reward(0.95, cfg) == pytest.approx(0.0, abs=1e-12)
    assert voltage_node_reward(1.03, cfg) == pytest.approx(0.4)
    assert voltage_node_reward(1.06, cfg) == -1.0
    assert voltage_node_reward(0.90, cfg) == -1.0


def test_voltage_node_reward_shape():
    cfg = EnvConfig()
    v = np.linspace(0.95, 1.05, 100_001)
    r = voltage_node_reward(v, cfg)
    assert np.max(np.abs(np.diff(r))) < 1e-3            # continuous on the band
    assert np.all(r[v != 1.0] < 1.0)
    assert r.max() == 1.0


@settings(max_examples=200)
@given(st.floats(0.0, 2.0))
def test_voltage_node_reward_bounded(v):
    assert -1.0 <= voltage_node_reward(v, EnvConfig()) <= 1.0


# ---------------------------------------------------------------- reward through the feeder


def test_reward_total_identity(ieee34):
    cfg = EnvConfig()
    rb = reward(CASE_I, PROPOSED_I, cfg, ieee34)
    assert rb.converged
    assert rb.violation_term == 0
    assert rb.total == -rb.cost_term - cfg.beta_r * rb.violation_term \
        - cfg.beta_p * rb.loss_term + cfg.beta_v * rb.voltage_term


def test_zero_weights_leave_cost_only(ieee34):
    cfg = EnvConfig(beta_r=0, beta_p=0, beta_v=0)
    rb = reward(CASE_II, PROPOSED_II, cfg, ieee34)
    assert rb.total == -rb.cost_term


def test_reward_linear_in_cost(ieee34):
    cfg = EnvConfig()
    cheap = ReserveState(CASE_I.r_max, CASE_I.prices, CASE_I.r_tot)
    dear = ReserveState(CASE_I.r_max, CASE_I.prices + 1.0, CASE_I.r_tot)
    a = reward(cheap, PROPOSED_I, cfg, ieee34)
    b = reward(dear, PROPOSED_I, cfg, ieee34)
    assert b.cost_term == pytest.approx(a.cost_term + 1.0)
    assert b.total == pytest.approx(a.total - 1.0)


def test_nonconvergence_uses_penalty(ieee34, monkeypatch):
    import derreserve.environment as env
    real = env.solve
    monkeypatch.setattr(env, "solve", lambda m, inj: real(m, inj, max_iter=1))
    rb = reward(CASE_I, PROPOSED_I, EnvConfig(), ieee34)
    assert not rb.converged
    assert rb.voltage_term == EnvConfig().nonconvergence_penalty
    assert rb.loss_term == 0.0
    assert np.isfinite(rb.total)


def test_reward_finite_on_random_pairs(ieee34):
    rng = np.random.default_rng(11)
    cfg = EnvConfig()
    for _ in range(1000):
        s = sample_state(rng, cfg)
        rb = reward(s, project_action(rng.random(4), s), cfg, ieee34)
        assert np.isfinite(rb.total)


def test_step_terminates_after_t(ieee34):
    _, _, done = step(CASE_I, np.full(4, 0.5), EnvConfig(), ieee34)
    assert done
    cfg = EnvConfig(episode_length=2)
    _, r1, d1 = step(CASE_I, np.full(4, 0.5), cfg, ieee34, t=0)
    _, r2, d2 = step(CASE_I, np.full(4, 0.5), cfg, ieee34, t=1)
    assert (d1, d2) == (False, True)
    assert r1 == r2


def test_env_wrapper(ieee34):
    env = ReserveEnv(ieee34, EnvConfig(), seed=4)
    with pytest.raises(RuntimeError):
        env.step(np.zeros(4))
    s = env.reset()
    s2, rb, done = env.step(np.full(4, 0.5))
    assert s2 is s and done and np.isfinite(rb.total)
    with pytest.raises(ValueError):
        ReserveEnv(ieee34, EnvConfig(r_max_low=(50,) * 3, r_max_high=(200,) * 3,
                                     price_low=(8,) * 3, price_high=(16,) * 3,
                                     base_injection_kw=(0,) * 3))
