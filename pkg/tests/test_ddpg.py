import numpy as np
import pytest

from derreserve.acceptance import ddpg_mechanics
from derreserve.allocators import CASES, greedy_cost_oracle, trc_dollars
from derreserve.ddpg import (AgentConfig, Batch, ReplayBuffer, Transition, TrainingDivergence,
                             actor_update, critic_target, critic_update, infer, normalize_state,
                             select_action, soft_update, train)
from derreserve.environment import EnvConfig, NormRanges, ReserveState
from derreserve.neural import AdamState, Mlp

CASE_I = CASES["I"]


def _batch(rng, n=4, size=16, done=True):
    return Batch(rng.random((size, 2 * n + 1)), rng.random((size, n)), rng.normal(size=size),
                 rng.random((size, 2 * n + 1)), np.full(size, done))


def _constant_net(dims, value, output="linear"):
    ws = [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(b) for b in dims[1:]]
    bs[-1][:] = value
    return Mlp(dims, output, weights=ws, biases=bs)


# ---------------------------------------------------------------- state and action


def test_normalize_state_case_i():
    ranges = NormRanges(r_max=(0, 200), price=(8, 16), r_tot=(0, 750))
    s = normalize_state(CASE_I, ranges)
    np.testing.assert_allclose(s[:4], [1, 1, 0.75, 1])
    np.testing.assert_allclose(s[4:8], [0.25, 0.5, 0.375, 0.75])
    assert s[8] == pytest.approx(0.8)


def test_normalize_state_degenerate_range():
    with pytest.raises(ValueError, match="price"):
        normalize_state(CASE_I, NormRanges(r_max=(0, 200), price=(10, 10), r_tot=(0, 750)))


def test_select_action_noise():
    actor = _constant_net((9, 8, 4), 0.0, "sigmoid")
    s = np.zeros(9)
    np.testing.assert_array_equal(select_action(actor, s, 0.0), np.full(4, 0.5))
    rng = np.random.default_rng(0)
    draws = np.stack([select_action(actor, s, 0.1, rng) for _ in range(2000)])
    assert 0.05 <= draws.std() <= 0.12
    wide = np.stack([select_action(actor, s, 5.0, rng) for _ in range(200)])
    assert wide.min() == 0.0 and wide.max() == 1.0


# ---------------------------------------------------------------- critic


def test_critic_target_examples():
    rng = np.random.default_rng(1)
    crit, act = _constant_net((13, 8, 1), 2.0), _constant_net((9, 8, 4), 0.0, "sigmoid")
    b = _batch(rng, done=False)
    np.testing.assert_allclose(critic_target(crit, act, b, 0.5), b.rewards + 1.0)
    np.testing.assert_allclose(critic_target(crit, act, b, 0.5, sign=-1), b.rewards - 1.0)
    np.testing.assert_allclose(critic_target(crit, act, b, 0.0), b.rewards)
    term = b._replace(dones=np.ones(16, dtype=bool))
    np.testing.assert_allclose(critic_target(crit, act, term, 0.99), b.rewards)


def test_critic_loss_is_mean_squared_error():
    crit = _constant_net((13, 8, 1), 1.0)
    b = _batch(np.random.default_rng(2))
    loss = critic_update(crit, b, np.full(16, 4.0), AdamState.for_net(crit, 1e-3))
    assert loss == pytest.approx(9.0)


def test_critic_zero_loss_leaves_parameters():
    crit = Mlp((13, 8, 1), rng=0)
    b = _batch(np.random.default_rng(3))
    y = crit.forward(np.concatenate([b.states, b.actions], axis=1))[:, 0]
    before = [p.copy() for p in crit.params()]
    assert critic_update(crit, b, y, AdamState.for_net(crit, 1e-3)) == 0.0
    for a, c in zip(before, crit.params()):
        np.testing.assert_array_equal(a, c)


def test_critic_loss_decreases_on_fixed_batch():
    crit = Mlp((13, 8, 8, 1), rng=4)
    b = _batch(np.random.default_rng(4), size=64)
    adam = AdamState.for_net(crit, 1e-3)
    losses = [critic_update(crit, b, b.rewards, adam) for _ in range(100)]
    assert losses[-1] < losses[0]
    assert np.all(np.diff(losses) <= 1e-12)


# ---------------------------------------------------------------- actor


def test_actor_constant_critic_gives_no_change():
    actor = Mlp((9, 8, 8, 4), "sigmoid", rng=5)
    before = [p.copy() for p in actor.params()]
    actor_update(actor, _constant_net((13, 8, 1), 3.0), _batch(np.random.default_rng(5)),
                 AdamState.for_net(actor, 1e-3))
    for a, c in zip(before, actor.params()):
        np.testing.assert_array_equal(a, c)


def test_actor_climbs_linear_critic():
    # Q(s, a) = sum(a): the actor should push every action up
    ws = [np.zeros((13, 1))]
    ws[0][9:, 0] = 1.0
    critic = Mlp((13, 1), weights=ws, biases=[np.zeros(1)])
    actor = Mlp((9, 8, 8, 4), "sigmoid", rng=6)
    b = _batch(np.random.default_rng(6))
    start = actor.forward(b.states).mean()
    adam = AdamState.for_net(actor, 1e-2)
    for _ in range(50):
        actor_update(actor, critic, b, adam)
    assert actor.forward(b.states).mean() > start


def test_actor_objective_rises_after_step():
    rng = np.random.default_rng(7)
    rises = 0
    for k in range(100):
        actor, critic = Mlp((9, 8, 8, 4), "sigmoid", rng=k), Mlp((13, 8, 8, 1), rng=1000 + k)
        b = _batch(rng)
        before = actor_update(actor, critic, b, AdamState.for_net(actor, 1e-4))
        after = critic.forward(np.concatenate([b.states, actor.forward(b.states)], axis=1)).mean()
        rises += after >= before - 1e-12
    assert rises >= 95


# ---------------------------------------------------------------- targets and memory


def test_soft_update_examples():
    a, b = _constant_net((2, 1), 0.0), _constant_net((2, 1), 1.0)
    soft_update(a, b, 0.9)
    assert a.biases[-1][0] == pytest.approx(0.1)
    soft_update(a, b, 0.0)
    assert a.biases[-1][0] == 1.0
    c = _constant_net((2, 1), 5.0)
    soft_update(c, b, 1.0)
    assert c.biases[-1][0] == 5.0
    with pytest.raises(ValueError):
        soft_update(_constant_net((3, 1), 0.0), b, 0.5)


def test_replay_rejects_bad_transitions():
    buf = ReplayBuffer(4, 3, 1)
    ok = Transition(np.zeros(3), np.array([0.5]), 1.0, np.zeros(3), True)
    buf.add(ok)
    with pytest.raises(ValueError):
        buf.add(Transition(np.zeros(3), np.array([1.5]), 1.0, np.zeros(3), True))
    with pytest.raises(ValueError):
        buf.add(Transition(np.zeros(3), np.array([0.5]), np.nan, np.zeros(3), True))
    with pytest.raises(ValueError):
        buf.sample(2, np.random.default_rng(0))


def test_mechanics_checks_pass():
    res = ddpg_mechanics(seed=0)
    assert res.passed, res.report()


def test_agent_config_invariants():
    with pytest.raises(ValueError):
        AgentConfig(batch_size=2000, replay_capacity=1500)
    with pytest.raises(ValueError):
        AgentConfig(gamma=1.5)
    cfg = AgentConfig(episodes=11, noise_std=0.3, noise_std_final=0.01)
    assert cfg.noise_at(0) == 0.3
    assert cfg.noise_at(10) == pytest.approx(0.01)


# ---------------------------------------------------------------- training loop


def test_no_updates_before_batch_is_full(ieee34):
    res = train(EnvConfig(), AgentConfig(episodes=1), ieee34)
    assert res.updates == 0 and len(res.log) == 1
    res = train(EnvConfig(), AgentConfig(episodes=12, batch_size=10, replay_capacity=20,
                                         updates_per_step=2), ieee34)
    assert res.updates == 2 * 3


def test_training_is_deterministic(ieee34):
    cfg = AgentConfig(episodes=30, batch_size=10, replay_capacity=20)
    a, b = train(EnvConfig(), cfg, ieee34), train(EnvConfig(), cfg, ieee34)
    assert repr(a.log) == repr(b.log)
    for p, q in zip(a.agent.actor.params(), b.agent.actor.params()):
        np.testing.assert_array_equal(p, q)


def test_progress_callback(ieee34):
    seen = []
    train(EnvConfig(), AgentConfig(episodes=3), ieee34, progress=lambda ep, row, ag: seen.append(ep))
    assert seen == [0, 1, 2]


def test_divergence_is_reported(ieee34):
    cfg = AgentConfig(episodes=20, batch_size=5, replay_capacity=10, critic_lr=1e300,
                      actor_lr=1e300, standardize_rewards=False)
    with np.errstate(all="ignore"), pytest.raises((TrainingDivergence, FloatingPointError)):
        train(EnvConfig(), cfg, ieee34)


def test_der_count_mismatch(ieee34):
    three = EnvConfig(r_max_low=(50,) * 3, r_max_high=(200,) * 3, price_low=(8,) * 3,
                      price_high=(16,) * 3, base_injection_kw=(0,) * 3)
    with pytest.raises(ValueError):
        train(three, AgentConfig(episodes=1), ieee34)


def test_cost_only_training_finds_cheap_allocation(ieee34):
    cfg = EnvConfig.collapsed(CASE_I, beta_r=0, beta_p=0, beta_v=0)
    res = train(cfg, AgentConfig(episodes=300, seed=0), ieee34)
    trc = trc_dollars(CASE_I, infer(res.agent.actor, CASE_I, cfg))
    best = trc_dollars(CASE_I, greedy_cost_oracle(CASE_I))
    assert best == pytest.approx(67.5)
    assert trc <= 1.05 * best


def test_infer_returns_feasible_allocation(ieee34):
    actor = Mlp((9, 8, 8, 4), "sigmoid", rng=0)
    timings = []
    a = infer(actor, CASES["II"], EnvConfig(), timings)
    assert a.r.sum() == pytest.approx(350) and np.all(a.r <= CASES["II"].r_max)
    assert len(timings) == 1
