"""DDPG agent: actor/critic with target copies, replay memory and Gaussian exploration."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import environment as env
from .environment import EnvConfig, NormRanges, ReserveAction, ReserveState
from .feeder import FeederModel
from .neural import AdamState, Mlp, adam_step


class TrainingDivergence(FloatingPointError):
    """Raised when network parameters stop being finite; carries the last good agent."""

    def __init__(self, message, agent=None, log=None):
        super().__init__(message)
        self.agent = agent
        self.log = log


@dataclass(frozen=True)
class AgentConfig:
    actor_lr: float = 0.001
    critic_lr: float = 0.002
    gamma: float = 0.99
    replay_capacity: int = 1500
    batch_size: int = 200
    hidden: tuple[int, ...] = (8, 8)
    actor_output: str = "sigmoid"
    critic_output: str = "linear"
    noise_std: float = 0.3
    noise_std_final: float = 0.01
    polyak: float = 0.995
    episodes: int = 1500
    steps_per_episode: int | None = None   # None: use the environment's episode length
    seed: int = 0
    # +1 gives y = r + gamma Q'; -1 reproduces the literal minus-sign target
    target_sign: float = 1.0
    # critic learns on (r - shift) / scale; frozen from the warm-up buffer
    standardize_rewards: bool = True
    updates_per_step: int = 5
    # output layers start uniform in +-final_init (None: same rule as hidden layers)
    final_init: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0 < self.batch_size <= self.replay_capacity:
            raise ValueError("batch size must be positive and no larger than the replay capacity")
        if not 0.0 <= self.polyak <= 1.0:
            raise ValueError("polyak retention must lie in [0, 1]")
        if self.episodes < 0:
            raise ValueError("episodes must be non-negative")

    def noise_at(self, episode: int) -> float:
        """Exploration std, decayed linearly from noise_std to noise_std_final."""
        if self.episodes <= 1:
            return self.noise_std
        frac = min(episode / (self.episodes - 1), 1.0)
        return self.noise_std + (self.noise_std_final - self.noise_std) * frac


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten first."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def add(self, tr: Transition) -> None:
        vals = (tr.state, tr.action, tr.next_state)
        if not all(np.all(np.isfinite(v)) for v in vals) or not np.isfinite(tr.reward):
            raise ValueError("transition contains non-finite entries")
        if np.any(tr.action < 0) or np.any(tr.action > 1):
            raise ValueError("raw action must lie in [0, 1]")
        i = self.cursor
        self.states[i] = tr.state
        self.actions[i] = tr.action
        self.rewards[i] = tr.reward
        self.next_states[i] = tr.next_state
        self.dones[i] = tr.done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw without replacement over stored slots."""
        if batch_size > self.size:
            raise ValueError(f"cannot draw {batch_size} from {self.size} stored transitions")
        return rng.choice(self.size, size=batch_size, replace=False)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = self.indices(batch_size, rng)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx])


def normalize_state(state: ReserveState, ranges: NormRanges | EnvConfig) -> np.ndarray:
    """Min-max scale [r_max..., prices..., r_tot] by the configured ranges."""
    if isinstance(ranges, EnvConfig):
        ranges = ranges.norm_ranges()
    parts = []
    for vals, (lo, hi), name in ((state.r_max, ranges.r_max, "r_max"),
                                 (state.prices, ranges.price, "price"),
                                 (np.array([state.r_tot]), ranges.r_tot, "r_tot")):
        if not hi > lo:
            raise ValueError(f"degenerate normalization range for {name}: [{lo}, {hi}]")
        parts.append((np.asarray(vals, dtype=float) - lo) / (hi - lo))
    return np.concatenate(parts)


def select_action(actor: Mlp, state_vec: np.ndarray, noise_std: float,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Actor output plus i.i.d. Gaussian noise, clipped to [0, 1]."""
    a = actor.forward(state_vec)
    if noise_std > 0:
        a = a + rng.normal(0.0, noise_std, size=a.shape)
    return np.clip(a, 0.0, 1.0)


def critic_target(critic_targ: Mlp, actor_targ: Mlp, batch: Batch, gamma: float,
                  sign: float = 1.0) -> np.ndarray:
    """Bellman targets from the target nets; terminal transitions get y = r."""
    a2 = actor_targ.forward(batch.next_states)
    q2 = critic_targ.forward(np.concatenate([batch.next_states, a2], axis=1))[:, 0]
    return batch.rewards + sign * gamma * (1.0 - batch.dones) * q2


def critic_update(critic: Mlp, batch: Batch, targets: np.ndarray, adam: AdamState) -> float:
    """One Adam descent step on the mean squared Bellman error; returns the pre-step loss."""
    x = np.concatenate([batch.states, batch.actions], axis=1)
    diff = critic.forward(x)[:, 0] - np.asarray(targets, dtype=float)
    loss = float(np.mean(diff ** 2))
    if not np.isfinite(loss):
        raise FloatingPointError("critic loss is not finite")
    grads, _ = critic.backward(x, (2.0 * diff / len(diff))[:, None])
    adam_step(adam, critic, grads, "descent")
    return loss


def actor_update(actor: Mlp, critic: Mlp, batch: Batch, adam: AdamState) -> float:
    """One Adam ascent step on mean Q(s, actor(s)); returns the pre-step objective."""
    s = batch.states
    a = actor.forward(s)
    x = np.concatenate([s, a], axis=1)
    q = critic.forward(x)[:, 0]
    _, dx = critic.backward(x, np.full((len(s), 1), 1.0 / len(s)))
    grads, _ = actor.backward(s, dx[:, s.shape[1]:])
    adam_step(adam, actor, grads, "ascent")
    return float(np.mean(q))


def soft_update(target: Mlp, main: Mlp, retention: float) -> Mlp:
    """target <- retention * target + (1 - retention) * main, in place."""
    if target.layer_dims != main.layer_dims:
        raise ValueError("target and main networks have different shapes")
    for pt, pm in zip(target.params(), main.params()):
        pt *= retention
        pt += (1.0 - retention) * pm
    return target


@dataclass
class Agent:
    actor: Mlp
    critic: Mlp
    actor_targ: Mlp
    critic_targ: Mlp
    env_config: EnvConfig
    agent_config: AgentConfig

    @classmethod
    def create(cls, env_config: EnvConfig, agent_config: AgentConfig,
               rng: np.random.Generator) -> Agent:
        n = env_config.n
        actor = Mlp((2 * n + 1, *agent_config.hidden, n), agent_config.actor_output, rng=rng)
        critic = Mlp((3 * n + 1, *agent_config.hidden, 1), agent_config.critic_output, rng=rng)
        if agent_config.final_init is not None:
            for net in (actor, critic):
                w = net.weights[-1]
                net.weights[-1] = rng.uniform(-agent_config.final_init, agent_config.final_init, w.shape)
                net.biases[-1] = rng.uniform(-agent_config.final_init, agent_config.final_init,
                                             net.biases[-1].shape)
        return cls(actor, critic, actor.copy(), critic.copy(), env_config, agent_config)

    def nets(self) -> dict[str, Mlp]:
        return {"actor": self.actor, "critic": self.critic,
                "actor_targ": self.actor_targ, "critic_targ": self.critic_targ}

    def all_finite(self) -> bool:
        return all(net.all_finite() for net in self.nets().values())


@dataclass
class TrainResult:
    agent: Agent
    log: list[dict] = field(default_factory=list)
    updates: int = 0
    reward_shift: float = 0.0
    reward_scale: float = 1.0
    buffer: ReplayBuffer | None = None

    def episode_rewards(self) -> np.ndarray:
        return np.array([row["total_reward"] for row in self.log])


def train(env_config: EnvConfig, agent_config: AgentConfig, model: FeederModel,
          progress=None) -> TrainResult:
    """Run the DDPG episode loop.

    Gradient updates start once the replay memory holds a full batch and then
    happen ``updates_per_step`` times per environment step. ``progress`` is
    called as ``progress(episode, log_row, agent)``. Determinism: every random draw comes
    from streams spawned off ``agent_config.seed``.
    """
    if agent_config.steps_per_episode is not None:
        env_config = EnvConfig(**{**env_config.__dict__,
                                  "episode_length": agent_config.steps_per_episode})
    if env_config.n != len(model.ders):
        raise ValueError(f"config describes {env_config.n} DERs, feeder has {len(model.ders)}")
    init_rng, state_rng, noise_rng, batch_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(agent_config.seed).spawn(4))
    agent = Agent.create(env_config, agent_config, init_rng)
    actor_adam = AdamState.for_net(agent.actor, agent_config.actor_lr)
    critic_adam = AdamState.for_net(agent.critic, agent_config.critic_lr)
    n = env_config.n
    buffer = ReplayBuffer(agent_config.replay_capacity, 2 * n + 1, n)
    ranges = env_config.norm_ranges()
    result = TrainResult(agent, buffer=buffer)
    shift, scale = 0.0, 1.0

    for ep in range(agent_config.episodes):
        state = env.sample_state(state_rng, env_config)
        s = normalize_state(state, ranges)
        sigma = agent_config.noise_at(ep)
        rows = []
        critic_loss = actor_obj = float("nan")
        for t in range(env_config.episode_length):
            raw = select_action(agent.actor, s, sigma, noise_rng)
            next_state, rb, done = env.step(state, raw, env_config, model, t)
            s2 = normalize_state(next_state, ranges)
            buffer.add(Transition(s, raw, rb.total, s2, done))
            rows.append(rb)
            for _ in range(agent_config.updates_per_step if len(buffer) >= agent_config.batch_size else 0):
                if result.updates == 0 and agent_config.standardize_rewards:
                    stored = buffer.rewards[:len(buffer)]
                    shift, scale = float(stored.mean()), float(stored.std()) or 1.0
                    result.reward_shift, result.reward_scale = shift, scale
                batch = buffer.sample(agent_config.batch_size, batch_rng)
                batch = batch._replace(rewards=(batch.rewards - shift) / scale)
                y = critic_target(agent.critic_targ, agent.actor_targ, batch,
                                  agent_config.gamma, agent_config.target_sign)
                critic_loss = critic_update(agent.critic, batch, y, critic_adam)
                actor_obj = actor_update(agent.actor, agent.critic, batch, actor_adam)
                soft_update(agent.actor_targ, agent.actor, agent_config.polyak)
                soft_update(agent.critic_targ, agent.critic, agent_config.polyak)
                result.updates += 1
                if not agent.all_finite():
                    raise TrainingDivergence(f"non-finite parameters at episode {ep}",
                                             agent, result.log)
            state, s = next_state, s2
            if done:
                break
        result.log.append({
            "episode": ep,
            "total_reward": float(sum(r.total for r in rows)),
            "cost_term": float(np.mean([r.cost_term for r in rows])),
            "violation_term": float(np.mean([r.violation_term for r in rows])),
            "loss_term": float(np.mean([r.loss_term for r in rows])),
            "voltage_term": float(np.mean([r.voltage_term for r in rows])),
            "noise_std": sigma,
            "critic_loss": critic_loss,
            "actor_objective": actor_obj,
        })
        if progress is not None:
            progress(ep, result.log[-1], agent)
    return result


def infer(actor: Mlp, state: ReserveState, env_config: EnvConfig,
          timings: list | None = None) -> ReserveAction:
    """Deterministic policy: normalize, forward, project. Appends seconds to ``timings``."""
    t0 = time.perf_counter()
    raw = actor.forward(normalize_state(state, env_config.norm_ranges()))
    action = env.to_action(raw, state, env_config)
    if timings is not None:
        timings.append(time.perf_counter() - t0)
    return action


def config_dict(agent_config: AgentConfig) -> dict:
    return asdict(agent_config)
