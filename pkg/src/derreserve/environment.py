"""Reserve-allocation environment: state sampling, action projection and reward."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .feeder import FeederModel
from .powerflow import der_injections, solve

N_DERS = 4


class InfeasibleStateError(ValueError):
    pass


@dataclass(frozen=True)
class ReserveState:
    """Available reserve per DER (kW), bid price per DER (cents/kWh), requested total (kW)."""
    r_max: np.ndarray
    prices: np.ndarray
    r_tot: float

    def __post_init__(self):
        r_max = np.asarray(self.r_max, dtype=float)
        prices = np.asarray(self.prices, dtype=float)
        object.__setattr__(self, "r_max", r_max)
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "r_tot", float(self.r_tot))
        if r_max.shape != prices.shape or r_max.ndim != 1:
            raise InfeasibleStateError("r_max and prices must be vectors of equal length")
        if np.any(r_max <= 0):
            raise InfeasibleStateError(f"available reserves must be positive: {r_max}")
        if np.any(prices < 0):
            raise InfeasibleStateError(f"prices must be non-negative: {prices}")
        if not 0 < self.r_tot <= r_max.sum() * (1 + 1e-12):
            raise InfeasibleStateError(
                f"requested reserve {self.r_tot} kW is outside (0, {r_max.sum()}] kW")

    @property
    def n(self) -> int:
        return len(self.r_max)


@dataclass(frozen=True)
class ReserveAction:
    r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float))


@dataclass(frozen=True)
class RewardBreakdown:
    cost_term: float
    violation_term: float
    loss_term: float
    voltage_term: float
    total: float
    converged: bool = True


@dataclass(frozen=True)
class NormRanges:
    r_max: tuple[float, float]
    price: tuple[float, float]
    r_tot: tuple[float, float]


def _vec(x, n=N_DERS):
    return tuple(float(v) for v in x) if isinstance(x, (Sequence, np.ndarray)) else (float(x),) * n


@dataclass(frozen=True)
class EnvConfig:
    beta_r: float = 1.0
    beta_p: float = 0.01
    beta_v: float = 1.0
    v_ref: float = 1.0
    v_ub: float = 1.05
    v_lb: float = 0.95
    voltage_penalty: float = -1.0
    nonconvergence_penalty: float = -10.0
    r_max_low: tuple[float, ...] = (50.0,) * N_DERS
    r_max_high: tuple[float, ...] = (200.0,) * N_DERS
    price_low: tuple[float, ...] = (8.0,) * N_DERS
    price_high: tuple[float, ...] = (16.0,) * N_DERS
    r_tot_low: float = 0.0
    r_tot_high: float = 800.0
    episode_length: int = 1
    base_injection_kw: tuple[float, ...] = (0.0,) * N_DERS
    project: bool = True
    # normalization ranges; None falls back to the sampling ranges
    norm_r_max: tuple[float, float] | None = None
    norm_price: tuple[float, float] | None = None
    norm_r_tot: tuple[float, float] | None = None

    def __post_init__(self):
        for name in ("r_max_low", "r_max_high", "price_low", "price_high", "base_injection_kw"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        for name in ("norm_r_max", "norm_price", "norm_r_tot"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, (float(val[0]), float(val[1])))
        if not self.v_lb < self.v_ref < self.v_ub:
            raise ValueError("voltage band must satisfy v_lb < v_ref < v_ub")
        if min(self.beta_r, self.beta_p, self.beta_v) < 0:
            raise ValueError("reward weights must be non-negative")
        if self.episode_length < 1:
            raise ValueError("episode_length must be at least 1")
        lens = {len(self.r_max_low), len(self.r_max_high), len(self.price_low),
                len(self.price_high), len(self.base_injection_kw)}
        if len(lens) != 1:
            raise ValueError("per-DER ranges must all have the same length")

    @property
    def n(self) -> int:
        return len(self.r_max_low)

    def norm_ranges(self) -> NormRanges:
        return NormRanges(
            r_max=self.norm_r_max or (min(self.r_max_low), max(self.r_max_high)),
            price=self.norm_price or (min(self.price_low), max(self.price_high)),
            r_tot=self.norm_r_tot or (self.r_tot_low, self.r_tot_high),
        )

    @classmethod
    def collapsed(cls, state: ReserveState, base: EnvConfig | None = None, **kw) -> EnvConfig:
        """Config whose sampling ranges are the single point ``state``.

        Normalization ranges are kept from ``base`` so a policy trained under
        ``base`` sees the state exactly as it would during training.
        """
        base = base or cls()
        nr = base.norm_ranges()
        fields = dict(base.__dict__)
        fields.update(r_max_low=tuple(state.r_max), r_max_high=tuple(state.r_max),
                      price_low=tuple(state.prices), price_high=tuple(state.prices),
                      r_tot_low=state.r_tot, r_tot_high=state.r_tot,
                      norm_r_max=nr.r_max, norm_price=nr.price, norm_r_tot=nr.r_tot)
        fields.update(kw)
        return cls(**fields)


def sample_state(rng: np.random.Generator | int, config: EnvConfig) -> ReserveState:
    """Uniform draw of every component; r_tot is uniform on (r_tot_low, min(r_tot_high, sum r_max)]."""
    rng = np.random.default_rng(rng)
    lo, hi = np.array(config.r_max_low), np.array(config.r_max_high)
    plo, phi = np.array(config.price_low), np.array(config.price_high)
    if np.any(hi < lo) or np.any(phi < plo) or config.r_tot_high < config.r_tot_low:
        raise ValueError("empty sampling range")
    r_max = lo + (hi - lo) * rng.random(config.n)
    prices = plo + (phi - plo) * rng.random(config.n)
    top = min(config.r_tot_high, r_max.sum())
    if top < config.r_tot_low or top <= 0:
        raise ValueError("empty sampling range for requested reserve")
    # 1 - U lies in (0, 1], which keeps r_tot off the open lower end
    r_tot = top - (top - config.r_tot_low) * rng.random()
    return ReserveState(r_max, prices, r_tot)


def project_action(raw, state: ReserveState) -> ReserveAction:
    """Map a raw action in [0, 1]^n onto {r : sum r = r_tot, 0 <= r <= r_max}.

    Candidates raw_i * r_max_i are rescaled to the requested total; any entry
    above its cap is pinned there and the shortfall is spread over the rest
    in proportion to their candidates, repeating until nothing exceeds a cap.
    """
    raw = np.clip(np.asarray(raw, dtype=float), 0.0, 1.0)
    r_max = state.r_max
    cand = raw * r_max
    if cand.sum() <= 0:
        cand = r_max.copy()
    pinned = np.zeros(len(cand), dtype=bool)
    r = np.zeros(len(cand))
    while True:
        free = ~pinned
        if not free.any():
            r = r_max.copy()
            break
        remaining = state.r_tot - r_max[pinned].sum()
        weights = cand * free
        if weights.sum() <= 0:
            weights = r_max * free
        # normalise first: remaining / sum overflows when the weights are subnormal
        r = np.where(pinned, r_max, (weights / weights.sum()) * remaining)
        over = free & (r > r_max)
        if not over.any():
            break
        pinned |= over
    return ReserveAction(np.minimum(r, r_max))


def reserve_cost_component(state: ReserveState, action: ReserveAction) -> float:
    """Average reserve price of the schedule, cents/kWh."""
    return float(state.prices @ action.r / state.r_tot)


def reserve_violation_component(state: ReserveState, action) -> float:
    """Count of capped DERs times their summed excess, kW."""
    r = action.r if isinstance(action, ReserveAction) else np.asarray(action, dtype=float)
    excess = r - state.r_max
    violated = excess > 0
    return float(violated.sum() * excess[violated].sum())


def voltage_node_reward(v, config: EnvConfig):
    """Piecewise-linear per node-phase voltage reward; 1 at v_ref, 0 at the band edges."""
    v = np.asarray(v, dtype=float)
    upper = (config.v_ub - v) / (config.v_ub - config.v_ref)
    lower = (v - config.v_lb) / (config.v_ref - config.v_lb)
    out = np.where(v >= config.v_ref, upper, lower)
    out = np.where((v < config.v_lb) | (v > config.v_ub), config.voltage_penalty, out)
    return float(out) if out.ndim == 0 else out


def injections_for(action: ReserveAction, config: EnvConfig, model: FeederModel):
    kw = np.array(config.base_injection_kw) + action.r
    return der_injections(model, kw)


def reward(state: ReserveState, action: ReserveAction, config: EnvConfig,
           model: FeederModel) -> RewardBreakdown:
    """Composite reward evaluated at full reserve deployment.

    A non-converged power flow zeroes the loss term and replaces the voltage
    term by ``nonconvergence_penalty``.
    """
    cost = reserve_cost_component(state, action)
    viol = reserve_violation_component(state, action)
    sol = solve(model, injections_for(action, config, model))
    if sol.converged:
        loss = sol.total_loss_kw
        volt = float(np.mean(voltage_node_reward(sol.node_phase_magnitudes(), config)))
    else:
        loss, volt = 0.0, config.nonconvergence_penalty
    total = -cost - config.beta_r * viol - config.beta_p * loss + config.beta_v * volt
    return RewardBreakdown(cost, viol, loss, volt, total, sol.converged)


def to_action(raw, state: ReserveState, config: EnvConfig) -> ReserveAction:
    """Projection, or plain rescaling to r_tot when projection is disabled."""
    if config.project:
        return project_action(raw, state)
    raw = np.clip(np.asarray(raw, dtype=float), 0.0, 1.0)
    cand = raw * state.r_max
    if cand.sum() <= 0:
        cand = state.r_max.copy()
    return ReserveAction(cand * state.r_tot / cand.sum())


def step(state: ReserveState, raw, config: EnvConfig, model: FeederModel,
         t: int = 0) -> tuple[ReserveState, RewardBreakdown, bool]:
    """One transition; the state does not change within an episode."""
    action = to_action(raw, state, config)
    return state, reward(state, action, config, model), t + 1 >= config.episode_length


@dataclass
class ReserveEnv:
    """Seeded episodic wrapper around :func:`sample_state` and :func:`step`."""
    model: FeederModel
    config: EnvConfig = field(default_factory=EnvConfig)
    seed: int | None = None

    def __post_init__(self):
        if self.config.n != len(self.model.ders):
            raise ValueError(f"config describes {self.config.n} DERs, feeder has {len(self.model.ders)}")
        self.rng = np.random.default_rng(self.seed)
        self.state: ReserveState | None = None
        self.t = 0

    def reset(self) -> ReserveState:
        self.state = sample_state(self.rng, self.config)
        self.t = 0
        return self.state

    def step(self, raw) -> tuple[ReserveState, RewardBreakdown, bool]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        state, rb, done = step(self.state, raw, self.config, self.model, self.t)
        self.t += 1
        return state, rb, done
