"""Baseline allocators, the cost oracle, and side-by-side evaluation."""

from __future__ import annotations

import csv
import io
import itertools
from collections.abc import Callable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .environment import EnvConfig, ReserveAction, ReserveState, injections_for
from .feeder import FeederModel
from .powerflow import average_voltage_deviation, solve

Allocator = Callable[[ReserveState], ReserveAction]

# Test cases used for the published comparison: (r_max kW, price cents/kWh, request kW)
CASES = {
    "I": ReserveState(np.array([200.0, 200.0, 150.0, 200.0]), np.array([10.0, 12.0, 11.0, 14.0]), 600.0),
    "II": ReserveState(np.array([100.0, 80.0, 100.0, 100.0]), np.array([12.0, 10.0, 10.0, 12.0]), 350.0),
}


@dataclass(frozen=True)
class AllocationReport:
    allocator: str
    case: str
    reserves: np.ndarray
    trc_dollars_per_hour: float
    total_loss_kw: float
    avd: float
    converged: bool

    @property
    def avd_pct(self) -> float:
        return 100.0 * self.avd


def trc_dollars(state: ReserveState, action: ReserveAction) -> float:
    """Total reserve cost in $/h: cents/kWh times kW, over 100."""
    return float(state.prices @ action.r) / 100.0


def capacity_based(state: ReserveState) -> ReserveAction:
    """Split the request in proportion to each DER's available reserve."""
    return ReserveAction(state.r_tot * state.r_max / state.r_max.sum())


def greedy_cost_oracle(state: ReserveState) -> ReserveAction:
    """Merit order: fill the cheapest DERs to their caps first (ties by index)."""
    order = sorted(range(state.n), key=lambda i: (state.prices[i], i))
    r = np.zeros(state.n)
    left = state.r_tot
    for i in order:
        take = min(state.r_max[i], left)
        r[i] = take
        left -= take
        if left <= 0:
            break
    return ReserveAction(r)


def exhaustive_min_cost(state: ReserveState, step: float = 10.0) -> tuple[ReserveAction, float]:
    """Cheapest allocation on a ``step`` kW grid (last DER takes the remainder).

    Brute force, independent of the merit-order argument; fine for n <= 4.
    """
    grids = [np.arange(0.0, cap + 1e-9, step) for cap in state.r_max[:-1]]
    best, best_cost = None, np.inf
    for head in itertools.product(*grids):
        last = state.r_tot - sum(head)
        if last < -1e-9 or last > state.r_max[-1] + 1e-9:
            continue
        r = np.array([*head, max(last, 0.0)])
        cost = float(state.prices @ r) / 100.0
        if cost < best_cost:
            best, best_cost = r, cost
    if best is None:
        raise ValueError("no feasible allocation on the grid")
    return ReserveAction(best), best_cost


def evaluate(action: ReserveAction, state: ReserveState, model: FeederModel,
             env_config: EnvConfig | None = None, allocator: str = "", case: str = "") -> AllocationReport:
    """Reserve cost plus loss and AVD of the feeder with every reserve deployed."""
    env_config = env_config or EnvConfig()
    sol = solve(model, injections_for(action, env_config, model))
    if sol.converged:
        loss, avd = sol.total_loss_kw, average_voltage_deviation(sol, env_config.v_ref)
    else:
        loss = avd = float("nan")
    return AllocationReport(allocator, case, action.r.copy(), trc_dollars(state, action),
                            loss, avd, sol.converged)


def compare(allocators: Mapping[str, Allocator], states: Mapping[str, ReserveState],
            model: FeederModel, env_config: EnvConfig | None = None,
            jobs: int = 1) -> list[AllocationReport]:
    if not allocators:
        raise ValueError("compare needs at least one allocator")
    tasks = [(name, fn, case, st) for name, fn in allocators.items() for case, st in states.items()]

    def run(task):
        name, fn, case, st = task
        return evaluate(fn(st), st, model, env_config, allocator=name, case=case)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, tasks))
    return [run(t) for t in tasks]


def comparison_csv(rows: list[AllocationReport], comment: str | None = None) -> str:
    n = max(len(r.reserves) for r in rows)
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["allocator", "case", *[f"der{i + 1}_kw" for i in range(n)],
                "trc_usd_per_h", "loss_kw", "avd_pct", "converged"])
    for r in rows:
        w.writerow([r.allocator, r.case, *[f"{x:.2f}" for x in r.reserves],
                    f"{r.trc_dollars_per_hour:.2f}", f"{r.total_loss_kw:.2f}",
                    f"{r.avd_pct:.2f}", int(r.converged)])
    return buf.getvalue()


def comparison_text(rows: list[AllocationReport]) -> str:
    """Aligned table, one block per case, in the layout of the published comparison."""
    lines = []
    for case in dict.fromkeys(r.case for r in rows):
        lines.append(f"Test case {case}")
        lines.append(f"  {'approach':<16} {'reserves (kW)':<34} {'TRC ($/h)':>10} "
                     f"{'loss (kW)':>10} {'AVD':>8}")
        for r in (r for r in rows if r.case == case):
            res = " ".join(f"{x:7.2f}" for x in r.reserves)
            lines.append(f"  {r.allocator:<16} {res:<34} {r.trc_dollars_per_hour:10.2f} "
                         f"{r.total_loss_kw:10.2f} {r.avd_pct:7.2f}%")
        lines.append("")
    return "\n".join(lines)
