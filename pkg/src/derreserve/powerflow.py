"""Unbalanced three-phase power flow on radial feeders by forward-backward sweep.

Internally everything is in volts/amperes per phase (line-to-neutral); results
are reported in per-unit on each node's nominal line-to-neutral voltage.
Line charging is lumped half at each end of a line. Distributed loads are
split 50/50 between the two end nodes of their branch.
"""

from __future__ import annotations

import csv
import functools
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .feeder import DELTA_PAIRS, PHASES, FeederModel, validate_radial

TOLERANCE_KVA = 1e-4
MAX_ITERATIONS = 100

_A = np.exp(-2j * np.pi / 3)
_BALANCED = np.array([1.0, _A, _A.conjugate()])


class PowerFlowError(RuntimeError):
    pass


@dataclass
class PowerFlowSolution:
    node_ids: tuple[str, ...]
    voltages: np.ndarray            # (N, 3) complex p.u., zero on absent phases
    phase_mask: np.ndarray          # (N, 3) bool
    branch_ids: tuple[tuple[str, str], ...]
    branch_flows: np.ndarray        # (B, 3) complex kVA entering the branch at its sending end
    branch_currents: np.ndarray     # (B, 3) complex A through the series element (receiving side)
    branch_losses: np.ndarray       # (B,) kW
    total_loss_kw: float
    iterations: int
    converged: bool
    max_mismatch: float             # kVA
    injections: dict[int, np.ndarray]

    def voltage(self, node: str) -> np.ndarray:
        return self.voltages[self.node_ids.index(node)]

    def magnitudes(self) -> dict[tuple[str, str], float]:
        """|V| in p.u. for every present (node, phase) pair."""
        out = {}
        for i, n in enumerate(self.node_ids):
            for k, p in enumerate(PHASES):
                if self.phase_mask[i, k]:
                    out[(n, p)] = float(abs(self.voltages[i, k]))
        return out

    def node_phase_magnitudes(self) -> np.ndarray:
        return np.abs(self.voltages[self.phase_mask])


class _Network:
    """Arrays compiled once per feeder model."""

    def __init__(self, model: FeederModel):
        topo = validate_radial(model)
        self.model = model
        self.order = topo.order
        self.index = {n: i for i, n in enumerate(self.order)}
        self.parent = np.array([self.index[topo.parent[n]] if n in topo.parent else -1
                                for n in self.order])
        self.children = [[self.index[c] for c in topo.children[n]] for n in self.order]
        n = len(self.order)
        nodes = {nd.id: nd for nd in model.nodes}
        self.mask = np.array([[p in nodes[nid].phases for p in PHASES] for nid in self.order])
        self.v_base = np.array([nodes[nid].kv_ll * 1000.0 / math.sqrt(3) for nid in self.order])

        # series element feeding each non-root node, indexed by receiving node
        self.kind = ["root"] + [""] * (n - 1)
        self.z = np.zeros((n, 3, 3), dtype=complex)
        self.ratio = np.ones((n, 3))          # regulator gain at sending end
        self.nt = np.ones(n)                  # transformer turns ratio
        self.shunt = np.zeros((n, 3, 3), dtype=complex)
        regs = {(r.from_node, r.to_node): r for r in model.regulators}
        self.branch_ids = []
        self.branch_rows = []
        for b in model.branches:
            f, t = b.from_node, b.to_node
            j = self.index[t]
            if self.order[self.parent[j]] != f:
                # branch written against the flow direction
                f, t = t, f
                j = self.index[t]
            cfg = model.config(b.config)
            z = cfg.z_matrix() * b.length_mi
            y_half = 0.5j * cfg.b_matrix() * 1e-6 * b.length_mi
            self.kind[j] = "line"
            self.z[j] = z
            reg = regs.get((b.from_node, b.to_node))
            if reg is not None:
                self.ratio[j] = reg.ratios()
            a = np.diag(self.ratio[j])
            self.shunt[j] += y_half
            self.shunt[self.parent[j]] += a @ y_half @ a
            self.branch_ids.append((f, t))
            self.branch_rows.append(j)
        for x in model.transformers:
            j = self.index[x.to_node]
            if self.order[self.parent[j]] != x.from_node:
                raise PowerFlowError(f"transformer {x.id} is not oriented away from the source")
            zt = x.impedance_ohm()
            if zt == 0:
                raise PowerFlowError(f"singular transformer model: {x.id} has zero impedance")
            self.kind[j] = "xfm"
            self.z[j] = np.eye(3) * zt
            self.nt[j] = x.kv_high / x.kv_low
            self.branch_ids.append((x.from_node, x.to_node))
            self.branch_rows.append(j)
        self.branch_rows = np.array(self.branch_rows, dtype=int)

        # constant loads in VA, per node and phase slot
        self.s_wye = {m: np.zeros((n, 3), dtype=complex) for m in ("PQ", "I", "Z")}
        self.s_delta = {m: np.zeros((n, 3), dtype=complex) for m in ("PQ", "I", "Z")}
        for ld in model.loads:
            s = (np.array(ld.kw) + 1j * np.array(ld.kvar)) * 1000.0
            target = self.s_wye if ld.connection == "Y" else self.s_delta
            if ld.node_b is None:
                target[ld.model][self.index[ld.node]] += s
            else:
                target[ld.model][self.index[ld.node]] += 0.5 * s
                target[ld.model][self.index[ld.node_b]] += 0.5 * s
        for c in model.capacitors:
            self.s_wye["Z"][self.index[c.node]] -= 1j * np.array(c.kvar) * 1000.0

        self.der_nodes = {d.id: self.index[d.node] for d in model.ders}
        src = self.index[model.source]
        self.v_source = model.source_pu * self.v_base[src] * _BALANCED * self.mask[src]

    # -- load currents

    def load_currents(self, v: np.ndarray, s_der: np.ndarray) -> np.ndarray:
        """Phase currents drawn by loads, capacitors, DERs and line charging."""
        vn = self.v_base[:, None]
        mag = np.abs(v)
        safe = np.where(mag > 0, v, 1.0)
        unit = np.where(mag > 0, safe / np.where(mag > 0, mag, 1.0), 0.0)
        i = np.conj((self.s_wye["PQ"] - s_der) / safe) * (mag > 0)
        i += np.conj(self.s_wye["I"]) / vn * unit
        i += np.conj(self.s_wye["Z"]) * v / vn ** 2

        if any(np.any(s) for s in self.s_delta.values()):
            vll = np.stack([v[:, a] - v[:, b] for a, b in DELTA_PAIRS], axis=1)
            vll_n = vn * math.sqrt(3)
            mll = np.abs(vll)
            safe_ll = np.where(mll > 0, vll, 1.0)
            unit_ll = np.where(mll > 0, safe_ll / np.where(mll > 0, mll, 1.0), 0.0)
            idel = np.conj(self.s_delta["PQ"] / safe_ll) * (mll > 0)
            idel += np.conj(self.s_delta["I"]) / vll_n * unit_ll
            idel += np.conj(self.s_delta["Z"]) * vll / vll_n ** 2
            i[:, 0] += idel[:, 0] - idel[:, 2]
            i[:, 1] += idel[:, 1] - idel[:, 0]
            i[:, 2] += idel[:, 2] - idel[:, 1]
        i += np.einsum("nij,nj->ni", self.shunt, v)
        return i * self.mask

    def der_power(self, injections: Mapping[int, np.ndarray]) -> np.ndarray:
        s = np.zeros((len(self.order), 3), dtype=complex)
        for der_id, kva in injections.items():
            if der_id not in self.der_nodes:
                raise PowerFlowError(f"unknown DER id {der_id}")
            s[self.der_nodes[der_id]] += np.asarray(kva, dtype=complex) * 1000.0
        return s

    def upstream(self, j: int, i_series: np.ndarray) -> np.ndarray:
        """Current drawn at the parent node by the series element feeding j."""
        if self.kind[j] == "xfm":
            return i_series / self.nt[j]
        return self.ratio[j] * i_series

    def sending_voltage(self, j: int, v_parent: np.ndarray) -> np.ndarray:
        if self.kind[j] == "xfm":
            return v_parent / self.nt[j]
        return self.ratio[j] * v_parent


@functools.lru_cache(maxsize=16)
def _network(model: FeederModel) -> _Network:
    return _Network(model)


def der_injections(model: FeederModel, kw: Mapping[int, float] | Sequence[float],
                   kvar: Mapping[int, float] | Sequence[float] | None = None
                   ) -> dict[int, np.ndarray]:
    """Per-phase kVA injections for each DER.

    Three-phase DERs split their output equally across phases; single-phase
    DERs inject wholly on their phase. Sequences follow ``model.ders`` order.
    """
    def as_map(x):
        if x is None:
            return {}
        if isinstance(x, Mapping):
            return dict(x)
        return {d.id: float(v) for d, v in zip(model.ders, x)}

    p, q = as_map(kw), as_map(kvar)
    out = {}
    for d in model.ders:
        s = complex(p.get(d.id, 0.0), q.get(d.id, 0.0))
        vec = np.zeros(3, dtype=complex)
        for ph in d.phases:
            vec[PHASES.index(ph)] = s / len(d.phases)
        out[d.id] = vec
    return out


def solve(model: FeederModel, injections: Mapping[int, np.ndarray] | None = None,
          tol: float = TOLERANCE_KVA, max_iter: int = MAX_ITERATIONS) -> PowerFlowSolution:
    """Forward-backward sweep.

    ``injections`` maps DER id to a length-3 complex kVA vector (generation
    positive). Iterates until the largest nodal complex-power mismatch is at
    most ``tol`` kVA. A solution that does not converge is returned with
    ``converged=False`` rather than raising.
    """
    net = _network(model)
    injections = {k: np.asarray(v, dtype=complex) for k, v in (injections or {}).items()}
    s_der = net.der_power(injections)
    n = len(net.order)
    v = net.v_base[:, None] * _BALANCED[None, :] * net.mask
    v[0] = net.v_source
    # flat start that respects regulator and transformer ratios
    for j in range(1, n):
        v[j] = net.sending_voltage(j, v[net.parent[j]]) * net.mask[j]

    i_draw = net.load_currents(v, s_der)
    i_series = np.zeros((n, 3), dtype=complex)
    mismatch = math.inf
    converged = False
    it = 0
    with np.errstate(all="ignore"):
        while it < max_iter:
            it += 1
            # backward sweep
            acc = i_draw.copy()
            for j in range(n - 1, 0, -1):
                i_series[j] = acc[j] * net.mask[j]
                acc[net.parent[j]] += net.upstream(j, i_series[j])
            # forward sweep
            for j in range(1, n):
                v[j] = (net.sending_voltage(j, v[net.parent[j]]) - net.z[j] @ i_series[j]) * net.mask[j]
            new_draw = net.load_currents(v, s_der)
            delta = v * np.conj(new_draw - i_draw)
            delta[0] = 0.0
            mismatch = float(np.max(np.abs(delta))) / 1000.0
            i_draw = new_draw
            if not np.isfinite(mismatch):
                break
            if mismatch <= tol:
                converged = True
                break

    # final branch currents consistent with the returned voltages' loads
    acc = i_draw.copy()
    for j in range(n - 1, 0, -1):
        i_series[j] = acc[j] * net.mask[j]
        acc[net.parent[j]] += net.upstream(j, i_series[j])

    rows = net.branch_rows
    flows = np.zeros((len(rows), 3), dtype=complex)
    losses = np.zeros(len(rows))
    for b, j in enumerate(rows):
        i = i_series[j]
        losses[b] = float(np.real(np.conj(i) @ net.z[j] @ i)) / 1000.0
        flows[b] = v[net.parent[j]] * np.conj(net.upstream(j, i)) / 1000.0

    vpu = v / net.v_base[:, None]
    return PowerFlowSolution(
        node_ids=net.order, voltages=vpu, phase_mask=net.mask.copy(),
        branch_ids=tuple(net.branch_ids), branch_flows=flows,
        branch_currents=i_series[rows].copy(), branch_losses=losses,
        total_loss_kw=float(losses.sum()), iterations=it,
        converged=converged and bool(np.all(np.isfinite(vpu))),
        max_mismatch=mismatch, injections=injections,
    )


def total_loss(sol: PowerFlowSolution) -> float:
    """Total real loss in kW, summed over branches."""
    if not sol.converged:
        raise PowerFlowError("power flow did not converge; loss is undefined")
    return float(np.sum(sol.branch_losses))


def average_voltage_deviation(sol: PowerFlowSolution, v_ref: float = 1.0) -> float:
    """Mean |V - v_ref| over all present node-phase pairs, as a fraction."""
    if not sol.converged:
        raise PowerFlowError("power flow did not converge; voltage deviation is undefined")
    mags = sol.node_phase_magnitudes()
    return float(np.mean(np.abs(mags - v_ref)))


def check_power_balance(sol: PowerFlowSolution, model: FeederModel) -> dict[str, float]:
    """Per-node complex-power residual (kVA) of Kirchhoff's current law.

    Branch currents are rebuilt from the solution voltages alone, so this is
    independent of the sweep's internal bookkeeping. The source node is the
    slack and always reports zero. Key ``"max"`` holds the largest residual.
    """
    net = _network(model)
    perm = [sol.node_ids.index(nid) for nid in net.order]
    v = sol.voltages[perm] * net.v_base[:, None]
    s_der = net.der_power(sol.injections)
    draw = net.load_currents(v, s_der)
    n = len(net.order)
    i_series = np.zeros((n, 3), dtype=complex)
    stored = dict(zip(net.branch_rows, sol.branch_currents))
    for j in range(1, n):
        dv = net.sending_voltage(j, v[net.parent[j]]) - v[j]
        ph = np.flatnonzero(net.mask[j])
        zsub = net.z[j][np.ix_(ph, ph)]
        if ph.size and abs(np.linalg.det(zsub)) > 1e-300:
            i_series[j, ph] = np.linalg.solve(zsub, dv[ph])
        else:
            i_series[j] = stored[j]
    resid = -draw
    for j in range(1, n):
        resid[j] += i_series[j]
        resid[net.parent[j]] -= net.upstream(j, i_series[j])
    s = np.abs(v * np.conj(resid)) / 1000.0
    s[0] = 0.0
    out = {nid: float(np.max(s[i])) for i, nid in enumerate(net.order)}
    out["max"] = float(np.max(s))
    return out


def write_voltage_csv(sol: PowerFlowSolution, path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["node", "phase", "vmag_pu", "angle_deg"])
        for i, nid in enumerate(sol.node_ids):
            for k, p in enumerate(PHASES):
                if sol.phase_mask[i, k]:
                    vk = sol.voltages[i, k]
                    w.writerow([nid, p, f"{abs(vk):.6f}", f"{math.degrees(np.angle(vk)):.4f}"])
