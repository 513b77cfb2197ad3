"""Reference Newton-Raphson solver on the nodal admittance matrix.

Used only to cross-check the sweep solver. It shares the feeder data model
but nothing of the sweep's numerics: the network is assembled into a dense
bus admittance matrix, loads are re-evaluated element by element, and the
current-balance equations are solved by Newton iteration on real and
imaginary parts with a finite-difference Jacobian. Dense and slow; meant for
small feeders.
"""

from __future__ import annotations

import math

import numpy as np

from .feeder import DELTA_PAIRS, PHASES, FeederModel

_A = np.exp(-2j * np.pi / 3)


def _slots(model: FeederModel):
    """Map every present (node, phase) to a row of the bus matrix."""
    index = {}
    for nd in model.nodes:
        for p in nd.phases:
            index[(nd.id, p)] = len(index)
    return index


def _stamp(y, index, f_node, t_node, phases, z, y_sh_f, y_sh_t, gain):
    """Series element with an ideal per-phase gain at the sending end.

    Sending current is gain * (series current + sending shunt current) with
    the shunt seen at the gained voltage, which is how a regulator placed in
    front of a line behaves.
    """
    ph = [PHASES.index(p) for p in phases]
    ys = np.linalg.inv(z[np.ix_(ph, ph)])
    g = np.diag(gain[ph])
    blocks = {
        (f_node, f_node): g @ (ys + y_sh_f[np.ix_(ph, ph)]) @ g,
        (f_node, t_node): -g @ ys,
        (t_node, f_node): -ys @ g,
        (t_node, t_node): ys + y_sh_t[np.ix_(ph, ph)],
    }
    for (a, b), blk in blocks.items():
        rows = [index[(a, PHASES[k])] for k in ph]
        cols = [index[(b, PHASES[k])] for k in ph]
        y[np.ix_(rows, cols)] += blk


def bus_admittance(model: FeederModel) -> tuple[np.ndarray, dict]:
    index = _slots(model)
    y = np.zeros((len(index), len(index)), dtype=complex)
    regs = {(r.from_node, r.to_node): r for r in model.regulators}
    zero = np.zeros((3, 3), dtype=complex)
    for b in model.branches:
        cfg = model.config(b.config)
        z = cfg.z_matrix() * b.length_mi
        half = 0.5j * cfg.b_matrix() * 1e-6 * b.length_mi
        reg = regs.get((b.from_node, b.to_node))
        gain = reg.ratios() if reg is not None else np.ones(3)
        phases = model.node(b.to_node).phases
        _stamp(y, index, b.from_node, b.to_node, phases, z, half, half, gain)
    for x in model.transformers:
        z = np.eye(3) * x.impedance_ohm()
        gain = np.full(3, x.kv_low / x.kv_high)
        _stamp(y, index, x.from_node, x.to_node, model.node(x.to_node).phases, z, zero, zero, gain)
    return y, index


def _load_current(model: FeederModel, index, v, injections):
    """Current drawn at each bus slot by loads, capacitors and DERs (amperes)."""
    cur = np.zeros(len(index), dtype=complex)
    vbase = {nd.id: nd.kv_ll * 1000.0 / math.sqrt(3) for nd in model.nodes}

    def draw(node, k, s_va, kind):
        i = index[(node, PHASES[k])]
        vk = v[i]
        vn = vbase[node]
        if kind == "PQ":
            cur[i] += np.conj(s_va / vk)
        elif kind == "I":
            cur[i] += np.conj(s_va) / vn * vk / abs(vk)
        else:
            cur[i] += np.conj(s_va) * vk / vn ** 2

    def draw_delta(node, k, s_va, kind):
        a, b = DELTA_PAIRS[k]
        ia, ib = index[(node, PHASES[a])], index[(node, PHASES[b])]
        vab = v[ia] - v[ib]
        vn = vbase[node] * math.sqrt(3)
        if kind == "PQ":
            i_ab = np.conj(s_va / vab)
        elif kind == "I":
            i_ab = np.conj(s_va) / vn * vab / abs(vab)
        else:
            i_ab = np.conj(s_va) * vab / vn ** 2
        cur[ia] += i_ab
        cur[ib] -= i_ab

    for ld in model.loads:
        ends = [ld.node] if ld.node_b is None else [ld.node, ld.node_b]
        share = 1.0 / len(ends)
        for node in ends:
            for k in range(3):
                s = complex(ld.kw[k], ld.kvar[k]) * 1000.0 * share
                if s == 0:
                    continue
                (draw if ld.connection == "Y" else draw_delta)(node, k, s, ld.model)
    for c in model.capacitors:
        for k in range(3):
            if c.kvar[k]:
                draw(c.node, k, -1j * c.kvar[k] * 1000.0, "Z")
    for der_id, kva in (injections or {}).items():
        d = model.der(der_id)
        for k in range(3):
            if kva[k] != 0:
                draw(d.node, k, -complex(kva[k]) * 1000.0, "PQ")
    return cur


def solve_newton(model: FeederModel, injections=None, tol: float = 1e-9,
                 max_iter: int = 30) -> dict[tuple[str, str], complex]:
    """Node-phase voltages in p.u. keyed by (node, phase).

    ``tol`` bounds the largest current-balance residual in amperes.
    Raises RuntimeError when Newton does not converge.
    """
    y, index = bus_admittance(model)
    vbase = {nd.id: nd.kv_ll * 1000.0 / math.sqrt(3) for nd in model.nodes}
    src = model.source
    fixed = [index[(src, p)] for p in model.node(src).phases]
    free = [i for i in range(len(index)) if i not in fixed]
    rot = {"a": 1.0, "b": _A, "c": _A.conjugate()}

    v = np.zeros(len(index), dtype=complex)
    for (node, p), i in index.items():
        v[i] = vbase[node] * rot[p]
    for p in model.node(src).phases:
        v[index[(src, p)]] = model.source_pu * vbase[src] * rot[p]
    # start near the answer by pushing regulator and transformer ratios downstream
    v = _ratio_start(model, index, v)

    def residual(x):
        vv = v.copy()
        vv[free] = x[:len(free)] + 1j * x[len(free):]
        r = (y @ vv + _load_current(model, index, vv, injections))[free]
        return np.concatenate([r.real, r.imag])

    x = np.concatenate([v[free].real, v[free].imag])
    for _ in range(max_iter):
        f = residual(x)
        if np.max(np.abs(f)) <= tol:
            break
        jac = np.empty((len(f), len(x)))
        for k in range(len(x)):
            h = 1e-6 * max(1.0, abs(x[k]))
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            jac[:, k] = (residual(xp) - residual(xm)) / (2 * h)
        x = x - np.linalg.solve(jac, f)
    else:
        if np.max(np.abs(residual(x))) > tol:
            raise RuntimeError("Newton iteration did not converge")
    v[free] = x[:len(free)] + 1j * x[len(free):]
    return {key: v[i] / vbase[key[0]] for key, i in index.items()}


def _ratio_start(model, index, v):
    regs = {(r.from_node, r.to_node): r.ratios() for r in model.regulators}
    up = {b.to_node: (b.from_node, regs.get((b.from_node, b.to_node), np.ones(3)))
          for b in model.branches}
    # per-unit bases already absorb the transformer turns ratio
    up.update({x.to_node: (x.from_node, np.ones(3)) for x in model.transformers})
    pu = {model.source: model.source_pu * np.ones(3)}

    def level(node):
        if node in pu:
            return pu[node]
        parent, g = up[node]
        pu[node] = level(parent) * g
        return pu[node]

    for (node, p), i in index.items():
        if node != model.source:
            v[i] = v[i] * level(node)[PHASES.index(p)]
    return v
