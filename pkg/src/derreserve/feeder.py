"""Feeder descriptions: data model, text format parser/serializer, topology checks.

The text format is line oriented with typed ``[section]`` headers, whitespace
separated fields and ``#`` comments. See ``data/ieee34_modified.feeder`` for a
complete example.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

PHASES = "abc"
FEET_PER_MILE = 5280.0
BUILTIN_IEEE34 = "builtin:ieee34-modified"

LOAD_MODELS = ("PQ", "I", "Z")
LOAD_CONNECTIONS = ("Y", "D")

# delta slot k spans phases (k, k+1 mod 3): ab, bc, ca
DELTA_PAIRS = ((0, 1), (1, 2), (2, 0))


class FeederError(ValueError):
    """Raised for malformed or inconsistent feeder descriptions."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None,
                 element: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        if element is not None:
            where.append(f"element {element!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.column = column
        self.element = element


Matrix3 = tuple[tuple[complex, complex, complex], ...]


@dataclass(frozen=True)
class Node:
    id: str
    kv_ll: float
    phases: str


@dataclass(frozen=True)
class LineConfig:
    """Per-mile phase impedance (ohm) and shunt susceptance (uS) matrices."""
    id: str
    z: Matrix3
    b: Matrix3

    @property
    def phases(self) -> str:
        return "".join(p for k, p in enumerate(PHASES) if self.z[k][k] != 0)

    def z_matrix(self) -> np.ndarray:
        return np.array(self.z, dtype=complex)

    def b_matrix(self) -> np.ndarray:
        return np.array(self.b, dtype=complex).real


@dataclass(frozen=True)
class Branch:
    from_node: str
    to_node: str
    length_mi: float
    config: str


@dataclass(frozen=True)
class Regulator:
    """Step-voltage regulator with taps frozen, at the sending end of a branch."""
    id: str
    from_node: str
    to_node: str
    taps: tuple[int, int, int]
    step: float = 0.00625

    def ratios(self) -> np.ndarray:
        return 1.0 + self.step * np.array(self.taps, dtype=float)


@dataclass(frozen=True)
class Transformer:
    id: str
    from_node: str
    to_node: str
    kva: float
    kv_high: float
    kv_low: float
    r_pct: float
    x_pct: float
    connection: str = "gy-gy"

    def impedance_ohm(self) -> complex:
        """Series impedance referred to the low-voltage side."""
        z_base = self.kv_low ** 2 * 1000.0 / self.kva
        return complex(self.r_pct, self.x_pct) / 100.0 * z_base


@dataclass(frozen=True)
class Capacitor:
    node: str
    kvar: tuple[float, float, float]


@dataclass(frozen=True)
class Load:
    """Spot load (``node_b is None``) or distributed load along ``node``-``node_b``.

    ``kw``/``kvar`` hold one entry per phase slot; for delta connection the
    slots are ab, bc, ca.
    """
    node: str
    node_b: str | None
    connection: str
    model: str
    kw: tuple[float, float, float]
    kvar: tuple[float, float, float]

    @property
    def distributed(self) -> bool:
        return self.node_b is not None

    def required_phases(self) -> set[int]:
        used = set()
        for k in range(3):
            if self.kw[k] != 0 or self.kvar[k] != 0:
                used.update(DELTA_PAIRS[k] if self.connection == "D" else (k,))
        return used


@dataclass(frozen=True)
class Der:
    id: int
    node: str
    phases: str


@dataclass(frozen=True)
class FeederModel:
    nodes: tuple[Node, ...]
    branches: tuple[Branch, ...]
    line_configs: tuple[LineConfig, ...]
    regulators: tuple[Regulator, ...] = ()
    transformers: tuple[Transformer, ...] = ()
    capacitors: tuple[Capacitor, ...] = ()
    loads: tuple[Load, ...] = ()
    ders: tuple[Der, ...] = ()
    source: str = ""
    source_pu: float = 1.0
    base_power: float = 1000.0
    name: str = field(default="", compare=False)

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def config(self, config_id: str) -> LineConfig:
        for c in self.line_configs:
            if c.id == config_id:
                return c
        raise KeyError(config_id)

    def der(self, der_id: int) -> Der:
        for d in self.ders:
            if d.id == der_id:
                return d
        raise KeyError(der_id)

    def edges(self) -> list[tuple[str, str, str]]:
        """All series elements as (kind, from, to); kind is 'line' or 'xfm'."""
        out = [("line", b.from_node, b.to_node) for b in self.branches]
        out += [("xfm", t.from_node, t.to_node) for t in self.transformers]
        return out


@dataclass(frozen=True)
class Topology:
    order: tuple[str, ...]
    parent: dict[str, str]
    children: dict[str, tuple[str, ...]]


# ---------------------------------------------------------------- parsing


def _parse_float(tok: str, line: int, col: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise FeederError(f"expected a number, got {tok!r}", line, col) from None


def _parse_complex(tok: str, line: int, col: int) -> complex:
    try:
        return complex(tok)
    except ValueError:
        raise FeederError(f"expected a complex value, got {tok!r}", line, col) from None


def _matrix(entries: list, line: int, element: str) -> Matrix3:
    if len(entries) == 6:
        aa, ab, ac, bb, bc, cc = entries
        return ((aa, ab, ac), (ab, bb, bc), (ac, bc, cc))
    if len(entries) == 9:
        m = tuple(tuple(entries[3 * r:3 * r + 3]) for r in range(3))
        arr = np.array(m, dtype=complex)
        scale = max(np.abs(arr).max(), 1e-300)
        if np.abs(arr - arr.T).max() > 1e-9 * scale:
            raise FeederError("matrix is not symmetric", line, element=element)
        return m
    raise FeederError(f"matrix needs 6 or 9 entries, got {len(entries)}", line, element=element)


def _phases(tok: str, line: int, col: int) -> str:
    tok = tok.lower()
    if not tok or any(p not in PHASES for p in tok) or len(set(tok)) != len(tok):
        raise FeederError(f"invalid phase set {tok!r}", line, col)
    return "".join(p for p in PHASES if p in tok)


def _fields(raw: str) -> list[tuple[str, int]]:
    """Split a line into (token, 1-based column) pairs."""
    out = []
    col = 0
    for tok in raw.split():
        col = raw.index(tok, col)
        out.append((tok, col + 1))
        col += len(tok)
    return out


def _expect(fields, count, line, what):
    if len(fields) != count:
        raise FeederError(f"{what} record needs {count} fields, got {len(fields)}", line,
                          fields[0][1] if fields else None)


def parse_feeder(text: str, name: str = "") -> FeederModel:
    """Parse a feeder document and validate it.

    Raises FeederError with line/column for syntax problems and with the
    offending element id for consistency problems.
    """
    section = None
    system = {}
    nodes, branches, regs, xfms, caps, loads, ders = [], [], [], [], [], [], []
    z_rows: dict[str, Matrix3] = {}
    b_rows: dict[str, Matrix3] = {}
    config_order: list[str] = []
    known = {"system", "nodes", "configs", "branches", "regulators", "transformers",
             "capacitors", "loads", "ders"}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        if not body.strip():
            continue
        stripped = body.strip()
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise FeederError("unterminated section header", lineno, body.index("[") + 1)
            section = stripped[1:-1].strip().lower()
            if section not in known:
                raise FeederError(f"unknown section [{section}]", lineno, body.index("[") + 1)
            continue
        if section is None:
            raise FeederError("record outside of any section", lineno, 1)
        f = _fields(body)
        toks = [t for t, _ in f]

        if section == "system":
            _expect(f, 2, lineno, "system")
            key = toks[0]
            if key == "source":
                system[key] = toks[1]
            elif key in ("source_pu", "base_kva"):
                system[key] = _parse_float(toks[1], lineno, f[1][1])
            else:
                raise FeederError(f"unknown system key {key!r}", lineno, f[0][1])
        elif section == "nodes":
            _expect(f, 3, lineno, "node")
            nodes.append(Node(toks[0], _parse_float(toks[1], lineno, f[1][1]),
                              _phases(toks[2], lineno, f[2][1])))
        elif section == "configs":
            if len(f) < 3:
                raise FeederError("config record needs id, kind and entries", lineno, f[0][1])
            cid, kind = toks[0], toks[1].lower()
            if kind == "z":
                vals = [_parse_complex(t, lineno, c) for t, c in f[2:]]
                z_rows[cid] = _matrix(vals, lineno, cid)
            elif kind == "b":
                vals = [complex(_parse_float(t, lineno, c)) for t, c in f[2:]]
                b_rows[cid] = _matrix(vals, lineno, cid)
            else:
                raise FeederError(f"config kind must be z or b, got {kind!r}", lineno, f[1][1])
            if cid not in config_order:
                config_order.append(cid)
        elif section == "branches":
            _expect(f, 5, lineno, "branch")
            length = _parse_float(toks[2], lineno, f[2][1])
            unit = toks[3].lower()
            if unit == "ft":
                length /= FEET_PER_MILE
            elif unit != "mi":
                raise FeederError(f"length unit must be ft or mi, got {unit!r}", lineno, f[3][1])
            if length < 0:
                raise FeederError("negative branch length", lineno, f[2][1])
            branches.append(Branch(toks[0], toks[1], length, toks[4]))
        elif section == "regulators":
            _expect(f, 6, lineno, "regulator")
            try:
                taps = tuple(int(t) for t in toks[3:6])
            except ValueError:
                raise FeederError("regulator taps must be integers", lineno, f[3][1]) from None
            regs.append(Regulator(toks[0], toks[1], toks[2], taps))
        elif section == "transformers":
            _expect(f, 9, lineno, "transformer")
            nums = [_parse_float(t, lineno, c) for t, c in f[3:8]]
            xfms.append(Transformer(toks[0], toks[1], toks[2], *nums, connection=toks[8].lower()))
        elif section == "capacitors":
            _expect(f, 4, lineno, "capacitor")
            caps.append(Capacitor(toks[0], tuple(_parse_float(t, lineno, c) for t, c in f[1:4])))
        elif section == "loads":
            _expect(f, 10, lineno, "load")
            conn, model = toks[2].upper(), toks[3].upper()
            if conn not in LOAD_CONNECTIONS:
                raise FeederError(f"load connection must be Y or D, got {toks[2]!r}", lineno, f[2][1])
            if model not in LOAD_MODELS:
                raise FeederError(f"load model must be PQ, I or Z, got {toks[3]!r}", lineno, f[3][1])
            nums = [_parse_float(t, lineno, c) for t, c in f[4:10]]
            loads.append(Load(toks[0], None if toks[1] == "-" else toks[1], conn, model,
                              tuple(nums[0::2]), tuple(nums[1::2])))
        elif section == "ders":
            _expect(f, 3, lineno, "der")
            try:
                der_id = int(toks[0])
            except ValueError:
                raise FeederError("DER id must be an integer", lineno, f[0][1]) from None
            ders.append(Der(der_id, toks[1], _phases(toks[2], lineno, f[2][1])))

    configs = []
    for cid in config_order:
        if cid not in z_rows:
            raise FeederError("config has no impedance (z) record", element=cid)
        zero = ((0j,) * 3,) * 3
        configs.append(LineConfig(cid, z_rows[cid], b_rows.get(cid, zero)))

    if not nodes:
        raise FeederError("feeder has no nodes")
    model = FeederModel(
        nodes=tuple(nodes), branches=tuple(branches), line_configs=tuple(configs),
        regulators=tuple(regs), transformers=tuple(xfms), capacitors=tuple(caps),
        loads=tuple(loads), ders=tuple(ders),
        source=system.get("source", nodes[0].id),
        source_pu=system.get("source_pu", 1.0),
        base_power=system.get("base_kva", 1000.0),
        name=name,
    )
    validate_model(model)
    return model


def _fmt(x: float) -> str:
    return repr(float(x))


def _fmt_c(z: complex) -> str:
    z = complex(z)
    if z.imag == 0:
        return _fmt(z.real)
    return f"{z.real!r}{'+' if z.imag >= 0 else '-'}{abs(z.imag)!r}j"


def serialize_feeder(model: FeederModel) -> str:
    """Write a model back to the text format; exact inverse of parse_feeder."""
    out = ["[system]", f"source {model.source}", f"source_pu {_fmt(model.source_pu)}",
           f"base_kva {_fmt(model.base_power)}", "", "[nodes]"]
    out += [f"{n.id} {_fmt(n.kv_ll)} {n.phases}" for n in model.nodes]
    out += ["", "[configs]"]
    for c in model.line_configs:
        out.append(f"{c.id} z " + " ".join(_fmt_c(v) for row in c.z for v in row))
        out.append(f"{c.id} b " + " ".join(_fmt(complex(v).real) for row in c.b for v in row))
    out += ["", "[branches]"]
    out += [f"{b.from_node} {b.to_node} {_fmt(b.length_mi)} mi {b.config}" for b in model.branches]
    out += ["", "[regulators]"]
    out += [f"{r.id} {r.from_node} {r.to_node} {' '.join(str(t) for t in r.taps)}"
            for r in model.regulators]
    out += ["", "[transformers]"]
    out += [f"{t.id} {t.from_node} {t.to_node} {_fmt(t.kva)} {_fmt(t.kv_high)} {_fmt(t.kv_low)} "
            f"{_fmt(t.r_pct)} {_fmt(t.x_pct)} {t.connection}" for t in model.transformers]
    out += ["", "[capacitors]"]
    out += [f"{c.node} " + " ".join(_fmt(q) for q in c.kvar) for c in model.capacitors]
    out += ["", "[loads]"]
    for ld in model.loads:
        pairs = " ".join(f"{_fmt(p)} {_fmt(q)}" for p, q in zip(ld.kw, ld.kvar))
        out.append(f"{ld.node} {ld.node_b or '-'} {ld.connection} {ld.model} {pairs}")
    out += ["", "[ders]"]
    out += [f"{d.id} {d.node} {d.phases}" for d in model.ders]
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- validation


def validate_model(model: FeederModel) -> Topology:
    node_ids = [n.id for n in model.nodes]
    if len(set(node_ids)) != len(node_ids):
        dup = next(i for i in node_ids if node_ids.count(i) > 1)
        raise FeederError("duplicate node id", element=dup)
    nodes = {n.id: n for n in model.nodes}
    if model.source not in nodes:
        raise FeederError("source node is not defined", element=model.source)
    configs = {c.id: c for c in model.line_configs}

    for c in model.line_configs:
        for mat in (c.z_matrix(), c.b_matrix()):
            scale = max(np.abs(mat).max(), 1e-300)
            if np.abs(mat - mat.T).max() > 1e-9 * scale:
                raise FeederError("matrix is not symmetric", element=c.id)

    def need(node_id, phases, element):
        if node_id not in nodes:
            raise FeederError(f"unknown node {node_id!r}", element=element)
        missing = set(phases) - set(nodes[node_id].phases)
        if missing:
            raise FeederError(f"phase mismatch: node {node_id} lacks {''.join(sorted(missing))}",
                              element=element)

    for b in model.branches:
        eid = f"{b.from_node}-{b.to_node}"
        if b.config not in configs:
            raise FeederError(f"unknown config id {b.config!r}", element=eid)
        ph = configs[b.config].phases
        need(b.from_node, ph, eid)
        need(b.to_node, ph, eid)
        if nodes[b.to_node].phases != ph:
            raise FeederError("phase mismatch: line phases differ from receiving node", element=eid)
    for t in model.transformers:
        need(t.from_node, "abc", t.id)
        need(t.to_node, "abc", t.id)
        if t.connection != "gy-gy":
            raise FeederError(f"unsupported transformer connection {t.connection!r}", element=t.id)
        if t.kva <= 0 or t.kv_low <= 0 or t.kv_high <= 0:
            raise FeederError("transformer ratings must be positive", element=t.id)
    branch_keys = {(b.from_node, b.to_node) for b in model.branches}
    for r in model.regulators:
        if (r.from_node, r.to_node) not in branch_keys:
            raise FeederError("regulator does not sit on a branch", element=r.id)
    for c in model.capacitors:
        need(c.node, "".join(p for k, p in enumerate(PHASES) if c.kvar[k] != 0), f"cap@{c.node}")
    for ld in model.loads:
        ph = "".join(PHASES[k] for k in sorted(ld.required_phases()))
        eid = f"load@{ld.node}" + (f"-{ld.node_b}" if ld.node_b else "")
        need(ld.node, ph, eid)
        if ld.node_b is not None:
            need(ld.node_b, ph, eid)
            if (ld.node, ld.node_b) not in branch_keys and (ld.node_b, ld.node) not in branch_keys:
                raise FeederError("distributed load is not on a branch", element=eid)
    der_ids = [d.id for d in model.ders]
    if len(set(der_ids)) != len(der_ids):
        raise FeederError("duplicate DER id", element=str(der_ids))
    for d in model.ders:
        need(d.node, d.phases, f"der{d.id}")
    return validate_radial(model)


def validate_radial(model: FeederModel) -> Topology:
    """Breadth-first ordering from the source plus parent/children maps.

    Raises FeederError on cycles or unreachable nodes.
    """
    adj: dict[str, list[str]] = {n.id: [] for n in model.nodes}
    edges = model.edges()
    for _, a, b in edges:
        for x in (a, b):
            if x not in adj:
                raise FeederError(f"unknown node {x!r}", element=f"{a}-{b}")
        if a == b:
            raise FeederError("non-radial topology: self loop", element=f"{a}-{b}")
        adj[a].append(b)
        adj[b].append(a)
    root = model.source
    parent: dict[str, str] = {}
    order = [root]
    seen = {root}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                parent[v] = u
                order.append(v)
                queue.append(v)
    if len(seen) != len(adj):
        orphan = next(n.id for n in model.nodes if n.id not in seen)
        raise FeederError("disconnected component: node unreachable from source", element=orphan)
    if len(edges) != len(adj) - 1:
        # connected with surplus edges: the first edge not used by the BFS tree
        # closes a cycle (each tree edge is consumed once, so parallel edges count)
        tree = {frozenset((v, parent[v])) for v in parent}
        for _, a, b in edges:
            key = frozenset((a, b))
            if key not in tree:
                break
            tree.discard(key)
        raise FeederError("non-radial topology: cycle detected", element=f"{a}-{b}")
    children: dict[str, list[str]] = {n: [] for n in order}
    for v in order[1:]:
        children[parent[v]].append(v)
    return Topology(tuple(order), parent, {k: tuple(v) for k, v in children.items()})


# ---------------------------------------------------------------- loading


def builtin_modified_ieee34() -> FeederModel:
    text = resources.files("derreserve.data").joinpath("ieee34_modified.feeder").read_text("utf-8")
    return parse_feeder(text, name=BUILTIN_IEEE34)


def load_feeder(source: str) -> FeederModel:
    """Load a feeder from a path, or the builtin fixture by name."""
    if source == BUILTIN_IEEE34:
        return builtin_modified_ieee34()
    with open(source, encoding="utf-8") as fh:
        return parse_feeder(fh.read(), name=source)


def published_ieee34_voltages() -> dict[tuple[str, str], tuple[float, float]]:
    """Published base-case solution of the IEEE 34-node feeder: (node, phase) -> (|V| pu, deg)."""
    text = resources.files("derreserve.data").joinpath("ieee34_published_voltages.csv").read_text()
    out = {}
    for line in text.splitlines():
        if not line or line.startswith("#") or line.startswith("node,"):
            continue
        node, ph, mag, ang = line.split(",")
        out[(node, ph)] = (float(mag), float(ang))
    return out
