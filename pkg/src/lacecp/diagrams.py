"""Diagram functions P^(N) and P~^(N;n) as contractions of line factors over
space-time points, with admissible-line bookkeeping and the B constructions.

A diagram is a DAG whose edges carry line factors f(head - tail). Vertex
``o`` is pinned at the space-time origin, ``x`` is the free endpoint and every
other vertex is summed over the window. Lines are recorded as edge paths so
that a construction can be applied to any factor along a line.
"""

import string
from dataclasses import dataclass, field

import numpy as np

from ._validation import CapExceeded, InvariantViolation, ValidationError
from .model import SpaceTimeField, crop_center, wconv

KINDS = ("tau", "phi", "p_star_tau", "lamEpsD", "D", "lamEpsD_star_tau", "temporal_tau",
         "delta", "neq")


@dataclass(frozen=True)
class Edge:
    tail: str
    head: str
    kind: str


@dataclass
class DiagramGraph:
    vertices: list
    edges: list
    prefactor: float = 1.0
    lines: dict = field(default_factory=dict)  # level -> list of edge-index paths
    label: str = ""

    def copy(self):
        return DiagramGraph(list(self.vertices), list(self.edges), self.prefactor,
                            {k: [list(p) for p in v] for k, v in self.lines.items()}, self.label)

    def topological_order(self):
        indeg = {v: 0 for v in self.vertices}
        out = {v: [] for v in self.vertices}
        for e in self.edges:
            if e.kind == "neq":
                continue
            indeg[e.head] += 1
            out[e.tail].append(e.head)
        ready = [v for v in self.vertices if indeg[v] == 0]
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for w in out[v]:
                indeg[w] -= 1
                if indeg[w] == 0:
                    ready.append(w)
        if len(order) != len(self.vertices):
            raise InvariantViolation("diagram is not acyclic")
        return order

    def validate(self):
        self.topological_order()
        names = set(self.vertices)
        for e in self.edges:
            if e.kind not in KINDS:
                raise InvariantViolation(f"unknown line kind {e.kind}")
            if e.tail not in names or e.head not in names:
                raise InvariantViolation("edge references unknown vertex")
        seen = set()
        for paths in self.lines.values():
            for path in paths:
                for i in path:
                    if i in seen:
                        raise InvariantViolation("edge shared by two lines")
                    seen.add(i)

    def fresh(self, stem):
        k = 0
        while f"{stem}{k}" in self.vertices:
            k += 1
        name = f"{stem}{k}"
        self.vertices.append(name)
        return name

    def reroot(self, stem="v"):
        """Rename the endpoint x to a fresh summed vertex and add a new x."""
        k = 0
        while f"{stem}{k}" in self.vertices:
            k += 1
        v = f"{stem}{k}"
        self.rename("x", v)
        self.vertices.append("x")
        return v

    def rename(self, old, new):
        self.vertices = [new if v == old else v for v in self.vertices]
        self.edges = [Edge(new if e.tail == old else e.tail, new if e.head == old else e.head,
                           e.kind) for e in self.edges]


# --- line factors on the space-time window ----------------------------------

class LineFactors:
    """Space-time arrays f(t, x) for every line kind, built from tau."""

    def __init__(self, tau, params):
        if tau.R < params.L * tau.n_max:
            raise InvariantViolation("window too small for the horizon")
        self.tau = tau
        self.params = params
        self.n_max, self.R, self.d = tau.n_max, tau.R, tau.d
        self.W = (self.n_max + 1) * (2 * self.R + 1) ** self.d
        self._arrays = {}
        self._mats = {}

    def _shift_conv(self, small):
        """(small * tau)(t, x) with small concentrated at time 1."""
        out = np.zeros_like(self.tau.values)
        for t in range(1, self.n_max + 1):
            out[t] = wconv(self.tau.values[t - 1], small, self.R)
        return out

    def array(self, kind):
        if kind in self._arrays:
            return self._arrays[kind]
        pr = self.params
        shape = self.tau.values.shape
        o = (self.R,) * self.d
        if kind == "tau":
            a = self.tau.values
        elif kind == "delta":
            a = np.zeros(shape)
            a[(0,) + o] = 1.0
        elif kind in ("lamEpsD", "D"):
            a = np.zeros(shape)
            if self.n_max >= 1:
                D = np.array(pr.kernel.mass) * (pr.lam * pr.eps if kind == "lamEpsD" else 1.0)
                a[1] = crop_center(D, self.R)
        elif kind == "p_star_tau":
            a = self._shift_conv(pr.p_array())
        elif kind == "phi":
            a = self.array("p_star_tau") + self.array("delta")
        elif kind == "lamEpsD_star_tau":
            a = self._shift_conv(pr.lam_eps_D())
        elif kind == "temporal_tau":
            a = np.zeros(shape)
            a[1:] = (1.0 - pr.eps) * self.tau.values[:-1]
        else:
            raise ValidationError("kind", f"no array for line kind {kind!r}")
        self._arrays[kind] = a
        return a

    def points(self):
        side = 2 * self.R + 1
        grid = np.indices((self.n_max + 1,) + (side,) * self.d).reshape(self.d + 1, -1).T
        grid[:, 1:] -= self.R
        return grid

    def matrix(self, kind):
        """M[i, j] = f(point_j - point_i) over all window points."""
        if kind in self._mats:
            return self._mats[kind]
        W = self.W
        if kind == "neq":
            m = np.ones((W, W)) - np.eye(W)
        else:
            a = self.array(kind)
            pts = self.points()
            disp = pts[None, :, :] - pts[:, None, :]
            ok = (disp[..., 0] >= 0) & np.all(np.abs(disp[..., 1:]) <= self.R, axis=-1)
            m = np.zeros((W, W))
            idx = np.nonzero(ok)
            dsel = disp[idx]
            m[idx] = a[tuple([dsel[:, 0]] + [dsel[:, k] + self.R for k in range(1, self.d + 1)])]
        self._mats[kind] = m
        return m

    def is_zero(self, kind):
        return kind != "neq" and not np.any(self.array(kind))

    def origin_index(self):
        side = 2 * self.R + 1
        return np.ravel_multi_index((0,) + (self.R,) * self.d, (self.n_max + 1,) + (side,) * self.d)


# --- contraction ------------------------------------------------------------

def evaluate(diagram, factors, order=None):
    """Value of the diagram at every window point x, as a space-time array.

    ``order`` lists the summed vertices in elimination order; "topological"
    uses the DAG order and the default greedily picks the vertex whose
    elimination leaves the smallest factor.
    """
    summed = [v for v in diagram.vertices if v not in ("o", "x")]
    if order == "topological":
        order = [v for v in diagram.topological_order() if v in summed]
    elif order is not None and sorted(order) != sorted(summed):
        raise ValidationError("order", "must list every summed vertex once")
    o = factors.origin_index()
    fs = []
    for e in diagram.edges:
        m = factors.matrix(e.kind)
        if e.tail == "o" and e.head == "o":
            fs.append(((), np.array(m[o, o])))
        elif e.tail == "o":
            fs.append(((e.head,), m[o, :]))
        elif e.head == "o":
            fs.append(((e.tail,), m[:, o]))
        else:
            fs.append(((e.tail, e.head), m))
    remaining = list(summed)
    for step in range(len(summed)):
        v = order[step] if order is not None else _cheapest(fs, remaining)
        remaining.remove(v)
        touching = [f for f in fs if v in f[0]]
        rest = [f for f in fs if v not in f[0]]
        fs = rest + [_contract(touching, v)]
    W = factors.W
    out = np.full(W, float(diagram.prefactor))
    scalar = 1.0
    for vars_, t in fs:
        if vars_ == ():
            scalar *= float(t)
        elif vars_ == ("x",):
            out = out * t
        elif vars_ == ("x", "x"):
            out = out * np.diag(t)
        else:
            raise InvariantViolation(f"leftover factor over {vars_}")
    shape = (factors.n_max + 1,) + (2 * factors.R + 1,) * factors.d
    return (scalar * out).reshape(shape)


def _cheapest(fs, remaining):
    best, best_size = None, None
    for v in remaining:
        nb = set()
        for vars_, _ in fs:
            if v in vars_:
                nb.update(vars_)
        size = len(nb - {v})
        if best is None or size < best_size:
            best, best_size = v, size
    return best


def _contract(factors_, v):
    names = []
    for vars_, _ in factors_:
        for a in vars_:
            if a not in names:
                names.append(a)
    if len(names) > len(string.ascii_letters):
        raise CapExceeded("too many vertices in one contraction")
    letter = {a: string.ascii_letters[i] for i, a in enumerate(names)}
    keep = [a for a in names if a != v]
    specs = []
    ops = []
    for vars_, t in factors_:
        if len(set(vars_)) != len(vars_):
            # repeated vertex in one factor: take the diagonal
            t = np.diagonal(t) if len(vars_) == 2 else t
            vars_ = (vars_[0],)
        specs.append("".join(letter[a] for a in vars_))
        ops.append(t)
    spec = ",".join(specs) + "->" + "".join(letter[a] for a in keep)
    return tuple(keep), np.einsum(spec, *ops, optimize=True)


# --- construction rules -----------------------------------------------------

def _rules(kind, variant):
    """Replacement templates for a construction at new vertex y on an edge
    a -> c of the given kind.

    Each template is (new edge list, main-chain edge positions) with vertex
    placeholders 'a', 'c', 'y', 'w', 'u'.
    """
    spat, temp = [], []
    if kind == "tau":
        spat.append(([("a", "y", "tau"), ("y", "w", "lamEpsD"), ("w", "c", "tau")], [0, 1, 2]))
        temp.append(([("a", "u", "tau"), ("u", "y", "lamEpsD"), ("u", "c", "temporal_tau")],
                     [0, 2]))
    elif kind in ("lamEpsD", "D"):
        # the bond itself is the spatial bond leaving y
        spat.append(([("a", "y", "delta"), ("a", "c", kind)], [1]))
    elif kind in ("phi", "p_star_tau"):
        spat.append(([("a", "y", "delta"), ("a", "w", "lamEpsD"), ("w", "c", "tau")], [1, 2]))
        spat.append(([("a", "y", "p_star_tau"), ("y", "w", "lamEpsD"), ("w", "c", "tau")],
                     [0, 1, 2]))
        temp.append(([("a", "y", "lamEpsD"), ("a", "c", "temporal_tau")], [1]))
        temp.append(([("a", "u", "p_star_tau"), ("u", "y", "lamEpsD"),
                      ("u", "c", "temporal_tau")], [0, 2]))
    elif kind == "temporal_tau":
        temp.append(([("a", "y", "lamEpsD"), ("a", "c", "temporal_tau")], [1]))
        spat.append(([("a", "y", "temporal_tau"), ("y", "w", "lamEpsD"), ("w", "c", "tau")],
                     [0, 1, 2]))
        temp.append(([("a", "u", "temporal_tau"), ("u", "y", "lamEpsD"),
                      ("u", "c", "temporal_tau")], [0, 2]))
    elif kind == "lamEpsD_star_tau":
        spat.append(([("a", "y", "delta"), ("a", "c", "lamEpsD_star_tau")], [1]))
        spat.append(([("a", "w0", "lamEpsD"), ("w0", "y", "tau"), ("y", "w", "lamEpsD"),
                      ("w", "c", "tau")], [0, 1, 2, 3]))
        temp.append(([("a", "w0", "lamEpsD"), ("w0", "u", "tau"), ("u", "y", "lamEpsD"),
                      ("u", "c", "temporal_tau")], [0, 1, 3]))
    if variant == "spat":
        return spat
    if variant == "temp":
        return temp
    if variant == "both":
        return spat + temp
    raise ValidationError("variant", f"unknown construction variant {variant!r}")


def _splice(diagram, edge_idx, template, y, chain):
    """Replace edge ``edge_idx`` by the template; return the new diagram."""
    g = diagram.copy()
    e = g.edges[edge_idx]
    names = {"a": e.tail, "c": e.head, "y": y}
    new_edges = []
    for t, h, k in template:
        for ph in (t, h):
            if ph not in names:
                names[ph] = g.fresh(ph)
        new_edges.append(Edge(names[t], names[h], k))
    base = len(g.edges) - 1
    g.edges = g.edges[:edge_idx] + g.edges[edge_idx + 1:] + new_edges

    def remap(i):
        return i if i < edge_idx else i - 1

    new_idx = [base + k for k in range(len(new_edges))]
    lines = {}
    for lvl, paths in g.lines.items():
        lines[lvl] = []
        for path in paths:
            if edge_idx in path:
                pos = path.index(edge_idx)
                mid = [new_idx[k] for k in chain]
                path = [remap(i) for i in path[:pos]] + mid + [remap(i) for i in path[pos + 1:]]
            else:
                path = [remap(i) for i in path]
            lines[lvl].append(path)
    g.lines = lines
    return g


def apply_construction_B(diagram, line, y, variant="both", level=None, endpoint="x"):
    """All diagrams produced by Construction B on the admissible line
    ``line`` (index into the tagged lines of ``level``) at vertex ``y``.

    ``y`` must already be a vertex of the diagram (a summed or pinned point);
    the endpoint case y == endpoint is the convention 2 lambda eps P and is
    handled by the caller. A ``neq`` edge keeps y away from the endpoint.
    """
    if level is None:
        level = max(diagram.lines) if diagram.lines else 0
    paths = diagram.lines.get(level, [])
    if not 0 <= line < len(paths):
        raise ValidationError("line", f"line {line} is not admissible at level {level}")
    if y == endpoint:
        raise ValidationError("y", "the endpoint case is the 2 lambda eps convention")
    out = []
    for edge_idx in paths[line]:
        kind = diagram.edges[edge_idx].kind
        for template, chain in _rules(kind, variant):
            g = _splice(diagram, edge_idx, template, y, chain)
            g.edges.append(Edge(y, endpoint, "neq"))
            out.append(g)
    return out


def _with_y(diagram):
    g = diagram.copy()
    y = g.fresh("y")
    return g, y


def _attach_L(g, v, y, level, prefactor):
    """Append the L(v, y; x) factor (both branches) to g; returns diagrams."""
    out = []
    if v == y:
        # (D * tau)(x-v) (tau * lamEpsD)(x-v)
        h = g.copy()
        w1 = h.fresh("w")
        w2 = h.fresh("w")
        k0 = len(h.edges)
        h.edges += [Edge(v, w1, "D"), Edge(w1, "x", "tau"), Edge(v, w2, "tau"),
                    Edge(w2, "x", "lamEpsD")]
        h.lines[level] = [[k0, k0 + 1], [k0 + 2, k0 + 3]]
        h.prefactor *= prefactor
        out.append(h)
        # (D * tau * lamEpsD)(x-v) tau(x-v)
        h = g.copy()
        w1 = h.fresh("w")
        w2 = h.fresh("w")
        k0 = len(h.edges)
        h.edges += [Edge(v, w1, "D"), Edge(w1, w2, "tau"), Edge(w2, "x", "lamEpsD"),
                    Edge(v, "x", "tau")]
        h.lines[level] = [[k0, k0 + 1, k0 + 2], [k0 + 3]]
        h.prefactor *= prefactor
        out.append(h)
        return out
    # phi(x-v) (tau * lamEpsD)(x-y)
    h = g.copy()
    w = h.fresh("w")
    k0 = len(h.edges)
    h.edges += [Edge(v, "x", "phi"), Edge(y, w, "tau"), Edge(w, "x", "lamEpsD")]
    h.lines[level] = [[k0], [k0 + 1, k0 + 2]]
    h.prefactor *= prefactor
    out.append(h)
    # (phi * lamEpsD)(x-v) tau(x-y)
    h = g.copy()
    w = h.fresh("w")
    k0 = len(h.edges)
    h.edges += [Edge(v, w, "phi"), Edge(w, "x", "lamEpsD"), Edge(y, "x", "tau")]
    h.lines[level] = [[k0, k0 + 1], [k0 + 2]]
    h.prefactor *= prefactor
    out.append(h)
    return out


def p0_diagrams(lam_eps):
    """delta_{o,x} + lambda eps L(o, o; x), with the zeroth admissible lines."""
    d0 = DiagramGraph(["o", "x"], [Edge("o", "x", "delta")], 1.0, {0: []}, "delta")
    g = DiagramGraph(["o", "x"], [], 1.0, {}, "")
    rest = _attach_L(g, "o", "o", 0, lam_eps)
    return [d0] + rest


def next_level(diagrams, N, lam_eps, factors=None):
    """P^(N) diagrams from the P^(N-1) diagrams."""
    out = []
    for G in diagrams:
        # endpoint case y = v: 2 lambda eps P^(N-1)(v) L(v, v; x)
        g = G.copy()
        v = g.reroot()
        out += _attach_L(g, v, v, N, 2.0 * lam_eps)
        # constructions on the (N-1)st lines at y != v
        for li in range(len(G.lines.get(N - 1, []))):
            g, y = _with_y(G)
            for h in apply_construction_B(g, li, y, "both", level=N - 1):
                v = h.reroot()
                out += _attach_L(h, v, y, N, 1.0)
    if factors is not None:
        out = [g for g in out if not any(factors.is_zero(e.kind) for e in g.edges)]
    return out


def tilde_diagrams(diagrams, n):
    """Summed spatial constructions on the n-th admissible lines (P~^(N;n))."""
    out = []
    for G in diagrams:
        for li in range(len(G.lines.get(n, []))):
            g, y = _with_y(G)
            out += apply_construction_B(g, li, y, "spat", level=n)
    return out


def sum_diagrams(diagrams, factors):
    total = np.zeros((factors.n_max + 1,) + (2 * factors.R + 1,) * factors.d)
    for g in diagrams:
        total += evaluate(g, factors)
    return total


def line_function_L(u, v, tau, params):
    """L(u, v; x) as a space-time array in x for fixed space-time points u, v
    given as (t, offset) pairs."""
    f = LineFactors(tau, params)
    pts = f.points()

    def index(p):
        t, x = p
        key = np.array([t] + list(np.atleast_1d(x)))
        hit = np.flatnonzero(np.all(pts == key, axis=1))
        if hit.size != 1:
            raise ValidationError("point", f"{p} is outside the window")
        return int(hit[0])

    iu, iv = index(u), index(v)
    M = f.matrix
    if iu != iv:
        a = M("phi")[iu] * (M("tau")[iv] @ M("lamEpsD"))
        b = (M("phi")[iu] @ M("lamEpsD")) * M("tau")[iv]
    else:
        Dt = M("D")[iu] @ M("tau")
        a = Dt * (M("tau")[iu] @ M("lamEpsD"))
        b = (Dt @ M("lamEpsD")) * M("tau")[iu]
    shape = (tau.n_max + 1,) + (2 * tau.R + 1,) * tau.d
    return SpaceTimeField.like(tau, (a + b).reshape(shape), kind="L")


@dataclass
class DiagramBounds:
    P: list
    P_tilde: dict
    counts: list


def build_diagram_bounds(tau, params, N_max=2, with_tilde=False):
    """P^(0..N_max) and optionally P~^(N;n) for 1 <= n <= N <= N_max."""
    if N_max > 3:
        raise CapExceeded("N_max is capped at 3")
    factors = LineFactors(tau, params)
    lam_eps = params.lam * params.eps
    levels = [[g for g in p0_diagrams(lam_eps)
               if not any(factors.is_zero(e.kind) for e in g.edges)]]
    for N in range(1, N_max + 1):
        levels.append(next_level(levels[-1], N, lam_eps, factors))
    P, counts = [], []
    for N, ds in enumerate(levels):
        vals = sum_diagrams(ds, factors)
        P.append(SpaceTimeField.like(tau, vals, kind=f"P{N}"))
        counts.append(len(ds))
    Pt = {}
    if with_tilde:
        for N in range(1, N_max + 1):
            for n in range(1, N + 1):
                vals = sum_diagrams(tilde_diagrams(levels[N], n), factors)
                Pt[(N, n)] = SpaceTimeField.like(tau, vals, kind=f"Ptilde{N}_{n}")
    return DiagramBounds(P=P, P_tilde=Pt, counts=counts)


def random_orders(diagram, count, seed=0):
    """Random elimination orders of the summed vertices (for order-independence checks)."""
    rng = np.random.default_rng(seed)
    summed = [v for v in diagram.vertices if v not in ("o", "x")]
    for _ in range(count):
        yield [summed[i] for i in rng.permutation(len(summed))]
