"""Exact small-instance oracles.

Two independent routes to the two-point function: a Markov chain on the
occupied set of each time slice, and brute-force enumeration over all bond
configurations. The enumeration also evaluates the double-connection event
and the one-pivot coefficient by literal event algebra.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import CapExceeded, InvariantViolation, ValidationError
from .model import SpaceTimeField

STATE_CAP = 20
BOND_CAP = 24
WORK_CAP = 2**30
CHUNK_BITS = 18


def light_cone(params, box=None):
    """Sites reachable with positive probability, per slice (list of offset tuples).

    With ``box`` the lattice is cut down to the cube |x|_inf <= box.
    """
    p = params.p_array()
    L = params.L
    steps = [tuple(int(v) - L for v in idx) for idx in np.argwhere(p > 0)]
    cones = [[(0,) * params.d]]
    for _ in range(params.n_max):
        nxt = {tuple(a + b for a, b in zip(y, z)) for y in cones[-1] for z in steps}
        if box is not None:
            nxt = {x for x in nxt if max(abs(v) for v in x) <= box}
        cones.append(sorted(nxt))
    return cones


def _window_index(params, x):
    return tuple(v + params.R for v in x)


@dataclass
class SubsetState:
    """Probability vector over subsets of ``sites`` (bit i <-> sites[i])."""

    sites: list
    prob: np.ndarray

    def check(self, atol=1e-12):
        if np.any(self.prob < -atol):
            raise InvariantViolation("negative subset probability")
        if abs(self.prob.sum() - 1.0) > atol:
            raise InvariantViolation(f"subset probabilities sum to {self.prob.sum()!r}")


def _bits_matrix(idx, m):
    return ((idx[:, None] >> np.arange(m)[None, :]) & 1).astype(bool)


def _product_bernoulli(q):
    """Rows of q (c, m) -> rows of joint law over 2^m subsets, bit j <-> site j."""
    out = np.ones((q.shape[0], 1))
    for j in range(q.shape[1]):
        col = q[:, j: j + 1]
        out = np.concatenate([out * (1.0 - col), out * col], axis=1)
    return out


def subset_chain(params, cap=STATE_CAP, chunk=2048, box=None):
    """Yield the SubsetState of every slice n = 0..n_max.

    ``box`` restricts the process to a finite cube (infections leaving it are
    lost), which keeps long horizons exact at small eps.
    """
    params.require_window()
    cones = light_cone(params, box)
    for c in cones:
        if len(c) > cap:
            raise CapExceeded(f"slice has {len(c)} sites, cap is {cap}")
    p = params.p_array()
    L = params.L
    state = SubsetState(cones[0], np.array([0.0, 1.0]))
    yield state
    for n in range(params.n_max):
        src, dst = cones[n], cones[n + 1]
        m, m2 = len(src), len(dst)
        # F[y, x] = 1 - p(x - y)
        F = np.ones((m, m2))
        for i, y in enumerate(src):
            for j, x in enumerate(dst):
                z = tuple(a - b for a, b in zip(x, y))
                if max(abs(v) for v in z) <= L:
                    F[i, j] = 1.0 - p[tuple(v + L for v in z)]
        live = np.flatnonzero(state.prob > 0)
        if live.size * 2**m2 > WORK_CAP:
            raise CapExceeded(f"transition needs {live.size * 2**m2} operations")
        new = np.zeros(2**m2)
        chunk = max(1, min(chunk, 2**22 // 2**m2))
        for lo in range(0, live.size, chunk):
            idx = live[lo: lo + chunk]
            bits = _bits_matrix(idx, m)
            surv = np.ones((idx.size, m2))
            for i in range(m):
                surv = np.where(bits[:, i: i + 1], surv * F[i][None, :], surv)
            law = _product_bernoulli(1.0 - surv)
            new += state.prob[idx] @ law
        state = SubsetState(dst, new)
        state.check()
        yield state


def exact_two_point_dp(params, cap=STATE_CAP, box=None):
    """tau_n(x) = P(x in C_n) from the subset Markov chain (on the cube
    |x| <= box if given)."""
    tau = SpaceTimeField.zeros(params.d, params.eps, params.n_max, params.R, kind="tau",
                               backend="dp" if box is None else f"dp-box{box}")
    for n, state in enumerate(subset_chain(params, cap, box=box)):
        m = len(state.sites)
        idx = np.arange(2**m)
        bits = _bits_matrix(idx, m)
        marg = state.prob @ bits
        for j, x in enumerate(state.sites):
            tau.values[(n,) + _window_index(params, x)] = marg[j]
    return tau


class BondEnumeration:
    """All bonds between consecutive light-cone slices, with their law.

    Bonds of probability one are kept as always occupied; zero-probability
    bonds are dropped. Random bonds are enumerated as the bits of a
    configuration index.
    """

    def __init__(self, params, cap=BOND_CAP):
        params.require_window()
        self.params = params
        self.cones = light_cone(params)
        self.site_index = [{x: i for i, x in enumerate(c)} for c in self.cones]
        p = params.p_array()
        L = params.L
        self.bonds = []  # (slice, tail idx, head idx, prob)
        for n in range(params.n_max):
            for i, y in enumerate(self.cones[n]):
                for j, x in enumerate(self.cones[n + 1]):
                    z = tuple(a - b for a, b in zip(x, y))
                    if max(abs(v) for v in z) > L:
                        continue
                    pr = float(p[tuple(v + L for v in z)])
                    if pr > 0:
                        self.bonds.append((n, i, j, pr))
        self.random = [b for b, (_, _, _, pr) in enumerate(self.bonds) if pr < 1.0]
        self.B = len(self.random)
        if self.B > cap:
            raise CapExceeded(f"{self.B} random bonds exceed the enumeration cap {cap}")
        self.by_slice = [[b for b, bd in enumerate(self.bonds) if bd[0] == n]
                         for n in range(params.n_max)]

    def chunks(self, chunk_bits=CHUNK_BITS):
        """Yield (weights, occupancy list) per configuration chunk, in index order."""
        total = 2**self.B
        size = min(total, 2**chunk_bits)
        bitpos = {b: k for k, b in enumerate(self.random)}
        for base in range(0, total, size):
            idx = np.arange(base, base + size, dtype=np.int64)
            w = np.ones(size)
            occ = []
            for b, (_, _, _, pr) in enumerate(self.bonds):
                if b in bitpos:
                    bit = ((idx >> bitpos[b]) & 1).astype(bool)
                    w *= np.where(bit, pr, 1.0 - pr)
                    occ.append(bit)
                else:
                    occ.append(np.ones(size, dtype=bool))
            yield w, occ

    def reach(self, occ, start, usable=None, size=None):
        """Sites reached from ``start`` = (slice, idx) per configuration.

        ``usable`` optionally maps a bond to a boolean array (or bool) that is
        and-ed with its occupancy. Returns a list over slices of arrays
        (n_sites, size); slices before ``start`` are None.
        """
        s0, i0 = start
        size = occ[0].size if size is None else size
        out = [None] * (self.params.n_max + 1)
        cur = np.zeros((len(self.cones[s0]), size), dtype=bool)
        cur[i0] = True
        out[s0] = cur
        for n in range(s0, self.params.n_max):
            nxt = np.zeros((len(self.cones[n + 1]), size), dtype=bool)
            for b in self.by_slice[n]:
                _, i, j, _ = self.bonds[b]
                live = cur[i] & occ[b]
                if usable is not None:
                    u = usable(b)
                    if u is not True:
                        live = live & u
                nxt[j] |= live
            out[n + 1] = nxt
            cur = nxt
        return out


def _to_field(params, enum, sums, kind):
    f = SpaceTimeField.zeros(params.d, params.eps, params.n_max, params.R, kind=kind,
                             backend="enumeration")
    for n, arr in enumerate(sums):
        if arr is None:
            continue
        for i, x in enumerate(enum.cones[n]):
            f.values[(n,) + _window_index(params, x)] = arr[i]
    return f


def _empty_sums(enum):
    return [np.zeros(len(c)) for c in enum.cones]


def brute_force_two_point(params, cap=BOND_CAP):
    """sum over configurations of weight * 1{o -> (x, n)}."""
    enum = BondEnumeration(params, cap)
    sums = _empty_sums(enum)
    for w, occ in enum.chunks():
        r = enum.reach(occ, (0, 0))
        for n in range(params.n_max + 1):
            sums[n] += r[n] @ w
    return _to_field(params, enum, sums, "tau")


def _double_connected(enum, occ):
    """o => (x, n): connected and no single bond cuts every path (edge Menger)."""
    base = enum.reach(occ, (0, 0))
    dbl = [a.copy() for a in base]
    cut = {}
    for b in range(len(enum.bonds)):
        without = enum.reach(occ, (0, 0), usable=lambda c, b=b: c != b)
        cut[b] = without
        for n in range(enum.bonds[b][0] + 1, enum.params.n_max + 1):
            dbl[n] &= without[n]
    return base, dbl, cut


def brute_force_piN(params, N, cap=BOND_CAP):
    """pi^(0) (double connection) or pi^(1) (one pivot) by enumeration."""
    if N not in (0, 1):
        raise ValidationError("N", "only N in {0, 1} is enumerated")
    enum = BondEnumeration(params, cap)
    sums = _empty_sums(enum)
    n_max = params.n_max
    for w, occ in enum.chunks():
        base, dbl, cut = _double_connected(enum, occ)
        if N == 0:
            for n in range(n_max + 1):
                sums[n] += dbl[n] @ w
            continue
        heads = {}
        for b, (n_b, _, j, _) in enumerate(enum.bonds):
            heads.setdefault((n_b + 1, j), []).append(b)
        for v, blist in heads.items():
            _accumulate_pi1(enum, occ, w, v, blist, dbl, cut, sums)
    return _to_field(params, enum, sums, f"pi{N}")


def _accumulate_pi1(enum, occ, w, v, blist, dbl, cut, sums):
    n_v, i_v = v
    n_max = enum.params.n_max
    r_v = enum.reach(occ, v)
    later = [b for b, bd in enumerate(enum.bonds) if bd[0] >= n_v]
    # connection from v with one later bond made vacant
    r_minus = {bp: enum.reach(occ, v, usable=lambda c, bp=bp: c != bp) for bp in later}
    for b in blist:
        n_b, i_b, _, _ = enum.bonds[b]
        C = cut[b]  # sites reached from o with b vacant

        def usable(c, C=C):
            s, i, j, _ = enum.bonds[c]
            return ~C[s][i] & ~C[s + 1][j]

        r_del = enum.reach(occ, v, usable=usable)

        def through(n, i, C=C, r_del=r_del):
            if (n, i) == v:
                return C[n][i]
            return r_v[n][i] & ~r_del[n][i]

        front = dbl[n_b][i_b] & occ[b]
        if not front.any():
            continue
        for n in range(n_v, n_max + 1):
            for i in range(len(enum.cones[n])):
                ev = through(n, i) & front
                if not ev.any():
                    continue
                bad = np.zeros_like(ev)
                for bp in later:
                    s, ip, _, _ = enum.bonds[bp]
                    if s >= n:
                        continue
                    piv = occ[bp] & r_v[n][i] & ~r_minus[bp][n][i]
                    if piv.any():
                        bad |= piv & through(s, ip)
                sums[n][i] += (ev & ~bad) @ w


def exact_pi_dp(params, cap=STATE_CAP):
    """pi extracted from the exact DP two-point function."""
    from .lace import invert_to_pi

    return invert_to_pi(exact_two_point_dp(params, cap), params)
