"""Monte Carlo for the discretized contact process.

Replicas run in fixed-size blocks; block ``b`` draws from its own stream
spawned from ``(seed, b)``, so results do not depend on how blocks are
scheduled. Every slice consumes one uniform per window site whatever the
state, which couples runs at different lambda monotonically.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage

from ._validation import ValidationError, check_int
from .kernel import squared_norm_array
from .model import ModelParams, SpaceTimeField, bond_probability

__all__ = [
    "ModelParams", "bond_probability", "ClusterTrace", "run_cluster", "EstimatorResult",
    "estimate_two_point", "estimate_pi0", "max_disjoint_paths", "FourierEstimate",
    "estimate_fourier",
]

BLOCK = 1024


def _stream(seed, block):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))


@dataclass
class ClusterTrace:
    slices: list
    extinction: int = -1

    def __eq__(self, other):
        return self.extinction == other.extinction and self.slices == other.slices


def _step_probabilities(state, params):
    """q_x(S) = 1 - prod_{y in S} (1 - p(x - y)) for a batch of states (nb, window...)."""
    p = params.p_array()
    certain = p >= 1.0
    logq = np.where(certain, 0.0, np.log1p(-np.minimum(p, 1.0 - 1e-300)))
    f = state.astype(float)
    spatial = (1,) + p.shape
    s = ndimage.convolve(f, logq.reshape(spatial), mode="constant", cval=0.0)
    q = -np.expm1(s)
    if certain.any():
        hits = ndimage.convolve(f, certain.astype(float).reshape(spatial), mode="constant")
        q = np.where(hits > 0.5, 1.0, q)
    return q


def _advance(state, params, rng):
    q = _step_probabilities(state, params)
    u = rng.random(state.shape)
    return u < q


def _initial(nb, params):
    side = 2 * params.R + 1
    st = np.zeros((nb,) + (side,) * params.d, dtype=bool)
    st[(slice(None),) + (params.R,) * params.d] = True
    return st


def run_cluster(params, seed):
    """One cluster C_0, C_1, ... up to n_max; deterministic in (params, seed)."""
    params.require_window()
    rng = _stream(seed, 0)
    st = _initial(1, params)
    slices = [[(0,) * params.d]]
    ext = -1
    for n in range(1, params.n_max + 1):
        st = _advance(st, params, rng)
        occ = [tuple(int(v) - params.R for v in idx) for idx in np.argwhere(st[0])]
        slices.append(occ)
        if not occ and ext < 0:
            ext = n
    return ClusterTrace(slices=slices, extinction=ext)


@dataclass
class EstimatorResult:
    """Sums and sums of squares of per-replica observables; merging is exact."""

    d: int
    eps: float
    n_max: int
    R: int
    samples: int
    seeds: tuple
    sums: np.ndarray = field(repr=False)
    sumsq: np.ndarray = field(repr=False)
    extras: dict = field(default_factory=dict, repr=False)
    kind: str = "tau"

    @property
    def seed(self):
        return self.seeds[0] if len(self.seeds) == 1 else self.seeds

    def _field(self, values):
        return SpaceTimeField(self.d, self.eps, self.n_max, self.R, values,
                              {"kind": self.kind, "samples": self.samples, "seed": self.seed})

    @staticmethod
    def _mean_se(s, ss, n):
        mean = s / n
        if n < 2:
            return mean, np.zeros_like(mean)
        var = np.maximum(ss / n - mean**2, 0.0) * n / (n - 1)
        return mean, np.sqrt(var / n)

    @property
    def mean(self):
        return self._field(self.sums / self.samples)

    @property
    def stderr(self):
        return self._field(self._mean_se(self.sums, self.sumsq, self.samples)[1])

    def extra(self, name):
        s, ss = self.extras[name]
        return self._mean_se(s, ss, self.samples)

    def merge(self, other):
        if (self.d, self.eps, self.n_max, self.R, self.kind) != (
                other.d, other.eps, other.n_max, other.R, other.kind):
            raise ValidationError("merge", "incompatible estimator results")
        extras = {k: (v[0] + other.extras[k][0], v[1] + other.extras[k][1])
                  for k, v in self.extras.items()}
        return EstimatorResult(self.d, self.eps, self.n_max, self.R,
                               self.samples + other.samples, self.seeds + other.seeds,
                               self.sums + other.sums, self.sumsq + other.sumsq, extras, self.kind)


def _tau_block(args):
    params, seed, block, nb = args
    rng = _stream(seed, block)
    st = _initial(nb, params)
    r2 = squared_norm_array(params.d, params.R)
    shape = (params.n_max + 1,) + st.shape[1:]
    acc = np.zeros(shape)
    counts = np.zeros((nb, params.n_max + 1))
    m2 = np.zeros((nb, params.n_max + 1))
    axes = tuple(range(1, params.d + 1))
    for n in range(params.n_max + 1):
        if n:
            st = _advance(st, params, rng)
        acc[n] = st.sum(axis=0)
        counts[:, n] = st.sum(axis=axes)
        m2[:, n] = (st * r2).sum(axis=axes)
    chi = params.eps * counts.sum(axis=1)
    extras = {
        "mass": (counts.sum(axis=0), (counts**2).sum(axis=0)),
        "m2": (m2.sum(axis=0), (m2**2).sum(axis=0)),
        "chi": (np.array([chi.sum()]), np.array([(chi**2).sum()])),
        "survival": ((counts > 0).sum(axis=0).astype(float), (counts > 0).sum(axis=0).astype(float)),
    }
    return acc, acc.copy(), extras


def _run_blocks(worker, params, samples, seed, n_jobs, block):
    nblocks = -(-samples // block)
    jobs = [(params, seed, b, min(block, samples - b * block)) for b in range(nblocks)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            parts = list(ex.map(worker, jobs))
    else:
        parts = [worker(j) for j in jobs]
    s, ss, extras = parts[0]
    s, ss = s.copy(), ss.copy()
    extras = {k: (v[0].copy(), v[1].copy()) for k, v in extras.items()}
    for ps, pss, pex in parts[1:]:
        s += ps
        ss += pss
        for k in extras:
            extras[k] = (extras[k][0] + pex[k][0], extras[k][1] + pex[k][1])
    return s, ss, extras


def estimate_two_point(params, samples, seed, n_jobs=1, block=BLOCK):
    """Fraction of replicas with x in C_n, plus mass, second-moment, survival
    and susceptibility partial-sum observables."""
    samples = check_int(samples, "samples", 1)
    params.require_window()
    s, ss, extras = _run_blocks(_tau_block, params, samples, seed, n_jobs, block)
    return EstimatorResult(params.d, params.eps, params.n_max, params.R, samples, (seed,),
                           s, ss, extras, kind="tau")


# --- double connection ------------------------------------------------------

def _neighbour_tables(params):
    """nbr[i, s]: window index of i + offset_s (or -1); offsets with p > 0."""
    p = params.p_array()
    L, R, d = params.L, params.R, params.d
    offs = [tuple(int(v) - L for v in idx) for idx in np.argwhere(p > 0)]
    probs = np.array([p[tuple(v + L for v in z)] for z in offs])
    side = 2 * R + 1
    W = side**d
    coords = np.array(np.unravel_index(np.arange(W), (side,) * d)).T - R
    nbr = -np.ones((W, len(offs)), dtype=np.int64)
    for i in range(W):
        for s, z in enumerate(offs):
            y = coords[i] + np.array(z)
            if np.all(np.abs(y) <= R):
                nbr[i, s] = np.ravel_multi_index(tuple(y + R), (side,) * d)
    return nbr, probs


def _reverse_table(nbr):
    """rev[i, s] = j with nbr[j, s] == i, or -1."""
    rev = -np.ones_like(nbr)
    W, S = nbr.shape
    for j in range(W):
        for s in range(S):
            if nbr[j, s] >= 0:
                rev[nbr[j, s], s] = j
    return rev


@numba.njit(cache=True)
def _augment(occ, flow, nbr, rev, src, tgt_t, tgt_i, W, S, parent_kind, parent_node, parent_s,
             seen, queue):
    """One BFS augmenting path in the unit-capacity residual graph.

    Nodes are t * W + i for t <= tgt_t. Returns True if the target was reached
    (and the path has been augmented).
    """
    nnodes = (tgt_t + 1) * W
    for k in range(nnodes):
        seen[k] = False
    head = 0
    tail = 0
    queue[tail] = src
    tail += 1
    seen[src] = True
    target = tgt_t * W + tgt_i
    found = False
    while head < tail and not found:
        u = queue[head]
        head += 1
        t = u // W
        i = u - t * W
        if t < tgt_t:
            for s in range(S):
                j = nbr[i, s]
                if j < 0:
                    continue
                if occ[t, i, s] and flow[t, i, s] == 0:
                    v = (t + 1) * W + j
                    if not seen[v]:
                        seen[v] = True
                        parent_kind[v] = 1
                        parent_node[v] = u
                        parent_s[v] = s
                        queue[tail] = v
                        tail += 1
                        if v == target:
                            found = True
                            break
        if t > 0 and not found:
            # residual reverse edges: flow on (t-1, j, s) into i
            for s in range(S):
                j = rev[i, s]
                if j >= 0 and flow[t - 1, j, s] == 1:
                    v = (t - 1) * W + j
                    if not seen[v]:
                        seen[v] = True
                        parent_kind[v] = -1
                        parent_node[v] = u
                        parent_s[v] = s
                        queue[tail] = v
                        tail += 1
    if not found:
        return False
    v = target
    while v != src:
        u = parent_node[v]
        s = parent_s[v]
        if parent_kind[v] == 1:
            tu = u // W
            flow[tu, u - tu * W, s] = 1
        else:
            tv = v // W
            flow[tv, v - tv * W, s] = 0
        v = u
    return True


@numba.njit(cache=True)
def _max_flow_upto2(occ, nbr, rev, src_i, tgt_t, tgt_i, W, S, flow, parent_kind, parent_node,
                    parent_s, seen, queue):
    n_t = occ.shape[0]
    for t in range(n_t):
        for i in range(W):
            for s in range(S):
                flow[t, i, s] = 0
    f = 0
    while f < 2:
        if not _augment(occ, flow, nbr, rev, src_i, tgt_t, tgt_i, W, S, parent_kind, parent_node,
                        parent_s, seen, queue):
            break
        f += 1
    return f


@numba.njit(cache=True)
def _pi0_replicas(occ_all, nbr, rev, src_i, n_max, W, S, out):
    """out[r, t, i] = 1 if (o, 0) => (i, t) in replica r."""
    nb = occ_all.shape[0]
    nn = (n_max + 1) * W
    flow = np.zeros((max(n_max, 1), W, S), dtype=np.int8)
    parent_kind = np.zeros(nn, dtype=np.int8)
    parent_node = np.zeros(nn, dtype=np.int64)
    parent_s = np.zeros(nn, dtype=np.int64)
    seen = np.zeros(nn, dtype=np.bool_)
    queue = np.zeros(nn, dtype=np.int64)
    reach = np.zeros((n_max + 1, W), dtype=np.bool_)
    for r in range(nb):
        occ = occ_all[r]
        for t in range(n_max + 1):
            for i in range(W):
                reach[t, i] = False
        reach[0, src_i] = True
        out[r, 0, src_i] = 1
        for t in range(n_max):
            for i in range(W):
                if reach[t, i]:
                    for s in range(S):
                        j = nbr[i, s]
                        if j >= 0 and occ[t, i, s]:
                            reach[t + 1, j] = True
        for t in range(1, n_max + 1):
            for i in range(W):
                if reach[t, i]:
                    if _max_flow_upto2(occ, nbr, rev, src_i, t, i, W, S, flow, parent_kind,
                                       parent_node, parent_s, seen, queue) >= 2:
                        out[r, t, i] = 1


def max_disjoint_paths(occ, nbr, src_i, tgt_t, tgt_i):
    """Number of bond-disjoint occupied paths (capped at 2) in one bond array
    occ[t, i, s]; exposed for testing."""
    W, S = nbr.shape
    n_t = occ.shape[0]
    nn = (n_t + 1) * W
    flow = np.zeros((max(n_t, 1), W, S), dtype=np.int8)
    return int(_max_flow_upto2(occ, nbr, _reverse_table(nbr), src_i, tgt_t, tgt_i, W, S, flow,
                               np.zeros(nn, np.int8), np.zeros(nn, np.int64),
                               np.zeros(nn, np.int64), np.zeros(nn, np.bool_),
                               np.zeros(nn, np.int64)))


def _pi0_block(args):
    params, seed, block, nb = args
    rng = _stream(seed, block)
    nbr, probs = _neighbour_tables(params)
    W, S = nbr.shape
    n_max = params.n_max
    u = rng.random((nb, max(n_max, 1), W, S))
    occ = (u < probs[None, None, None, :]) & (nbr[None, None, :, :] >= 0)
    out = np.zeros((nb, n_max + 1, W), dtype=np.int8)
    src = W // 2
    _pi0_replicas(occ, nbr, _reverse_table(nbr), src, n_max, W, S, out)
    side = 2 * params.R + 1
    acc = out.sum(axis=0).astype(float).reshape((n_max + 1,) + (side,) * params.d)
    return acc, acc.copy(), {}


def estimate_pi0(params, samples, seed, n_jobs=1, block=BLOCK):
    """Fraction of replicas in which (o, 0) is doubly connected to (x, n),
    decided by unit-capacity max-flow on the realised bonds."""
    samples = check_int(samples, "samples", 1)
    params.require_window()
    s, ss, extras = _run_blocks(_pi0_block, params, samples, seed, n_jobs, block)
    return EstimatorResult(params.d, params.eps, params.n_max, params.R, samples, (seed,),
                           s, ss, extras, kind="pi0")


# --- sparse clusters, Fourier observables -----------------------------------

@dataclass
class FourierEstimate:
    """Monte Carlo mean and standard error of tau_hat_n(k) at fixed wave vectors."""

    eps: float
    n_max: int
    kvecs: np.ndarray = field(repr=False)
    samples: int
    seed: int
    sums: np.ndarray = field(repr=False)
    sumsq: np.ndarray = field(repr=False)
    survivors: np.ndarray = field(repr=False)

    @property
    def mean(self):
        return self.sums / self.samples

    @property
    def stderr(self):
        return EstimatorResult._mean_se(self.sums, self.sumsq, self.samples)[1]

    @property
    def survival(self):
        return self.survivors / self.samples


def _sparse_step(occ, params, rng, logq):
    """Next occupied set (array of coordinates) from the current one; only the
    bounding box of the cluster widened by L is touched."""
    L, d = params.L, params.d
    lo = occ.min(axis=0) - L
    hi = occ.max(axis=0) + L
    img = np.zeros(tuple(hi - lo + 1), dtype=float)
    img[tuple((occ - lo).T)] = 1.0
    if params.kernel.uniform:
        side = 2 * L + 1
        n_in = np.rint(ndimage.uniform_filter(img, size=side, mode="constant") * side**d)
        n_in = n_in - img
        q0, q1 = logq
        s = img * q0 + np.where(n_in > 0, n_in * q1, 0.0)
    else:
        from scipy.signal import fftconvolve
        s = fftconvolve(img, logq, mode="same")
    q = -np.expm1(s)
    hit = rng.random(img.shape) < q
    return np.argwhere(hit) + lo


def _fourier_block(args):
    params, kvecs, seed, block, nb = args
    rng = _stream(seed, block)
    n_max = params.n_max
    if params.kernel.uniform:
        D = 1.0 / ((2 * params.L + 1) ** params.d - 1)
        pD = params.lam * params.eps * D
        logq = (np.log(params.eps), np.log1p(-pD) if pD < 1 else -np.inf)
    else:
        p = params.p_array()
        logq = np.log1p(-np.minimum(p, 1.0 - 1e-300))
    s = np.zeros((n_max + 1, len(kvecs)))
    ss = np.zeros_like(s)
    surv = np.zeros(n_max + 1)
    for _ in range(nb):
        occ = np.zeros((1, params.d), dtype=np.int64)
        for n in range(n_max + 1):
            if n:
                occ = _sparse_step(occ, params, rng, logq)
            if occ.shape[0] == 0:
                break
            v = np.cos(occ @ kvecs.T).sum(axis=0)
            s[n] += v
            ss[n] += v * v
            surv[n] += 1
    return s, ss, surv


def estimate_fourier(params, kvecs, samples, seed, n_jobs=1, block=BLOCK):
    """tau_hat_n(k) = E sum_{x in C_n} cos(k.x) on the infinite lattice.

    Clusters are stored sparsely, so no window is needed; suited to long
    ranges where the dense window would be huge. The sine part averages to
    zero by symmetry and is dropped.
    """
    samples = check_int(samples, "samples", 1)
    kvecs = np.atleast_2d(np.asarray(kvecs, dtype=float))
    if kvecs.shape[1] != params.d:
        raise ValidationError("kvecs", f"wave vectors must have {params.d} components")
    nblocks = -(-samples // block)
    jobs = [(params, kvecs, seed, b, min(block, samples - b * block)) for b in range(nblocks)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            parts = list(ex.map(_fourier_block, jobs))
    else:
        parts = [_fourier_block(j) for j in jobs]
    s = sum(p[0] for p in parts)
    ss = sum(p[1] for p in parts)
    surv = sum(p[2] for p in parts)
    return FourierEstimate(params.eps, params.n_max, kvecs, samples, seed, s, ss, surv)
