"""Inductive bookkeeping: lambda_n, v_n and r_l(k), and the hypotheses H1-H4.

Notation: f_n(k) = tau_hat_{n eps}(k), e_n(k) = pi_hat_{n eps}(k) and
g_{n+1}(k) = e_n(k) p_hat(k), so f_1 = g_1 = p_hat. Everything lives on the
dual grid of the kernel, reduced to one wave vector per orbit of the lattice
symmetry group; all fields handled here are lattice symmetric, so nothing is
lost and the d = 5 grid stays small.
"""

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError, check_real
from .kernel import default_grid_side, dual_axis, fourier_at, kernel_moments, squared_norm_array
from .lace import fourier_forward_solve

DEFAULT_K = {"K1": 100.0, "K2": 1000.0, "K3": 1000.0, "K4": 10.0, "K5": 1000.0}
ZERO_TOL = 1e-12


# --- exponents ---------------------------------------------------------------

@dataclass(frozen=True)
class LowDimScaling:
    """Growing-range setup for d <= 4: L_T = L_1 T^b and the derived exponents."""

    d: int
    L1: float
    b: float
    T: float
    alpha: float
    omega: float
    mu: float

    @property
    def L_T(self):
        return self.L1 * self.T**self.b

    @property
    def beta_1(self):
        return self.L1 ** (-self.d)

    @property
    def beta_T(self):
        return self.L_T ** (-self.d)

    @property
    def beta_hat_T(self):
        return self.beta_1 * self.T ** (-self.mu)


def low_dim_scaling(d, L1, b=None, T=1.0, omega=None, mu=None):
    """Fill in alpha = bd + (d-4)/2, omega in (0, 1 ^ alpha), mu in (0, alpha - omega).

    b defaults to half a unit above the smallest admissible value.
    """
    if b is None:
        b = (4 - d) / (2 * d) + 0.5
    alpha = b * d + (d - 4) / 2
    if alpha <= 0:
        raise ValidationError("b", f"alpha = bd + (d-4)/2 = {alpha} must be positive")
    check_real(T, "T", low=1.0)
    if omega is None:
        omega = min(1.0, alpha) / 2
    if not 0 < omega < min(1.0, alpha):
        raise ValidationError("omega", f"omega must lie in (0, min(1, alpha)) = (0, {min(1.0, alpha)})")
    if mu is None:
        mu = (alpha - omega) / 2
    if not 0 < mu < alpha - omega:
        raise ValidationError("mu", f"mu must lie in (0, alpha - omega) = (0, {alpha - omega})")
    return LowDimScaling(d, float(L1), float(b), float(T), alpha, omega, mu)


def validate_exponents(d, gamma, delta, rho, Delta=1.0, omega=None):
    """-(2+rho) < 0 < d/2-(2+rho) < gamma < gamma+delta < cap.

    cap is 1 ^ Delta ^ (d-4)/2 for d > 4 and omega ^ Delta (with delta < omega)
    in the growing-range setting.
    """
    if omega is None:
        if d <= 4:
            raise ValidationError("d", "fixed-range exponents need d > 4; supply omega")
        cap = min(1.0, Delta, (d - 4) / 2)
    else:
        cap = min(omega, Delta)
        if not delta < omega:
            raise ValidationError("delta", "need delta < omega")
    chain = [-(2 + rho), 0.0, d / 2 - (2 + rho), gamma, gamma + delta, cap]
    names = ["-(2+rho)", "0", "d/2-(2+rho)", "gamma", "gamma+delta", "cap"]
    for i in range(len(chain) - 1):
        if not chain[i] < chain[i + 1]:
            raise ValidationError("exponents", f"{names[i]} = {chain[i]} is not below "
                                               f"{names[i + 1]} = {chain[i + 1]}")
    if delta <= 0:
        raise ValidationError("delta", "delta must be positive")
    return gamma, delta, rho


def default_exponents(d, Delta=1.0, omega=None):
    cap = min(1.0, Delta, (d - 4) / 2) if omega is None else min(omega, Delta)
    gamma, delta = cap / 2, cap / 4
    rho = d / 2 - 2 - gamma / 2
    return validate_exponents(d, gamma, delta, rho, Delta, omega)


# --- wave vectors ------------------------------------------------------------

def symmetric_kpoints(d, M):
    """One wave vector per symmetry orbit of the M^d dual grid, with orbit sizes.

    Orbits of coordinate permutations and sign flips correspond to sorted
    tuples of |m| in 0..M/2 (m = M/2 is its own mirror image on the torus).
    """
    ax = dual_axis(M)
    half = M // 2
    reps, sizes = [], []
    for combo in itertools.combinations_with_replacement(range(half + 1), d):
        reps.append([ax[half + c] if c < half else ax[0] for c in combo])
        perms = math.factorial(d)
        for c in set(combo):
            perms //= math.factorial(combo.count(c))
        flips = 2 ** sum(1 for c in combo if 0 < c < half)
        sizes.append(perms * flips)
    return np.array(reps, dtype=float).reshape(-1, d), np.array(sizes, dtype=np.int64)


# --- sequences -----------------------------------------------------------------

def lambda_sequence(extractor, n_max, eps):
    """lambda_0 = lambda_1 = 1, lambda_n = 1 - (1/eps) sum_{l=2}^n g_l(0; lambda_{n-1}).

    ``extractor(lam)`` returns a pi field at that lambda with horizon at least
    n_max - 1. Fields are cached per lambda value.
    """
    cache = {}

    def pi_at(lam):
        if lam not in cache:
            cache[lam] = extractor(lam)
        return cache[lam]

    lams = [1.0, 1.0][: n_max + 1]
    for n in range(2, n_max + 1):
        lam = lams[n - 1]
        pi = pi_at(lam)
        if pi.n_max < n - 1:
            raise ValidationError("extractor", f"pi horizon {pi.n_max} < {n - 1}")
        tot = pi.totals()
        ph0 = 1.0 - eps + lam * eps
        lams.append(1.0 - ph0 * float(tot[1:n].sum()) / eps)
    return np.array(lams)


def v_sequence(g0, g_lap, lam, eps, sigma2):
    """v_0 = v_1 = lam and the quotient formula for n >= 2.

    g0[l] = g_l(0) and g_lap[l] = Laplacian of g_l at 0 (= -sum |x|^2 g_l(x)),
    indexed from l = 0 (unused) upward.
    """
    n_max = len(g0) - 1
    v = np.full(n_max + 1, float(lam))
    num, den = float(lam), 1.0
    for n in range(2, n_max + 1):
        num -= g_lap[n] / (sigma2 * eps)
        den += (n - 1) * g0[n]
        v[n] = num / den
    return v


def r_sequence(f, v, a, eps, tol=ZERO_TOL):
    """r_l(k) = [f_l/f_{l-1} - 1 + eps v_l a(k)] / eps for l >= 1.

    Returns (r, flagged) where flagged[l] marks the wave vectors at which
    f_{l-1} vanishes; r is NaN there.
    """
    n_max = f.shape[0] - 1
    r = np.full(f.shape, np.nan)
    flagged = np.zeros(f.shape, dtype=bool)
    for l in range(1, n_max + 1):
        prev = f[l - 1]
        bad = np.abs(prev) <= tol * max(1.0, float(np.abs(prev).max()))
        flagged[l] = bad
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(bad, np.nan, f[l] / np.where(bad, 1.0, prev))
        r[l] = (ratio - 1.0 + eps * v[l] * a) / eps
    return r, flagged


def s_sequence(r, v, a, eps, zero_index):
    """s_l(k) = [eps v_l r_l(0) a(k) + r_l(k) - r_l(0)] / (1 + eps r_l(0))."""
    r0 = r[:, zero_index]
    s = (eps * v[:, None] * r0[:, None] * a[None, :] + r - r0[:, None]) / (1.0 + eps * r0[:, None])
    s[0] = np.nan
    return s


def reconstruct(r, v, a, eps, m):
    """prod_{l=1}^m [1 - eps v_l a + eps r_l]."""
    out = np.ones(r.shape[1])
    for l in range(1, m + 1):
        out = out * (1.0 - eps * v[l] * a + eps * r[l])
    return out


# --- state -----------------------------------------------------------------------

@dataclass
class InductionState:
    eps: float
    d: int
    lam: float
    sigma2: float
    beta: float
    kvecs: np.ndarray = field(repr=False)
    orbit_sizes: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    lambda_n: np.ndarray = field(repr=False)
    v_n: np.ndarray = field(repr=False)
    f: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)
    e: np.ndarray = field(repr=False)
    r: np.ndarray = field(repr=False)
    s: np.ndarray = field(repr=False)
    flagged: np.ndarray = field(repr=False)
    K: dict = field(default_factory=lambda: dict(DEFAULT_K))
    gamma: float = 0.0
    delta: float = 0.0
    rho: float = 0.0
    Delta: float = 1.0
    low_dim: LowDimScaling = None
    meta: dict = field(default_factory=dict)

    @property
    def n_max(self):
        return self.f.shape[0] - 1

    @property
    def zero_index(self):
        return int(np.flatnonzero(np.all(self.kvecs == 0, axis=1))[0])

    @property
    def beta_eff(self):
        return self.beta if self.low_dim is None else self.low_dim.beta_hat_T

    def A_m(self, m):
        """Mask of the wave vectors in A_m = {a(k) <= gamma log(2+m eps)/(1+m eps)}."""
        x = m * self.eps
        return self.a <= self.gamma * math.log(2 + x) / (1 + x)

    def reconstruction_error(self, m):
        ok = ~np.any(self.flagged[1: m + 1], axis=0)
        rec = reconstruct(self.r[:, ok], self.v_n, self.a[ok], self.eps, m)
        return float(np.max(np.abs(rec - self.f[m, ok]))) if ok.any() else 0.0

    def f0_product_error(self, m):
        i = self.zero_index
        prod = np.prod(1.0 + self.eps * self.r[1: m + 1, i])
        return abs(float(prod - self.f[m, i]))

    def interval(self, n):
        """I_n = lambda_n + width_n [-1, 1]."""
        if self.low_dim is None:
            w = self.K["K1"] * self.beta / (1 + n * self.eps) ** ((self.d - 2) / 2)
        else:
            w = self.K["K1"] * self.beta_eff / (1 + n * self.eps) ** (1 + self.low_dim.omega)
        return float(self.lambda_n[n] - w), float(self.lambda_n[n] + w)

    def intervals_nested(self, n=None):
        """[I_m subset of I_{m-1}] for m = 1..n."""
        n = self.n_max if n is None else n
        out = []
        for m in range(1, n + 1):
            lo0, hi0 = self.interval(m - 1)
            lo1, hi1 = self.interval(m)
            out.append(lo0 <= lo1 + 1e-15 and hi1 <= hi0 + 1e-15)
        return out

    def measured_CK(self, n=None):
        """Smallest K_1 for which H1 holds up to n."""
        n = self.n_max if n is None else n
        best = 0.0
        for m in range(1, n + 1):
            left = abs(self.lambda_n[m] - self.lambda_n[m - 1])
            best = max(best, left / _h1_profile(self, m))
        return best


def _h1_profile(state, m):
    x = 1 + m * state.eps
    if state.low_dim is None:
        return state.eps * state.beta / x ** (state.d / 2)
    return state.eps * state.beta_eff / x ** (2 + state.low_dim.omega)


def build_state(pi, params, kvecs=None, M=None, lambda_n=None, extractor=None, tau=None,
                K=None, exponents=None, low_dim=None, Delta=1.0):
    """Assemble the induction state of a model at fixed lambda.

    The lambda_n sequence comes from ``lambda_n``, else from ``extractor``,
    else from the given pi held fixed in lambda. f_n is tau_hat if ``tau`` is
    given, otherwise the Fourier-space solution of the recursion.
    """
    d, eps = params.d, params.eps
    if kvecs is None:
        kvecs, sizes = symmetric_kpoints(d, M or default_grid_side(d))
    else:
        kvecs = np.atleast_2d(np.asarray(kvecs, dtype=float))
        sizes = np.ones(len(kvecs), dtype=np.int64)
    if not np.any(np.all(kvecs == 0, axis=1)):
        raise ValidationError("kvecs", "the wave-vector set must contain k = 0")
    n_max = pi.n_max
    a = 1.0 - fourier_at(params.kernel.mass, kvecs).real
    e = pi.hat(kvecs).real
    ph = params.p_hat(kvecs)
    g = np.zeros_like(e)
    g[1:] = e[:-1] * ph[None, :]
    f = tau.hat(kvecs).real if tau is not None else fourier_forward_solve(pi, params, kvecs).real
    sigma2 = kernel_moments(params.kernel).sigma2

    tot = pi.totals()
    m2 = pi.second_moments()
    ph0 = params.p_hat0()
    m2p = float(np.sum(squared_norm_array(d, params.L) * params.p_array()))
    g0 = np.zeros(n_max + 1)
    g_lap = np.zeros(n_max + 1)
    g0[1:] = tot[:-1] * ph0
    g_lap[1:] = -(m2[:-1] * ph0 + tot[:-1] * m2p)

    v = v_sequence(g0, g_lap, params.lam, eps, sigma2)
    r, flagged = r_sequence(f, v, a, eps)
    zi = int(np.flatnonzero(np.all(kvecs == 0, axis=1))[0])
    s = s_sequence(r, v, a, eps, zi)

    if lambda_n is None:
        source = "extractor" if extractor is not None else "fixed-pi"
        lambda_n = lambda_sequence(extractor or (lambda lam: pi), n_max, eps)
    else:
        source = "given"
        lambda_n = np.asarray(lambda_n, dtype=float)

    if low_dim is None and d <= 4:
        low_dim = low_dim_scaling(d, params.L)
    omega = None if low_dim is None else low_dim.omega
    if exponents is None:
        gamma, delta, rho = default_exponents(d, Delta, omega)
    else:
        gamma, delta, rho = validate_exponents(d, *exponents, Delta=Delta, omega=omega)
    Kd = dict(DEFAULT_K)
    Kd.update(K or {})
    return InductionState(eps=eps, d=d, lam=params.lam, sigma2=sigma2, beta=params.kernel.beta,
                          kvecs=kvecs, orbit_sizes=sizes, a=a, lambda_n=lambda_n, v_n=v, f=f,
                          g=g, e=e, r=r, s=s, flagged=flagged, K=Kd, gamma=gamma, delta=delta,
                          rho=rho, Delta=Delta, low_dim=low_dim,
                          meta={"lambda_source": source})


def v_and_r_sequences(state):
    """(v_n, r_l(k), s_l(k), flagged) of a state; recomputed from f and g."""
    return state.v_n, state.r, state.s, state.flagged


# --- hypotheses ------------------------------------------------------------------

@dataclass
class HypothesisReport:
    rows: list  # (m, hypothesis, k index, left, bound, margin)
    excluded: list  # (m, k index) points dropped because f_{m-1} vanished
    n: int

    @property
    def worst(self):
        return min(self.rows, key=lambda r: r[5]) if self.rows else None

    def passed(self, hypothesis=None):
        return all(r[5] >= 0 for r in self.rows if hypothesis is None or r[1] == hypothesis)

    def margins(self, hypothesis):
        return np.array([r[5] for r in self.rows if r[1] == hypothesis])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "hypothesis", "k_index", "left", "bound", "margin"])
        for m, h, k, left, bound, margin in self.rows:
            w.writerow([m, h, k, repr(float(left)), repr(float(bound)), repr(float(margin))])
        return buf.getvalue()

    def nesting_consistent(self, state):
        """H1 margins nonnegative up to m implies I_m inside I_{m-1}."""
        nested = state.intervals_nested(self.n)
        h1 = {r[0]: r[5] for r in self.rows if r[1] == "H1"}
        return all(nested[m - 1] for m in range(1, self.n + 1) if h1.get(m, -1) >= 0)


def check_hypotheses(state, n=None):
    """Evaluate H1-H4 for m = 1..n with the configured constants.

    H3 is checked for r_m on A_m: A_m shrinks with m, so this covers every
    r_l (l <= m) on A_m as well.
    """
    n = state.n_max if n is None else n
    if n > state.n_max:
        raise ValidationError("n", f"state only reaches {state.n_max}")
    eps, d, K = state.eps, state.d, state.K
    beta = state.beta_eff
    low = state.low_dim
    zi = state.zero_index
    rows, excluded = [], []
    for m in range(1, n + 1):
        x = 1 + m * eps
        left = state.lambda_n[m] - state.lambda_n[m - 1]
        bound = K["K1"] * _h1_profile(state, m)
        rows.append((m, "H1", -1, left, bound, bound - abs(left)))
        left = state.v_n[m] - state.v_n[m - 1]
        ex = (d - 2) / 2 if low is None else 1 + low.omega
        bound = eps * K["K2"] * beta / x**ex
        rows.append((m, "H2", -1, left, bound, bound - abs(left)))

        inside = state.A_m(m)
        bad = state.flagged[m]
        excluded.extend((m, int(i)) for i in np.flatnonzero(bad))
        r0 = state.r[m, zi]
        ex0 = (d - 2) / 2 if low is None else 1 + low.omega
        bound = K["K3"] * beta / x**ex0
        rows.append((m, "H3.0", zi, r0, bound, bound - abs(r0)))
        for i in np.flatnonzero(inside & ~bad):
            if i == zi:
                continue
            left = state.r[m, i] - r0
            bound = K["K3"] * beta * state.a[i] / x**state.delta
            rows.append((m, "H3.k", int(i), left, bound, bound - abs(left)))
        for i in np.flatnonzero(~inside):
            ai = state.a[i]
            left = state.f[m, i]
            bound = K["K4"] * ai ** (-2 - state.rho) / x ** (d / 2)
            rows.append((m, "H4.f", int(i), left, bound, bound - abs(left)))
            left = state.f[m, i] - state.f[m - 1, i]
            bound = eps * K["K5"] * ai ** (-1 - state.rho) / x ** (d / 2)
            rows.append((m, "H4.df", int(i), left, bound, bound - abs(left)))
    return HypothesisReport(rows=rows, excluded=excluded, n=n)
