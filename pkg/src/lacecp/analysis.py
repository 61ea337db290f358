"""Desk-scale checks of the asymptotic statements: Gaussian fits of tau_hat,
moment profiles, the triangle function, susceptibility fits, convergence as
eps halves, and the growing-range experiment in low dimension."""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal

from ._validation import ValidationError, check_int, check_real
from .kernel import dual_axis, fourier_of_array, kernel_moments, make_uniform_kernel
from .lace import rw_closed_form
from .model import ModelParams, crop_center


# --- Gaussian fit ----------------------------------------------------------------

@dataclass
class ScalingFit:
    """tau_hat_t(k) ~ A exp(-v sigma^2 t |k|^2 / 2d), fitted jointly over t and k."""

    A: float
    v: float
    residual_norm: float
    t_range: tuple
    k_range: tuple
    per_t: list  # (t, A_t, v_t)
    drift: float
    n_points: int
    pinned_A: bool = False
    rows: list = field(default_factory=list, repr=False)  # (t, |k|, observed, model, residual)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "k", "observed", "model", "residual"])
        for row in self.rows:
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()

    def to_json(self):
        rec = {k: v for k, v in asdict(self).items() if k != "rows"}
        return json.dumps(rec, sort_keys=True)


def _lsq(X, z):
    sol, *_ = np.linalg.lstsq(X, z, rcond=None)
    return sol, z - X @ sol


def fit_gaussian_points(t, ksq, values, sigma2, d, pin_A=None):
    """Least squares of log tau_hat on (log A, v); returns (A, v, residuals).

    With ``pin_A`` only v is fitted.
    """
    t, ksq, values = (np.asarray(a, dtype=float) for a in (t, ksq, values))
    if np.any(values <= 0):
        raise ValidationError("values", "tau_hat must be positive inside the fit window")
    z = np.log(values)
    x = -sigma2 * t * ksq / (2.0 * d)
    if np.ptp(x) <= 1e-12 * max(1.0, np.abs(x).max()):
        raise ValidationError("k_range", "fit is ill-conditioned: the k window is too narrow")
    if pin_A is not None:
        z = z - math.log(pin_A)
        sol, res = _lsq(x[:, None], z)
        return float(pin_A), float(sol[0]), res
    sol, res = _lsq(np.stack([np.ones_like(x), x], axis=1), z)
    return float(math.exp(sol[0])), float(sol[1]), res


def scaled_wavevectors(d, t, sigma2, kappa2):
    """Wave vectors with sigma^2 t |k|^2 = kappa^2, along the first axis and
    (for d > 1) the main diagonal."""
    out, k2 = [], []
    for c2 in kappa2:
        k = math.sqrt(c2 / (sigma2 * t))
        e1 = np.zeros(d)
        e1[0] = k
        out.append(e1)
        k2.append(k * k)
        if d > 1:
            out.append(np.full(d, k / math.sqrt(d)))
            k2.append(k * k)
    return np.array(out), np.array(k2)


def gaussian_fit(source, sigma2, times, d, eps=1.0, kappa2_max=0.5, n_kappa=6,
                 smallness=1.0, pin_A=None):
    """Fit (A, v) to tau_hat over the given times (in time units t = n eps).

    ``source`` is a SpaceTimeField or a callable ``(n, kvecs) -> tau_hat``.
    Wave vectors are taken on the scale of the walk: sigma^2 t |k|^2 runs
    up to ``kappa2_max``; points with |k|^2 / log(2+t) above ``smallness``
    are dropped. Also fits each t alone; ``drift`` is the largest deviation
    of those per-t estimates from the joint fit.
    """
    if hasattr(source, "hat"):
        field_ = source
        source = lambda n, kv: field_.hat(kv, slices=[n])[0].real
        eps = field_.eps
    kappa2 = np.linspace(kappa2_max / n_kappa, kappa2_max, n_kappa)
    T, K2, Y, per = [], [], [], []
    for t in times:
        n = int(round(t / eps))
        if abs(n * eps - t) > 1e-9 or n < 1:
            raise ValidationError("times", f"t={t} is not a positive multiple of eps={eps}")
        kv, k2 = scaled_wavevectors(d, t, sigma2, kappa2)
        keep = k2 / math.log(2 + t) <= smallness
        kv, k2 = kv[keep], k2[keep]
        kv = np.vstack([np.zeros((1, d)), kv])
        k2 = np.concatenate([[0.0], k2])
        y = np.asarray(source(n, kv), dtype=float)
        A_t, v_t, _ = fit_gaussian_points(np.full(len(k2), t), k2, y, sigma2, d, pin_A)
        per.append((float(t), A_t, v_t))
        T.append(np.full(len(k2), float(t)))
        K2.append(k2)
        Y.append(y)
    T, K2, Y = np.concatenate(T), np.concatenate(K2), np.concatenate(Y)
    A, v, res = fit_gaussian_points(T, K2, Y, sigma2, d, pin_A)
    model = A * np.exp(-v * sigma2 * T * K2 / (2.0 * d))
    rows = [(t, math.sqrt(k2), y, m, y - m) for t, k2, y, m in zip(T, K2, Y, model)]
    drift = max(max(abs(a - A), abs(b - v)) for _, a, b in per)
    return ScalingFit(A=A, v=v, residual_norm=float(np.linalg.norm(res)),
                      t_range=(float(min(times)), float(max(times))),
                      k_range=(float(math.sqrt(K2[K2 > 0].min())), float(math.sqrt(K2.max()))),
                      per_t=per, drift=float(drift), n_points=int(len(Y)),
                      pinned_A=pin_A is not None, rows=rows)


# --- moments ----------------------------------------------------------------------

@dataclass
class MomentProfile:
    t: np.ndarray
    total: np.ndarray
    ratio: np.ndarray  # sum |x|^2 tau / tau_hat(0)
    sup: np.ndarray
    envelope: np.ndarray
    C2: float

    def ratio_slope(self, t_lo, t_hi):
        """Least-squares line through ratio(t) on [t_lo, t_hi]: (slope, intercept, max rel. dev)."""
        sel = (self.t >= t_lo) & (self.t <= t_hi)
        if sel.sum() < 2:
            raise ValidationError("t_range", "fewer than two times in the window")
        slope, icpt = np.polyfit(self.t[sel], self.ratio[sel], 1)
        line = slope * self.t[sel] + icpt
        return float(slope), float(icpt), float(np.max(np.abs(self.ratio[sel] / line - 1.0)))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "total", "ratio", "sup", "envelope"])
        for row in zip(self.t, self.total, self.ratio, self.sup, self.envelope):
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()


def moment_profile(tau, L=None):
    """Per-slice mass, normalised second moment and sup norm, plus the envelope
    (1-eps)^{t/eps} + C2 L^{-d} (1+t)^{-d/2} with the smallest C2 that covers
    the data."""
    eps, d = tau.eps, tau.d
    n = np.arange(tau.n_max + 1)
    t = n * eps
    total = tau.totals()
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(total > 0, tau.second_moments() / np.where(total > 0, total, 1.0), 0.0)
    sup = tau.sup()
    base = (1.0 - eps) ** n
    beta = 1.0 if L is None else float(L) ** (-d)
    shape = beta * (1.0 + t) ** (-d / 2)
    C2 = float(np.max((sup - base)[1:] / shape[1:])) if tau.n_max else 0.0
    C2 = max(C2, 0.0)
    return MomentProfile(t=t, total=total, ratio=ratio, sup=sup, envelope=base + C2 * shape, C2=C2)


# --- triangle -------------------------------------------------------------------

@dataclass
class TriangleResult:
    value: float
    per_t: np.ndarray  # eps^2 sum_s of the t-th term
    tail: float
    tail_slope: float
    route: str
    grid_side: int = 0


def _triangle_tail(per_t):
    n = np.arange(len(per_t))
    keep = (n >= max(2, len(n) // 2)) & (per_t > 0)
    if keep.sum() < 3:
        return float("nan"), 0.0
    slope, icpt = np.polyfit(np.log(n[keep]), np.log(per_t[keep]), 1)
    if slope >= -1.0:
        return float(slope), float("inf")
    c = math.exp(icpt)
    last = len(per_t) - 1
    return float(slope), float(c * (last + 0.5) ** (slope + 1.0) / (-(slope + 1.0)))


def triangle_estimate(tau, n_cut=None, route="fourier", M=None):
    """eps^2 sum_{n <= n_cut} sum_{m <= n} sum_{x,y} tau_n(y) tau_{n-m}(y-x) tau_m(x).

    The Fourier route integrates tau_hat_n tau_hat_{n-m} tau_hat_m over a dual
    grid fine enough to be exact for the window; the x-space route does the
    triple sum by convolution.
    """
    n_cut = tau.n_max if n_cut is None else check_int(n_cut, "n_cut", 0)
    if n_cut > tau.n_max:
        raise ValidationError("n_cut", f"fields only reach n = {tau.n_max}")
    eps, R = tau.eps, tau.R
    per = np.zeros(n_cut + 1)
    if route == "fourier":
        if M is None:
            M = 3 * R + 2 + (3 * R) % 2
        if M <= 3 * R:
            raise ValidationError("M", f"grid side {M} aliases the triple product (need > {3 * R})")
        hats = np.array([fourier_of_array(tau.values[n], dual_axis(M)).real
                         for n in range(n_cut + 1)])
        for n in range(n_cut + 1):
            acc = 0.0
            for m in range(n + 1):
                acc += float(np.mean(hats[n] * hats[n - m] * hats[m]))
            per[n] = eps**2 * acc
    elif route == "x":
        for n in range(n_cut + 1):
            acc = 0.0
            for m in range(n + 1):
                a, b = tau.values[n - m], tau.values[m]
                if not a.any() or not b.any() or not tau.values[n].any():
                    continue
                conv = crop_center(signal.convolve(a, b, mode="full", method="direct"), R)
                acc += float(np.sum(tau.values[n] * conv))
            per[n] = eps**2 * acc
        M = 0
    else:
        raise ValidationError("route", f"unknown route {route!r}")
    slope, tail = _triangle_tail(per)
    return TriangleResult(value=float(per.sum()), per_t=per, tail=tail, tail_slope=slope,
                          route=route, grid_side=int(M))


# --- susceptibility ---------------------------------------------------------------

@dataclass
class SusceptibilityFit:
    C: float
    gamma: float
    residuals: np.ndarray
    se_C: float
    se_gamma: float
    lambda_c: float

    def ci_gamma(self, z=1.96):
        return self.gamma - z * self.se_gamma, self.gamma + z * self.se_gamma


def susceptibility_fit(lams, chis, lambda_c):
    """Fit chi = C (lambda_c - lambda)^{-gamma} by least squares in log-log."""
    lams = np.asarray(lams, dtype=float)
    chis = np.asarray(chis, dtype=float)
    if lams.shape != chis.shape or lams.size < 2:
        raise ValidationError("lams", "need matching arrays with at least two points")
    if np.any(lams >= lambda_c):
        raise ValidationError("lams", "the lambda grid must lie strictly below lambda_c")
    if np.any(chis <= 0):
        raise ValidationError("chis", "susceptibilities must be positive")
    x = -np.log(lambda_c - lams)
    X = np.stack([np.ones_like(x), x], axis=1)
    sol, res = _lsq(X, np.log(chis))
    logC, gamma = sol
    se_C = se_g = float("nan")
    if lams.size > 2:
        s2 = float(res @ res) / (lams.size - 2)
        cov = s2 * np.linalg.inv(X.T @ X)
        se_g = math.sqrt(max(cov[1, 1], 0.0))
        se_C = math.exp(logC) * math.sqrt(max(cov[0, 0], 0.0))
    return SusceptibilityFit(C=float(math.exp(logC)), gamma=float(gamma), residuals=res,
                             se_C=se_C, se_gamma=se_g, lambda_c=float(lambda_c))


def susceptibility_partial(tau):
    """eps sum_n tau_hat_n(0) over the horizon."""
    return float(tau.eps * tau.totals().sum())


def susceptibility_from_pi(pi, params):
    """(chi, denominator) from summed pi: chi = eps S / (1 - p_hat(0) S) with
    S = sum_n pi_hat_n(0); denominator = (1 - p_hat(0) S) / (eps S), which is
    1 - lambda when pi is the delta field."""
    S = float(pi.totals().sum())
    den = 1.0 - params.p_hat0() * S
    if den <= 0:
        raise ValidationError("lambda", "summed pi gives a nonpositive denominator")
    return params.eps * S / den, den / (params.eps * S)


def rw_susceptibility(lam):
    return 1.0 / (1.0 - lam)


# --- continuum limit ----------------------------------------------------------------

@dataclass
class ContinuumTable:
    eps: list
    t: float
    diffs: list
    ratios: list
    pi_diffs: list = field(default_factory=list)
    pi_ratios: list = field(default_factory=list)

    @property
    def cauchy(self):
        return all(r < 1 for r in self.ratios) and all(r < 1 for r in self.pi_ratios)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def _ratios(diffs):
    return [b / a if a > 0 else float("inf") for a, b in zip(diffs, diffs[1:])]


def _slice_diff(f, g, nf, ng, scale_f=1.0, scale_g=1.0):
    R = max(f.R, g.R)
    a = crop_center(f.values[nf], R) * scale_f
    b = crop_center(g.values[ng], R) * scale_g
    return float(np.max(np.abs(a - b)))


def continuum_study(tau_at, eps_list, t, pi_at=None):
    """Sup-norm differences of tau_{t;eps} (and pi_{t;eps}/eps^2) between
    successive eps, with their ratios."""
    eps_list = [float(e) for e in eps_list]
    for e in eps_list:
        if abs(round(t / e) * e - t) > 1e-9:
            raise ValidationError("eps", f"t/eps is not an integer for eps={e}")
    taus = [tau_at(e) for e in eps_list]
    diffs = [_slice_diff(a, b, int(round(t / ea)), int(round(t / eb)))
             for a, b, ea, eb in zip(taus, taus[1:], eps_list, eps_list[1:])]
    pdiffs = []
    if pi_at is not None:
        pis = [pi_at(e) for e in eps_list]
        pdiffs = [_slice_diff(a, b, int(round(t / ea)), int(round(t / eb)), ea**-2, eb**-2)
                  for a, b, ea, eb in zip(pis, pis[1:], eps_list, eps_list[1:])]
    return ContinuumTable(eps=eps_list, t=float(t), diffs=diffs, ratios=_ratios(diffs),
                          pi_diffs=pdiffs, pi_ratios=_ratios(pdiffs))


def continuum_rw(kernel, lam, t, eps_list, kvecs):
    """Random-walk version from the closed form: sup over kvecs of
    |q_hat_{t;eps} - q_hat_{t;eps/2}|."""
    vals = []
    for e in eps_list:
        params = ModelParams(kernel, float(e), lam, 0)
        disc, _ = rw_closed_form(params, kvecs, [t])
        vals.append(disc[0])
    diffs = [float(np.max(np.abs(a - b))) for a, b in zip(vals, vals[1:])]
    return ContinuumTable(eps=[float(e) for e in eps_list], t=float(t), diffs=diffs,
                          ratios=_ratios(diffs))


# --- growing range ------------------------------------------------------------------

@dataclass(frozen=True)
class ScaledRangeConfig:
    """Range L_T = round(L1 T^b) in dimension d <= 4; alpha = bd + (d-4)/2 > 0."""

    d: int
    b: float
    L1: float
    T: float
    mu: float = -1.0

    def __post_init__(self):
        check_int(self.d, "d", 1)
        if self.d > 4:
            raise ValidationError("d", "the growing-range setup is for d <= 4")
        check_real(self.L1, "L1", low=1.0)
        check_real(self.T, "T", low=1.0)
        if self.alpha <= 0:
            raise ValidationError("b", f"alpha = bd + (d-4)/2 = {self.alpha} must be positive")
        if self.mu < 0:
            object.__setattr__(self, "mu", self.alpha / 2)
        if not 0 < self.mu < self.alpha:
            raise ValidationError("mu", f"mu must lie in (0, alpha) = (0, {self.alpha})")

    @property
    def alpha(self):
        return self.b * self.d + (self.d - 4) / 2

    @property
    def L_T(self):
        return max(1, int(round(self.L1 * self.T**self.b)))

    @property
    def horizon(self):
        return math.log(self.T)

    def kernel(self):
        return make_uniform_kernel(self.d, self.L_T)


@dataclass
class ScaledRangeReport:
    config: ScaledRangeConfig
    fit: ScalingFit
    sigma2_T: float
    beta_T: float
    lam: float
    eps: float
    lambda_T: list  # lambda iteration evaluated on the measured tau_hat(0)
    backend: str
    samples: int = 0

    def to_json(self):
        rec = {"config": asdict(self.config), "L_T": self.config.L_T, "alpha": self.config.alpha,
               "fit": json.loads(self.fit.to_json()), "sigma2_T": self.sigma2_T,
               "beta_T": self.beta_T, "lam": self.lam, "eps": self.eps,
               "lambda_T": self.lambda_T, "backend": self.backend, "samples": self.samples}
        return json.dumps(rec, sort_keys=True)


def pi_hat0_from_tau_hat0(tau0, p_hat0):
    """Invert the recursion at k = 0 for a sequence tau_hat_n(0)."""
    pi = np.zeros_like(tau0)
    for n in range(len(tau0)):
        pi[n] = tau0[n] - sum(pi[s] * p_hat0 * tau0[n - 1 - s] for s in range(n))
    return pi


def lambda_iteration(tau0, eps, lam):
    """1 - (1/eps) p_hat(0) sum_{l=2}^n pi_hat_{l-1}(0) for every horizon n,
    with pi recovered from the measured tau_hat(0)."""
    ph0 = 1.0 - eps + lam * eps
    pi = pi_hat0_from_tau_hat0(np.asarray(tau0, dtype=float), ph0)
    out = [1.0, 1.0]
    for n in range(2, len(pi) + 1):
        out.append(float(1.0 - ph0 * pi[1:n].sum() / eps))
    return out[: len(pi)]


def scaled_range_experiment(cfg, backend="mc", t_grid=None, eps=1.0, lam=1.0, samples=4000,
                            seed=0, kappa2_max=0.5, n_kappa=4, n_jobs=1):
    """Gaussian fit of tau_hat at times T t (t <= log T) with range L_T.

    Backends: "mc" (sparse Monte Carlo), "rw" (random-walk closed form),
    "exact" (subset chain; tiny cases only).
    """
    from .exact import exact_two_point_dp
    from .simulate import estimate_fourier

    if t_grid is None:
        t_grid = [x for x in (0.5, 1.0, 1.5, 2.0) if x <= cfg.horizon]
    if not t_grid or max(t_grid) > cfg.horizon + 1e-12:
        raise ValidationError("t_grid", f"scaled times must lie in (0, log T] = (0, {cfg.horizon}]")
    kern = cfg.kernel()
    sigma2 = kernel_moments(kern).sigma2
    times = [max(eps, round(cfg.T * t / eps) * eps) for t in t_grid]
    n_max = int(round(max(times) / eps))
    params = ModelParams(kern, eps, lam, n_max)
    d = cfg.d
    kappa2 = np.linspace(kappa2_max / n_kappa, kappa2_max, n_kappa)
    kv_by_n = {}
    for t in times:
        kv, _ = scaled_wavevectors(d, t, sigma2, kappa2)
        kv_by_n[int(round(t / eps))] = np.vstack([np.zeros((1, d)), kv])

    if backend == "mc":
        allk = np.vstack(list(kv_by_n.values()))
        est = estimate_fourier(params, allk, samples, seed, n_jobs=n_jobs)
        offsets, pos = {}, 0
        for n, kv in kv_by_n.items():
            offsets[n] = pos
            pos += len(kv)
        source = lambda n, kv: est.mean[n, offsets[n]: offsets[n] + len(kv)]
        tau0 = est.mean[:, 0]
    elif backend == "rw":
        source = lambda n, kv: rw_closed_form(params, kv, [n * eps])[0][0]
        tau0 = (1.0 - eps + lam * eps) ** np.arange(n_max + 1)
    elif backend == "exact":
        tau = exact_two_point_dp(params)
        source = lambda n, kv: tau.hat(kv, slices=[n])[0].real
        tau0 = tau.totals()
    else:
        raise ValidationError("backend", f"unknown backend {backend!r}")
    fit = gaussian_fit(source, sigma2, times, d, eps=eps, kappa2_max=kappa2_max, n_kappa=n_kappa)
    return ScaledRangeReport(config=cfg, fit=fit, sigma2_T=sigma2, beta_T=kern.beta, lam=lam,
                             eps=eps, lambda_T=lambda_iteration(tau0, eps, lam), backend=backend,
                             samples=samples if backend == "mc" else 0)
