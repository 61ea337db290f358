"""Lace-expansion recursion tau = pi + pi * p * tau on space-time fields,
its inversion, random-walk closed forms and the critical constants."""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from ._validation import InvariantViolation, ValidationError
from .kernel import fourier_at, squared_norm_array
from .model import SpaceTimeField, wconv

__all__ = [
    "SpaceTimeField", "LaceConstants", "forward_solve", "invert_to_pi", "rw_closed_form",
    "rw_gaussian_error", "lace_constants", "fourier_forward_solve", "bisect_critical",
    "random_walk_pi",
]


def _check_compatible(field, params, name):
    if field.d != params.d:
        raise ValidationError(name, f"field dimension {field.d} != model dimension {params.d}")
    if abs(field.eps - params.eps) > 1e-15:
        raise ValidationError(name, "field eps does not match the model")


def _slice_nonzero(values):
    return [bool(np.any(v)) for v in values]


def forward_solve(pi, params, strict=True):
    """tau_n = sum_{s<n} pi_s * p * tau_{n-1-s} + pi_n, tau_0 = pi_0.

    With ``strict`` the window must satisfy R >= L * n_max so that no mass is
    lost at the boundary.
    """
    _check_compatible(pi, params, "pi")
    if strict and pi.R < params.L * pi.n_max:
        raise InvariantViolation(f"window R={pi.R} too small for horizon {pi.n_max}")
    p = params.p_array()
    R = pi.R
    n_max = pi.n_max
    tau = SpaceTimeField.like(pi, kind="tau")
    tau.values[0] = pi.values[0]
    live = _slice_nonzero(pi.values)
    ptau = [wconv(tau.values[0], p, R)]
    for n in range(1, n_max + 1):
        acc = pi.values[n].copy()
        for s in range(n):
            if live[s]:
                acc += wconv(pi.values[s], ptau[n - 1 - s], R)
        tau.values[n] = acc
        ptau.append(wconv(acc, p, R))
    return tau


def invert_to_pi(tau, params):
    """pi_n = tau_n - sum_{s<n} pi_s * p * tau_{n-1-s}; the exact inverse of
    forward_solve on the same window."""
    _check_compatible(tau, params, "tau")
    p = params.p_array()
    R = tau.R
    ptau = [wconv(tau.values[n], p, R) for n in range(tau.n_max)]
    pi = SpaceTimeField.like(tau, kind="pi")
    pi.values[0] = tau.values[0]
    for n in range(1, tau.n_max + 1):
        acc = tau.values[n].copy()
        for s in range(n):
            if np.any(pi.values[s]):
                acc -= wconv(pi.values[s], ptau[n - 1 - s], R)
        pi.values[n] = acc
    return pi


def random_walk_pi(params, R=None):
    R = params.R if R is None else R
    return SpaceTimeField.delta(params.d, params.eps, params.n_max, R, kind="pi")


def fourier_forward_solve(pi, params, kvecs):
    """Solve the recursion directly in Fourier space at the given wave vectors;
    returns tau_hat, shape (n_max+1, n_k)."""
    e = pi.hat(kvecs)
    ph = params.p_hat(kvecs)
    f = np.zeros_like(e)
    f[0] = e[0]
    for n in range(1, pi.n_max + 1):
        acc = e[n].copy()
        for s in range(n):
            acc += e[s] * ph * f[n - 1 - s]
        f[n] = acc
    return f


def rw_closed_form(params, kvecs, times):
    """(discrete, continuum) random-walk transforms at times t in eps Z:
    (1 - eps + lambda eps D_hat)^{t/eps} and exp(-(1 - lambda D_hat) t)."""
    kvecs = np.atleast_2d(np.asarray(kvecs, dtype=float))
    Dh = fourier_at(params.kernel.mass, kvecs).real
    base = 1.0 - params.eps + params.lam * params.eps * Dh
    times = np.asarray(times, dtype=float)
    steps = np.rint(times / params.eps)
    if np.any(np.abs(steps * params.eps - times) > 1e-9):
        raise ValidationError("times", "t/eps must be an integer")
    disc = base[None, :] ** steps[:, None]
    cont = np.exp(-(1.0 - params.lam * Dh)[None, :] * times[:, None])
    return disc, cont


def rw_gaussian_error(params, kappas, t, sigma2):
    """|q_hat_{t;eps}(k / sqrt(sigma^2 t)) - exp(-|k|^2 / 2d)| for each k in kappas."""
    kappas = np.atleast_2d(np.asarray(kappas, dtype=float))
    scaled = kappas / math.sqrt(sigma2 * t)
    disc, _ = rw_closed_form(params, scaled, [t])
    target = np.exp(-np.sum(kappas**2, axis=1) / (2.0 * params.d))
    return np.abs(disc[0] - target)


@dataclass
class LaceConstants:
    lambda_c_eps: float
    A_eps: float
    v_eps: float
    residual: float
    denominator: float
    sum_pi: float
    sum_s_pi: float
    sum_m2: float
    n_cut: int
    tail_slope: float
    tail_bound: float
    lam: float
    eps: float

    def to_json(self):
        return json.dumps({k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                           for k, v in asdict(self).items()}, sort_keys=True)


def _tail_fit(mags, n_cut):
    """Slope of log|pi_n| vs log n over the last half of the horizon and the
    implied tail sum beyond n_cut."""
    ns = np.arange(2, n_cut + 1)
    m = np.asarray(mags[2: n_cut + 1])
    keep = m > 0
    if keep.sum() < 3:
        return float("nan"), 0.0
    ns, m = ns[keep], m[keep]
    half = max(len(ns) // 2, 3)
    ns, m = ns[-half:], m[-half:]
    slope, icpt = np.polyfit(np.log(ns), np.log(m), 1)
    if slope >= -1.0:
        return float(slope), float("inf")
    c = math.exp(icpt)
    tail = c * (n_cut + 0.5) ** (slope + 1.0) / (-(slope + 1.0))
    return float(slope), float(tail)


def lace_constants(pi, params, sigma2):
    """Residual of the critical-point equation and the constants A, v built
    from pi slices n >= 2 (s = n eps >= 2 eps), truncated at pi.n_max."""
    eps = params.eps
    ph0 = params.p_hat0()
    tot = pi.totals()
    p = params.p_array()
    m2p = float(np.sum(squared_norm_array(params.d, params.L) * p))
    m2 = pi.second_moments()
    n = np.arange(pi.n_max + 1)
    sel = n >= 2
    sum_pi = float(tot[sel].sum())
    sum_npi = float((n[sel] * tot[sel]).sum())
    # sum |x|^2 (pi_s * p) = m2(pi_s) p_hat(0) + pi_hat_s(0) m2(p), first moments vanish
    sum_m2 = float((m2[sel] * ph0 + tot[sel] * m2p).sum())
    lam_c = 1.0 - ph0 * sum_pi / eps
    residual = lam_c - params.lam
    denom = 1.0 + sum_npi * ph0
    if abs(denom) < 1e-6:
        raise InvariantViolation(f"denominator {denom!r} too close to zero")
    A = (1.0 + sum_pi) / denom
    v = (params.lam + sum_m2 / (sigma2 * eps)) / denom
    slope, tail = _tail_fit(np.abs(tot), pi.n_max)
    return LaceConstants(lambda_c_eps=lam_c, A_eps=A, v_eps=v, residual=residual,
                         denominator=denom, sum_pi=sum_pi, sum_s_pi=sum_npi * eps,
                         sum_m2=sum_m2, n_cut=pi.n_max, tail_slope=slope,
                         tail_bound=tail * ph0 / eps, lam=params.lam, eps=eps)


def bisect_critical(extractor, params, lo=0.0, hi=None, tol=1e-4, max_iter=200, scan=16):
    """Locate the zero of the critical-point residual in lambda.

    ``extractor(lam)`` returns the pi field at that lambda. If the end points
    do not bracket a zero, the first sign change on a ``scan``-point grid is
    used (truncated pi need not make the residual monotone). Returns
    (lambda, residual history).
    """
    if hi is None:
        hi = 1.0 / (params.eps * float(params.kernel.mass.max()))

    def resid(lam):
        q = params.with_(lam=lam)
        return lace_constants(extractor(lam), q, 1.0).residual

    r_lo, r_hi = resid(lo), resid(hi)
    hist = [(lo, r_lo), (hi, r_hi)]
    if r_lo * r_hi > 0:
        grid = np.linspace(lo, hi, scan + 1)
        prev = (lo, r_lo)
        for lam in grid[1:-1]:
            r = resid(float(lam))
            hist.append((float(lam), r))
            if r * prev[1] <= 0:
                lo, r_lo, hi = prev[0], prev[1], float(lam)
                break
            prev = (float(lam), r)
        else:
            raise ValidationError("lambda", f"no sign change of the residual on [{lo}, {hi}]")
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        r_mid = resid(mid)
        hist.append((mid, r_mid))
        if r_mid == 0.0:
            lo = hi = mid
            break
        if (r_mid > 0) == (r_lo > 0):
            lo, r_lo = mid, r_mid
        else:
            hi = mid
    return 0.5 * (lo + hi), hist
