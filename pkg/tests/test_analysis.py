import math

import numpy as np
import pytest

from lacecp import ValidationError
from lacecp.analysis import (ScaledRangeConfig, continuum_rw, continuum_study,
                             fit_gaussian_points, gaussian_fit, lambda_iteration,
                             moment_profile, pi_hat0_from_tau_hat0, rw_susceptibility,
                             scaled_range_experiment, susceptibility_fit,
                             susceptibility_from_pi, triangle_estimate)
from lacecp.exact import exact_pi_dp, exact_two_point_dp
from lacecp.kernel import kernel_moments, make_uniform_kernel
from lacecp.lace import forward_solve, lace_constants, random_walk_pi
from lacecp.model import ModelParams, SpaceTimeField

from conftest import make_params


def rw_tau(d=1, L=1, eps=1.0, lam=1.0, n=20):
    params = make_params(d, L, eps, lam, n_max=n)
    return forward_solve(random_walk_pi(params), params), params


def test_gaussian_fit_random_walk():
    tau, _ = rw_tau(n=256)
    fit = gaussian_fit(tau, 1.0, [256], 1)
    assert abs(fit.A - 1) < 1e-3 and abs(fit.v - 1) < 1e-3
    assert math.isfinite(fit.residual_norm)
    assert fit.k_range[1] ** 2 / math.log(2 + 256) <= 1.0


def test_gaussian_fit_synthetic():
    sigma2, d = 2.5, 3
    src = lambda n, kv: 1.3 * np.exp(-0.9 * np.sum(kv**2, 1) * sigma2 * n / (2 * d))
    fit = gaussian_fit(src, sigma2, [5, 10, 20], d)
    assert fit.A == pytest.approx(1.3, abs=1e-10) and fit.v == pytest.approx(0.9, abs=1e-10)
    assert fit.drift < 1e-10
    pinned = gaussian_fit(src, sigma2, [5, 10], d, pin_A=1.3)
    assert pinned.v == pytest.approx(0.9, abs=1e-10)
    assert fit.to_csv().splitlines()[0] == "t,k,observed,model,residual"


def test_fit_rejects_degenerate_window():
    with pytest.raises(ValidationError):
        fit_gaussian_points([1, 1], [0.1, 0.1], [0.5, 0.5], 1.0, 1)
    with pytest.raises(ValidationError):
        fit_gaussian_points([1, 1], [0.0, 0.1], [0.5, -0.1], 1.0, 1)


def test_fit_agrees_with_lace_constants_on_exact_model():
    """Freeze the exact pi, tune lambda to zero the critical residual for that
    pi, then compare the fitted (A, v) with the summed-pi formulas."""
    k = make_uniform_kernel(1, 1)
    pi = exact_pi_dp(ModelParams(k, 1.0, 0.9, 6))
    N = 200
    P = SpaceTimeField.zeros(1, 1.0, N, N)
    P.values[:7, N - 6: N + 7] = pi.values
    lam = 1.0 / (1.0 + P.totals()[2:].sum())
    q = ModelParams(k, 1.0, lam, N)
    c = lace_constants(P, q, 1.0)
    assert abs(c.residual) < 1e-14
    fit = gaussian_fit(forward_solve(P, q), 1.0, [150, 200], 1)
    assert abs(fit.A - c.A_eps) < 1e-3
    assert abs(fit.v - c.v_eps) < 1e-3


def test_moment_profile_examples():
    tau, params = rw_tau(1, 2, 0.5, 1.0, 20)
    mp = moment_profile(tau, 2)
    assert np.allclose(mp.ratio, 2.5 * mp.t, atol=1e-12)
    tau0, _ = rw_tau(1, 1, 0.5, 0.0, 20)
    mp0 = moment_profile(tau0, 1)
    assert np.allclose(mp0.sup, 0.5 ** np.arange(21), atol=1e-15)
    assert np.all(mp.envelope >= mp.sup - 1e-12)
    assert mp.to_csv().startswith("t,total,ratio,sup,envelope")


def test_moment_ratio_linear_on_exact_pi():
    q = make_params(1, 1, 1.0, 0.8, n_max=6)
    pi = exact_pi_dp(q)
    big = make_params(1, 1, 1.0, 0.8, n_max=40)
    P = SpaceTimeField.zeros(1, 1.0, 40, 40)
    P.values[:7, 34:47] = pi.values
    slope, _, dev = moment_profile(forward_solve(P, big), 1).ratio_slope(10, 40)
    assert slope > 0 and dev < 0.01


def test_triangle_examples():
    tau0, _ = rw_tau(lam=0.0, n=8)
    assert triangle_estimate(tau0).value == 1.0
    assert triangle_estimate(tau0, route="x").value == 1.0
    tau, _ = rw_tau(lam=0.5, n=10)
    a = triangle_estimate(tau)
    b = triangle_estimate(tau, route="x")
    assert abs(a.value - b.value) < 1e-8
    vals = [triangle_estimate(rw_tau(lam=lam, n=10)[0]).value for lam in (0.0, 0.25, 0.5, 0.75)]
    assert np.all(np.diff(vals) > 0)
    with pytest.raises(ValidationError):
        triangle_estimate(tau, M=10)


def test_susceptibility():
    lams = np.linspace(0.1, 0.9, 9)
    chis = np.array([rw_susceptibility(l) for l in lams])
    fit = susceptibility_fit(lams, chis, 1.0)
    assert abs(fit.C - 1) < 1e-6 and abs(fit.gamma - 1) < 1e-6
    assert np.allclose(chis * (1 - lams), 1.0)
    for lam in (0.2, 0.7):
        params = make_params(1, 1, 0.5, lam, n_max=4)
        chi, den = susceptibility_from_pi(random_walk_pi(params), params)
        assert den == pytest.approx(1 - lam) and chi == pytest.approx(1 / (1 - lam))
    with pytest.raises(ValidationError):
        susceptibility_fit([0.5, 1.0], [2.0, 3.0], 1.0)


def test_susceptibility_exact_model_ci():
    lams = [0.3, 0.4, 0.5, 0.6]
    chis = []
    for lam in lams:
        q = make_params(1, 1, 1.0, lam, n_max=6)
        chis.append(susceptibility_from_pi(exact_pi_dp(q), q)[0])
    fit = susceptibility_fit(lams, chis, 1.2022)
    lo, hi = fit.ci_gamma()
    assert lo <= fit.gamma <= hi and np.isfinite(fit.se_gamma)


def test_continuum_rw_and_pure_death():
    k = make_uniform_kernel(1, 1)
    kv = np.linspace(0, 1.0, 32)[:, None]
    tab = continuum_rw(k, 1.0, 2.0, [1, 0.5, 0.25, 0.125, 0.0625], kv)
    assert all(abs(r - 0.5) <= 0.1 for r in tab.ratios)
    assert tab.cauchy

    def death(e):
        q = ModelParams(k, e, 0.0, int(round(2 / e)))
        return forward_solve(random_walk_pi(q), q)

    eps = [1, 0.5, 0.25, 0.125]
    tab = continuum_study(death, eps, 2.0)
    vals = [(1 - e) ** (2 / e) for e in eps]
    assert np.allclose(tab.diffs, np.abs(np.diff(vals)), atol=1e-15)
    with pytest.raises(ValidationError):
        continuum_study(death, [0.3], 2.0)


def test_continuum_exact_box():
    k = make_uniform_kernel(1, 1)
    tab = continuum_study(lambda e: exact_two_point_dp(ModelParams(k, e, 1.0, int(round(2 / e))),
                                                       box=3),
                          [1, 0.5, 0.25, 0.125, 0.0625], 2.0)
    assert all(r <= 0.75 for r in tab.ratios)


def test_scaled_range_config():
    assert ScaledRangeConfig(2, 1.0, 2.0, 8).alpha == 1.0
    with pytest.raises(ValidationError):
        ScaledRangeConfig(4, 0.0, 2.0, 8)
    with pytest.raises(ValidationError):
        ScaledRangeConfig(5, 1.0, 2.0, 8)
    cfg = ScaledRangeConfig(2, 1.0, 2.0, 8)
    assert cfg.L_T == 16 and cfg.horizon == pytest.approx(math.log(8))


def test_scaled_range_rw_backend():
    rep = scaled_range_experiment(ScaledRangeConfig(2, 1.0, 2.0, 8), "rw")
    assert abs(rep.fit.A - 1) < 0.01 and abs(rep.fit.v - 1) < 0.01
    assert rep.lambda_T == [1.0] * len(rep.lambda_T)
    with pytest.raises(ValidationError):
        scaled_range_experiment(ScaledRangeConfig(2, 1.0, 2.0, 8), "rw", t_grid=[3.0])


def test_scaled_range_mc_small():
    rep = scaled_range_experiment(ScaledRangeConfig(2, 1.0, 1.0, 4), "mc", samples=500, seed=2)
    assert 0.8 <= rep.fit.A <= 1.2
    assert rep.samples == 500


def test_lambda_iteration_helpers():
    eps, lam = 0.5, 0.9
    tau0 = (1 - eps + lam * eps) ** np.arange(6)
    pi = pi_hat0_from_tau_hat0(tau0, 1 - eps + lam * eps)
    assert pi[0] == 1 and np.allclose(pi[1:], 0)
    assert lambda_iteration(tau0, eps, lam) == [1.0] * 6


def test_sigma2_recomputed_from_rounded_kernel():
    cfg = ScaledRangeConfig(2, 1.0, 1.3, 4)
    rep = scaled_range_experiment(cfg, "rw")
    assert rep.sigma2_T == pytest.approx(kernel_moments(cfg.kernel()).sigma2)
