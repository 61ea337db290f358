import numpy as np
import pytest

from lacecp import CapExceeded, ValidationError
from lacecp.exact import (BondEnumeration, brute_force_piN, brute_force_two_point,
                          exact_two_point_dp, subset_chain)
from lacecp.lace import invert_to_pi

from conftest import make_params
from oracles import brute_tau, double_connected_prob


def test_one_step_is_p():
    params = make_params(1, 2, 0.5, 1.2, n_max=1)
    tau = exact_two_point_dp(params)
    assert np.allclose(tau.values[1], params.p_array(), atol=1e-15)


def test_two_step_far_site():
    for lam in (0.4, 1.0, 1.7):
        tau = exact_two_point_dp(make_params(lam=lam, n_max=2))
        assert tau.at(2, 2) == pytest.approx(lam**2 / 4, abs=1e-15)


def test_pure_death():
    params = make_params(1, 1, 0.5, 0.0, n_max=4)
    tau = exact_two_point_dp(params)
    for n in range(5):
        expect = np.zeros(9)
        expect[4] = 0.5**n
        assert np.allclose(tau.values[n], expect)


def test_dp_slice_probabilities_sum_to_one():
    for st in subset_chain(make_params(1, 1, 0.5, 1.3, n_max=4)):
        assert abs(st.prob.sum() - 1.0) < 1e-12 and np.all(st.prob >= -1e-15)


@pytest.mark.parametrize("L,eps,lam,n", [(1, 1.0, 0.9, 3), (1, 0.5, 1.2, 2), (2, 1.0, 0.3, 2)])
def test_enumeration_matches_naive_oracle(L, eps, lam, n):
    params = make_params(1, L, eps, lam, n_max=n)
    ref = brute_tau(1, L, eps, lam, n)
    for route in (brute_force_two_point(params), exact_two_point_dp(params)):
        for (t, x), v in ref.items():
            assert route.at(t, x) == pytest.approx(v, abs=1e-12)
        assert route.values.sum() == pytest.approx(sum(ref.values()), abs=1e-12)


def test_single_bond_events():
    tau = brute_force_two_point(make_params(lam=1.0, n_max=1))
    assert tau.at(1, 1) == tau.at(1, -1) == 0.5


def test_pi0_examples():
    for lam in (0.5, 0.8, 1.0):
        params = make_params(lam=lam, n_max=2)
        p0 = brute_force_piN(params, 0)
        assert p0.at(0, 0) == 1.0
        assert np.all(p0.values[1] == 0.0)
        assert p0.at(2, 0) == pytest.approx((lam / 2) ** 4, abs=1e-15)


def test_pi0_matches_maxflow_oracle():
    params = make_params(1, 1, 0.5, 1.2, n_max=2)
    ref = double_connected_prob(1, 1, 0.5, 1.2, 2)
    p0 = brute_force_piN(params, 0)
    for (t, x), v in ref.items():
        assert p0.at(t, x) == pytest.approx(v, abs=1e-12)
    tau = brute_force_two_point(params)
    assert np.all(p0.values <= tau.values + 1e-15)


@pytest.mark.parametrize("eps,lam", [(1.0, 0.8), (1.0, 1.3), (0.5, 0.9)])
def test_lace_identity_n2(eps, lam):
    params = make_params(1, 1, eps, lam, n_max=2)
    pi = invert_to_pi(brute_force_two_point(params), params)
    alt = brute_force_piN(params, 0).values - brute_force_piN(params, 1).values
    assert np.max(np.abs(pi.values[2] - alt[2])) < 1e-12


def test_monotone_in_lambda():
    prev = None
    for lam in np.linspace(0.1, 1.9, 7):
        tau = exact_two_point_dp(make_params(1, 1, 0.5, float(lam), n_max=3))
        if prev is not None:
            assert np.all(tau.values >= prev - 1e-15)
        prev = tau.values


def test_caps_and_errors():
    with pytest.raises(CapExceeded):
        BondEnumeration(make_params(1, 2, 0.5, 1.0, n_max=3), cap=10)
    with pytest.raises(CapExceeded):
        exact_two_point_dp(make_params(1, 2, 1.0, 1.0, n_max=6), cap=8)
    with pytest.raises(ValidationError):
        brute_force_piN(make_params(), 2)


def test_box_restriction_is_lower_bound():
    params = make_params(1, 1, 0.5, 1.0, n_max=6)
    full = exact_two_point_dp(params)
    boxed = exact_two_point_dp(params, box=2)
    assert np.all(boxed.values <= full.values + 1e-15)
    assert boxed.meta["backend"] == "dp-box2"
