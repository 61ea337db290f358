import numpy as np
import pytest

from lacecp import InvariantViolation, ValidationError
from lacecp.diagrams import (DiagramGraph, Edge, LineFactors, _attach_L, apply_construction_B,
                             build_diagram_bounds, evaluate, line_function_L, next_level,
                             p0_diagrams, random_orders, sum_diagrams)
from lacecp.exact import brute_force_piN, exact_two_point_dp
from lacecp.lace import forward_solve, random_walk_pi

from conftest import make_params
from oracles import (dicts_to_array, naive_line_L, naive_spat_on_tau, st_from_field,
                     uniform_kernel_dict)


def st_to_array(st, d, R, n_max):
    slices = [dict() for _ in range(n_max + 1)]
    for (t, x), v in st.items():
        if t <= n_max:
            slices[t][x] = v
    return dicts_to_array(slices, d, R)


def single_tau_line():
    return DiagramGraph(["o", "x"], [Edge("o", "x", "tau")], 1.0, {0: [[0]]}, "tau")


@pytest.mark.parametrize("u,v", [((0, (0,)), (0, (0,))), ((0, (0,)), (1, (1,))),
                                 ((1, (-1,)), (1, (1,)))])
def test_line_function_against_nested_sums(u, v):
    params = make_params(1, 1, 1.0, 0.9, n_max=3)
    tau = exact_two_point_dp(params)
    got = line_function_L(u, v, tau, params).values
    ref = naive_line_L(u, v, st_from_field(tau), uniform_kernel_dict(1, 1), 0.9, 1.0, 1, 3)
    assert np.max(np.abs(got - st_to_array(ref, 1, params.R, 3))) < 1e-12


def test_line_function_pure_death():
    params = make_params(1, 1, 0.5, 0.0, n_max=3)
    tau = forward_solve(random_walk_pi(params), params)
    o = (0, (0,))
    assert np.all(line_function_L(o, o, tau, params).values == 0.0)
    # the same tau with a positive lambda in the line factors
    q = params.with_(lam=1.0)
    got = line_function_L(o, o, tau, q).values
    ref = naive_line_L(o, o, st_from_field(tau), uniform_kernel_dict(1, 1), 1.0, 0.5, 1, 3)
    assert np.max(np.abs(got - st_to_array(ref, 1, params.R, 3))) < 1e-14
    assert got.any()


def test_line_function_rejects_points_outside_window():
    params = make_params(1, 1, 1.0, 0.9, n_max=2)
    tau = exact_two_point_dp(params)
    with pytest.raises(ValidationError):
        line_function_L((0, (9,)), (0, (0,)), tau, params)


@pytest.mark.parametrize("lam,eps", [(0.9, 1.0), (1.2, 0.5)])
def test_spatial_construction_against_nested_sums(lam, eps):
    params = make_params(1, 1, eps, lam, n_max=3)
    tau = exact_two_point_dp(params)
    f = LineFactors(tau, params)
    g = single_tau_line()
    y = g.fresh("y")
    out = apply_construction_B(g, 0, y, "spat", level=0)
    assert len(out) == 1
    got = evaluate(out[0], f)
    ref = naive_spat_on_tau(st_from_field(tau), uniform_kernel_dict(1, 1), lam, eps, 1, 3)
    assert np.max(np.abs(got - st_to_array(ref, 1, params.R, 3))) < 1e-12


def test_construction_vanishes_at_lambda_zero():
    params = make_params(1, 1, 0.5, 0.0, n_max=3)
    tau = forward_solve(random_walk_pi(params), params)
    f = LineFactors(tau, params)
    g = single_tau_line()
    y = g.fresh("y")
    for h in apply_construction_B(g, 0, y, "both", level=0):
        assert not evaluate(h, f).any()


def test_construction_errors():
    g = single_tau_line()
    y = g.fresh("y")
    with pytest.raises(ValidationError):
        apply_construction_B(g, 3, y, "spat", level=0)
    with pytest.raises(ValidationError):
        apply_construction_B(g, 0, "x", "spat", level=0)
    with pytest.raises(ValidationError):
        apply_construction_B(g, 0, y, "sideways", level=0)


def test_endpoint_convention():
    """The y = v branch of the next level equals 2 lambda eps sum_v P(v) L(v, v; x)."""
    params = make_params(1, 1, 1.0, 0.8, n_max=3)
    tau = exact_two_point_dp(params)
    f = LineFactors(tau, params)
    le = params.lam * params.eps
    P0 = sum_diagrams(p0_diagrams(le), f)
    branch = []
    for G in p0_diagrams(le):
        g = G.copy()
        v = g.reroot()
        branch += _attach_L(g, v, v, 1, 2 * le)
    got = sum_diagrams(branch, f)
    ref = np.zeros_like(got)
    for idx in np.argwhere(P0 != 0):
        t, x = int(idx[0]), int(idx[1]) - params.R
        ref += P0[tuple(idx)] * line_function_L((t, (x,)), (t, (x,)), tau, params).values
    assert np.max(np.abs(got - 2 * le * ref)) < 1e-12


def test_p0_and_lambda_zero():
    params = make_params(1, 1, 0.5, 0.9, n_max=3)
    tau = exact_two_point_dp(params)
    b = build_diagram_bounds(tau, params, N_max=2)
    assert np.array_equal(b.P[0].values[0], (np.arange(7) == 3).astype(float))
    for P in b.P:
        assert np.all(P.values >= 0)
    z = params.with_(lam=0.0)
    tz = exact_two_point_dp(z)
    bz = build_diagram_bounds(tz, z, N_max=2)
    for P in bz.P:
        assert not P.values[1:].any()


def test_domination_tiny():
    params = make_params(1, 1, 1.0, 0.8, n_max=2)
    b = build_diagram_bounds(exact_two_point_dp(params), params, N_max=1)
    for N in (0, 1):
        assert np.all(b.P[N].values >= brute_force_piN(params, N).values - 1e-12)


def test_tilde_nonnegative():
    params = make_params(1, 1, 1.0, 0.9, n_max=3)
    b = build_diagram_bounds(exact_two_point_dp(params), params, N_max=2, with_tilde=True)
    assert set(b.P_tilde) == {(1, 1), (2, 1), (2, 2)}
    assert all(np.all(P.values >= 0) for P in b.P_tilde.values())


def test_order_independence():
    params = make_params(1, 1, 1.0, 0.9, n_max=3)
    tau = exact_two_point_dp(params)
    f = LineFactors(tau, params)
    le = params.lam * params.eps
    diagrams = next_level(next_level(p0_diagrams(le), 1, le, f), 2, le, f)
    for g in diagrams[:6]:
        base = evaluate(g, f)
        topo = evaluate(g, f, order="topological")
        assert np.max(np.abs(base - topo)) < 1e-12
        for order in random_orders(g, 3, seed=1):
            assert np.max(np.abs(base - evaluate(g, f, order=order))) < 1e-12


def test_graph_invariants():
    g = DiagramGraph(["o", "a", "x"], [Edge("o", "a", "tau"), Edge("a", "o", "tau")])
    with pytest.raises(InvariantViolation):
        g.validate()
    for h in p0_diagrams(0.5):
        h.validate()


def test_n_max_cap():
    params = make_params(1, 1, 1.0, 0.9, n_max=1)
    with pytest.raises(Exception):
        build_diagram_bounds(exact_two_point_dp(params), params, N_max=4)
