import math

import numpy as np
import pytest

from fcsolve.augmented import cokernel_basis, special_system
from fcsolve.averaging import BogovskiiWeight, ConicWeight, b_eta_closed_form, closed_form_kernel
from fcsolve.diffop import TestFunction, adjoint, apply, builtin
from fcsolve.ode_kernel import rough_kernel
from fcsolve.quadrature import ball_rule
from fcsolve.solve_verify import (
    BumpField, QuadratureSpec, VerificationReport, apply_operator_S, apply_P_fd, cone_predicate, convergence_ok,
    endpoint_term, greens_convergence, moments, pair_kernel, project_out_cokernel, residual_matches_beta,
    SolutionField, star_hull_predicate, verify_support,
)

QUICK = QuadratureSpec(n_radial=16, n_angular=24)


def _grid(lo, hi, n, d=2):
    g = np.linspace(lo, hi, n)
    return np.stack(np.meshgrid(*([g] * d), indexing="ij"), -1).reshape(-1, d)


def _two_bumps(a=1.0, b=-1.0):
    return BumpField.constant_bumps(2, [((0.4, 0.3), 0.5, [a]), ((-0.3, -0.2), 0.4, [b])])


def _gaussian_phi(d, ncomp, center):
    terms = [(J, center, 0.35, {(0,) * d: 1.0, tuple([1] + [0] * (d - 1)): 0.5}) for J in range(ncomp)]
    return TestFunction.gaussian(d, ncomp, terms)


def test_zero_data_gives_zero_solution():
    k = closed_form_kernel("double_divergence", BogovskiiWeight((0.0, 0.0), 1.0), 2)
    zero = BumpField.constant_bumps(2, [((0.0, 0.0), 0.5, [0.0])])
    assert np.all(apply_operator_S(k, zero, _grid(-1, 1, 5)) == 0.0)
    assert np.all(apply_operator_S(k, TestFunction.zeros(2, 1), np.array([0.2, 0.1]), QUICK) == 0.0)


def test_divergence_bogovskii_solves_equation():
    w = BogovskiiWeight((0.0, 0.0), 1.0)
    f = project_out_cokernel(_two_bumps(), cokernel_basis("divergence", 2), (0.0, 0.1), 0.6)
    k = closed_form_kernel("divergence", w, 2)
    X = _grid(-0.9, 0.9, 20)
    # h and 2h central differences combined: the 5-point fourth-order stencil
    res = apply_P_fd(builtin("divergence", 2), SolutionField(k, f, QUICK), X, h=0.02, richardson=2) - f(X).T
    assert np.max(np.abs(res)) <= 1e-5


@pytest.mark.parametrize("name,kind", [("divergence", "conic"), ("double_divergence", "bogovskii")])
def test_greens_identity_converges(name, kind):
    P = builtin(name, 2)
    sys = special_system(name, 2)
    w = ConicWeight((1.0, 0.0), 0.8) if kind == "conic" else BogovskiiWeight((0.2, 0.2), 1.0)
    k = closed_form_kernel(name, w, 2)
    phi = _gaussian_phi(2, P.r0, [0.1, 0.0])
    psi = apply(adjoint(P), phi)
    rng = np.random.default_rng(12)
    for y in rng.uniform(-0.3, 0.3, (3, 2)):
        res = greens_convergence(k, sys, phi, psi, y, QuadratureSpec(n_radial=8, n_angular=8, levels=2))
        assert res[-1] <= 1e-6
        assert convergence_ok(res, floor=1e-11)


def test_conic_pairing_is_average_of_rough_kernels():
    w = ConicWeight((1.0, 0.0), 0.7)
    P = builtin("divergence", 2)
    sys = special_system("divergence", 2)
    phi = TestFunction.gaussian(2, 1, [(0, [0.3, 0.1], 0.4, {(0, 0): 1.0, (0, 1): 0.5})])
    psi = apply(adjoint(P), phi)
    y = np.array([0.1, 0.05])
    direct = pair_kernel(closed_form_kernel("divergence", w, 2), psi, y, QuadratureSpec(24, 24))
    t, wt = np.polynomial.legendre.leggauss(64)
    avg = np.zeros(1)
    for a, ww in zip(0.7 * t, 0.7 * wt):
        om = np.array([math.cos(a), math.sin(a)])
        avg += ww * w(om) * rough_kernel(sys, y, y + 12 * om).pair_K_test(psi)
    assert np.max(np.abs(direct - avg)) <= 1e-8
    assert np.max(np.abs(direct - phi(y[None])[:, 0])) <= 1e-8


def test_conic_solution_support():
    w = ConicWeight((1.0, 0.0), 0.6)
    f = BumpField.constant_bumps(2, [((0.2, 0.1), 0.6, [1.0]), ((-0.3, -0.3), 0.5, [0.7])])
    k = closed_form_kernel("divergence", w, 2)
    rng = np.random.default_rng(13)
    ang = rng.uniform(0.6 + 0.2, 2 * math.pi - 0.8, 200)
    X = rng.uniform(2.0, 4.0, 200)[:, None] * np.stack([np.cos(ang), np.sin(ang)], 1)
    rep = verify_support(lambda x: apply_operator_S(k, f, x, QUICK), lambda x: np.zeros(len(x), bool), X, 1e-10)
    assert rep.passed and rep.details["n_outside"] == 200
    pred = cone_predicate(f.balls(), w)
    G = _grid(-3, 3, 15)
    assert verify_support(lambda x: apply_operator_S(k, f, x, QUICK), pred, G, 1e-10).passed
    assert not np.all(pred(G))


def test_bogovskii_solution_support():
    w = BogovskiiWeight((0.0, 0.0), 0.5)
    f = project_out_cokernel(_two_bumps(), cokernel_basis("divergence", 2), (0.0, 0.1), 0.4)
    k = closed_form_kernel("divergence", w, 2)
    pred = star_hull_predicate(f.balls(), w)
    G = _grid(-1.5, 1.5, 16)
    rep = verify_support(lambda x: apply_operator_S(k, f, x, QUICK), pred, G, 1e-10)
    assert rep.passed and rep.details["n_outside"] > 50


def test_data_tail_outside_support():
    f = _two_bumps()
    G = _grid(-2, 2, 21)
    pred = lambda X: np.any([np.linalg.norm(X - c, axis=1) < R for c, R in f.balls()], axis=0)  # noqa: E731
    assert verify_support(f, pred, G, 1e-12).residual_max == 0.0


def test_report_pass_flag():
    rep = verify_support(lambda x: np.array([1e-9]), lambda X: np.zeros(len(X), bool), np.zeros((3, 2)), 1e-10)
    assert isinstance(rep, VerificationReport) and not rep.passed
    assert rep.to_dict()["residual_max"] == 1e-9


def test_projection_single_moment():
    basis = cokernel_basis("divergence", 2)
    f = BumpField.constant_bumps(2, [((0.3, 0.0), 0.4, [2.0])])
    fp = project_out_cokernel(f, basis, (-0.2, 0.2), 0.3)
    assert abs(moments(basis, fp)[0]) <= 1e-12
    mass = moments(basis, f)[0]
    X = np.array([[-0.2, 0.2], [-0.1, 0.25]])
    unit = BumpField.constant_bumps(2, [((-0.2, 0.2), 0.3, [1.0])])
    unit = unit.scale(1.0 / moments(basis, unit)[0])
    assert np.allclose(fp(X), f(X) - mass * unit(X), atol=1e-12)


@pytest.mark.parametrize("name", ["double_divergence", "symmetric_divergence", "tracefree_double_divergence"])
def test_projection_cancels_all_moments(name):
    basis = cokernel_basis(name, 2)
    P = builtin(name, 2)
    rng = np.random.default_rng(14)
    f = BumpField.constant_bumps(2, [((0.4, 0.3), 0.5, list(rng.normal(size=P.r0))),
                                     ((-0.3, -0.2), 0.4, list(rng.normal(size=P.r0)))])
    assert np.max(np.abs(moments(basis, f))) > 1e-3
    fp = project_out_cokernel(f, basis, (0.0, 0.1), 0.6)
    assert np.max(np.abs(moments(basis, fp))) <= 1e-11


def test_projection_leaves_orthogonal_data():
    basis = cokernel_basis("double_divergence", 2)
    f = project_out_cokernel(_two_bumps(1.0, -0.5), basis, (0.0, 0.1), 0.6)
    again = project_out_cokernel(f, basis, (0.5, -0.5), 0.3)
    X = _grid(-1, 1, 9)
    assert np.max(np.abs(again(X) - f(X))) <= 1e-12


def test_projection_singular_gram():
    basis = cokernel_basis("double_divergence", 2)
    with pytest.raises(np.linalg.LinAlgError):
        project_out_cokernel(_two_bumps(), basis, (0.0, 0.0), 1e-8)


def test_residual_law_double_divergence():
    w = BogovskiiWeight((0.0, 0.0), 1.0)
    P = builtin("double_divergence", 2)
    k = closed_form_kernel("double_divergence", w, 2)
    b = b_eta_closed_form("double_divergence", w, 2)
    X = _grid(-1.2, 1.2, 8)
    for f in (_two_bumps(1.0, -0.5), project_out_cokernel(_two_bumps(1.0, -0.5), cokernel_basis("double_divergence", 2),
                                                           (0.0, 0.1), 0.6)):
        rep = residual_matches_beta(P, k, b, f, X, tol=1e-4, quad=QuadratureSpec(24, 36))
        assert rep.passed, rep.residual_max


def test_residual_law_zero_data():
    w = BogovskiiWeight((0.0, 0.0), 1.0)
    zero = BumpField.constant_bumps(2, [((0.0, 0.0), 0.5, [0.0])])
    rep = residual_matches_beta(builtin("double_divergence", 2), closed_form_kernel("double_divergence", w, 2),
                                b_eta_closed_form("double_divergence", w, 2), zero, _grid(-1, 1, 4))
    assert rep.residual_max == 0.0 and rep.details["rhs_max"] == 0.0


def test_translation_covariance():
    w = ConicWeight((0.8, 0.6), 0.7)
    k = closed_form_kernel("double_divergence", w, 2)
    f = _two_bumps()
    a = np.array([0.7, -0.4])
    shifted = BumpField.constant_bumps(2, [((1.1, -0.1), 0.5, [1.0]), ((0.4, -0.6), 0.4, [-1.0])])
    X = _grid(-1.5, 1.5, 6)
    u = apply_operator_S(k, f, X, QUICK)
    v = apply_operator_S(k, shifted, X + a, QUICK)
    assert np.max(np.abs(u - v)) <= 1e-10


def test_duality_with_endpoint_term():
    w = BogovskiiWeight((0.0, 0.0), 1.0)
    P = builtin("double_divergence", 2)
    k = closed_form_kernel("double_divergence", w, 2)
    b = b_eta_closed_form("double_divergence", w, 2)
    f = _two_bumps(1.0, -0.5)
    phi = TestFunction.gaussian(2, 1, [(0, [0.1, 0.0], 0.35, {(0, 0): 1.0, (1, 0): 0.3})])
    psi = apply(adjoint(P), phi)
    c, R = phi.support_ball(1e-16)
    pts, wts = ball_rule(2, R, 40, center=c)
    u = apply_operator_S(k, f, pts, QUICK)
    lhs = np.sum(np.einsum("nk,kn->n", u, np.real(psi(pts))) * wts)
    f_phi = 0.0
    for bump in f.bumps:
        bp, bw = ball_rule(2, bump.radius, 48, center=np.array(bump.center))
        f_phi += np.sum(bump(bp)[0] * np.real(phi(bp))[0] * bw)
    Bf = endpoint_term(b, f, pts)
    rhs = f_phi - np.sum(np.einsum("nk,kn->n", Bf, np.real(phi(pts))) * wts)
    assert abs(lhs - rhs) <= 1e-6
