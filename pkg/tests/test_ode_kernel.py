import zlib
from fractions import Fraction

import numpy as np
import pytest
from scipy.integrate import quad_vec

from fcsolve.augmented import SPECIAL_NAMES, cokernel_basis, special_system, with_callable_B
from fcsolve.diffop import TestFunction, adjoint, apply, builtin, random_test_function
from fcsolve.multipoly import GaussianRational
from fcsolve.ode_kernel import (
    GenTrig, curvature_oracle_radial, fundamental_matrix, fundamental_matrix_exact, pair_b_exact,
    radial_numeric, recover_test, rough_kernel,
)

ZOO = [(nm, d) for nm in SPECIAL_NAMES for d in (2, 3)
       if not (nm == "tracefree_symmetric_divergence" and d == 2)
       and not (nm == "einstein_constraint_cmc" and d == 2)]


def _exact_to_array(M):
    return np.array([[complex(v) for v in row] for row in M])


def test_zero_connection_is_identity():
    sys = special_system("divergence", 2)
    for s, t in [(0.0, 1.0), (0.2, 0.7), (0.5, 0.5)]:
        assert np.array_equal(fundamental_matrix(sys, [0.1, -0.3], [1.0, 2.0], s, t), np.eye(1))


def test_gradient_connection_gives_exponential():
    sys = with_callable_B(special_system("divergence", 2), lambda x: np.array([[[1.0]], [[0.0]]]))
    Pi = fundamental_matrix(sys, [0.0, 0.0], [1.0, 0.0])
    assert abs(Pi[0, 0] - np.exp(-1.0)) <= 1e-12


def test_killing_transport_is_affine_in_displacement():
    sys = special_system("symmetric_divergence", 2)
    y = np.array([0.3, -0.2])
    v = np.array([0.7, 1.1])
    P1 = fundamental_matrix(sys, y, y + v)
    P2 = fundamental_matrix(sys, y, y + 2 * v)
    assert np.max(np.abs(P2 - 2 * P1 + np.eye(sys.n))) <= 1e-14
    assert not np.allclose(P1, np.eye(sys.n))


@pytest.mark.parametrize("name,d", ZOO)
def test_exact_transport_matches_numeric(name, d):
    sys = special_system(name, d)
    y = [Fraction(1, 3), Fraction(-1, 2), Fraction(2, 5)][:d]
    y1 = [Fraction(3, 4), Fraction(1, 7), Fraction(-1, 3)][:d]
    exact = _exact_to_array(fundamental_matrix_exact(sys, y, y1))
    B = sys.B_numeric()
    ode = with_callable_B(sys, lambda x: B)
    yf, y1f = np.array(y, float), np.array(y1, float)
    assert np.max(np.abs(fundamental_matrix(sys, yf, y1f) - exact)) <= 1e-12
    assert np.max(np.abs(fundamental_matrix(ode, yf, y1f) - exact)) <= 1e-12


def test_cocycle_property():
    rng = np.random.default_rng(3)
    base = special_system("double_divergence", 2)

    def B_fn(x):
        out = np.zeros((2, 3, 3))
        out[0, 0, 1] = np.sin(x[0])
        out[1, 2, 0] = 0.5 + x[1] ** 2
        out[0, 1, 2] = np.cos(x[0] * x[1])
        return out

    sys = with_callable_B(base, B_fn)
    y, y1 = rng.normal(size=2), rng.normal(size=2)
    for _ in range(5):
        s, u, t = np.sort(rng.uniform(0, 1, 3))
        lhs = fundamental_matrix(sys, y, y1, s, u) @ fundamental_matrix(sys, y, y1, u, t)
        assert np.max(np.abs(lhs - fundamental_matrix(sys, y, y1, s, t))) <= 1e-11


def test_interval_order_checked():
    with pytest.raises(ValueError):
        fundamental_matrix(special_system("divergence", 2), [0, 0], [1, 0], 0.8, 0.2)


def test_divergence_rough_kernel_pairings():
    rng = np.random.default_rng(0)
    sys = special_system("divergence", 2)
    y, y1 = np.array([0.2, -0.1]), np.array([-0.5, 0.9])
    rk = rough_kernel(sys, y, y1)
    psi = random_test_function(rng, 2, 2)
    phi = random_test_function(rng, 2, 1)
    v = y1 - y
    direct, _ = quad_vec(lambda s: v @ psi(y + s * v), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)
    assert abs(rk.pair_K_test(psi)[0] - direct) <= 1e-10
    assert abs(rk.pair_b_test(phi)[0] - phi(y1)[0]) <= 1e-14


def test_double_divergence_endpoint_pairing():
    rng = np.random.default_rng(1)
    sys = special_system("double_divergence", 2)
    y, y1 = np.array([0.4, 0.1]), np.array([-0.3, 0.6])
    phi = random_test_function(rng, 2, 1)
    grad = np.array([phi.derivative(a)(y1)[0] for a in [(1, 0), (0, 1)]])
    expected = phi(y1)[0] - (y1 - y) @ grad
    assert abs(rough_kernel(sys, y, y1).pair_b_test(phi)[0] - expected) <= 1e-13


def test_affine_recovery_is_exact():
    sys = special_system("double_divergence", 3)
    phi = TestFunction.polynomial(3, [{(0, 0, 0): 2, (1, 0, 0): -1, (0, 0, 1): 3}])
    P = builtin("double_divergence", 3)
    psi = apply(adjoint(P), phi)
    assert psi.is_zero()
    y, y1 = np.array([0.1, 0.2, 0.3]), np.array([1.0, -1.0, 0.5])
    assert abs(recover_test(sys, psi, phi, y, y1)[0] - phi(y)[0]) <= 1e-14


def test_constant_recovery_divergence():
    sys = special_system("divergence", 2)
    phi = TestFunction.polynomial(2, [{(0, 0): 5}])
    psi = apply(adjoint(builtin("divergence", 2)), phi)
    assert psi.is_zero()
    assert recover_test(sys, psi, phi, [0.3, 0.3], [-2.0, 1.0])[0] == pytest.approx(5.0, abs=1e-15)


def test_gaussian_recovery_double_divergence():
    rng = np.random.default_rng(7)
    sys = special_system("double_divergence", 2)
    P = builtin("double_divergence", 2)
    phi = TestFunction.gaussian(2, 1, [(0, [0.1, -0.2], 0.6, {(0, 0): 1.0})])
    psi = apply(adjoint(P), phi)
    for _ in range(5):
        y, y1 = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        assert abs(recover_test(sys, psi, phi, y, y1)[0] - phi(y)[0]) <= 1e-8


def test_killing_recovery_of_exact_covector():
    # omega = d(x1^2 x2)
    sys = special_system("symmetric_divergence", 2)
    P = builtin("symmetric_divergence", 2)
    omega = TestFunction.polynomial(2, [{(1, 1): 2}, {(2, 0): 1}])
    psi = apply(adjoint(P), omega)
    y, y1 = np.array([0.3, -0.7]), np.array([1.2, 0.4])
    assert np.max(np.abs(recover_test(sys, psi, omega, y, y1) - omega(y))) <= 1e-10


@pytest.mark.parametrize("name,d", ZOO)
def test_green_pairing_on_segments(name, d):
    rng = np.random.default_rng(zlib.crc32(f"{name}{d}".encode()))
    P = builtin(name, d)
    sys = special_system(name, d)
    for _ in range(2):
        phi = random_test_function(rng, d, P.r0, degree=2, sigma=0.8)
        psi = apply(adjoint(P), phi)
        y, y1 = rng.uniform(-0.8, 0.8, d), rng.uniform(-0.8, 0.8, d)
        target = np.asarray(phi(y))
        scale = max(1.0, float(np.max(np.abs(target))))
        assert np.max(np.abs(recover_test(sys, psi, phi, y, y1) - target)) <= 1e-8 * scale


@pytest.mark.parametrize("name,d", ZOO)
def test_endpoint_pairing_reproduces_cokernel(name, d):
    sys = special_system(name, d)
    y = [Fraction(2, 3), Fraction(-1, 5), Fraction(1, 2)][:d]
    y1 = [Fraction(-3, 7), Fraction(5, 4), Fraction(1, 9)][:d]
    for Z in cokernel_basis(name, d).elements:
        got = pair_b_exact(sys, Z, y, y1)
        want = [GaussianRational.coerce(v) for v in Z.eval_exact(y)]
        assert got == want


def test_gentrig_identities():
    t = np.linspace(0, 2, 21)
    for k in (-1.3, 0.0, 0.8):
        g = GenTrig(k)
        h = 1e-5
        ds = (g.s(t + h) - g.s(t - h)) / (2 * h)
        dc = (g.c(t + h) - g.c(t - h)) / (2 * h)
        assert np.max(np.abs(ds - g.c(t))) <= 1e-9
        assert np.max(np.abs(dc + k * g.s(t))) <= 1e-9
        assert g.s(0.0) == 0 and g.c(0.0) == 1


def test_radial_oracle_values():
    flat = curvature_oracle_radial(0.0, 1.7)
    assert (flat.c, flat.s) == (1.0, 1.7)
    assert flat.weight(np.array(0.4)) == 0.4
    sph = curvature_oracle_radial(1.0, np.pi / 2)
    assert abs(sph.c) <= 1e-15 and sph.s == pytest.approx(1.0, abs=1e-15)
    hyp = curvature_oracle_radial(-1.0, 1.0)
    assert hyp.c == pytest.approx(np.cosh(1.0), abs=1e-15)
    assert hyp.s == pytest.approx(np.sinh(1.0), abs=1e-15)


@pytest.mark.parametrize("kappa,rho", [(-1.0, 1.0), (0.0, 1.3), (1.0, np.pi / 2), (0.5, 2.0)])
def test_radial_closed_form_matches_integration(kappa, rho):
    F = lambda t: np.cos(3 * t) + t ** 2  # noqa: E731
    data = curvature_oracle_radial(kappa, rho)
    closed = data.recover(F, 0.7, -0.4)
    assert abs(closed - radial_numeric(kappa, rho, F, 0.7, -0.4)) <= 1e-12
