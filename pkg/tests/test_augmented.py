import zlib

import numpy as np
import pytest

from fcsolve.augmented import (
    AugmentedSystem, GradingViolation, annihilates, aug_residual, cokernel_basis, curvature,
    curvature_exact_zero, is_completely_integrable, maximal_from_certificate, special_conformal_as_printed,
    special_system, with_callable_B,
)
from fcsolve.diffop import ThresholdError, TestFunction, adjoint_symbol, builtin, random_test_function
from fcsolve.fc_cert import find_certificate
from fcsolve.multipoly import GaussianRational, multi_indices_upto

EXPECTED_SIZE = {  # (name, d) -> #A of the flat special system
    ("divergence", 2): 1, ("divergence", 3): 1,
    ("double_divergence", 2): 3, ("double_divergence", 3): 4,
    ("tracefree_double_divergence", 2): 4, ("tracefree_double_divergence", 3): 5,
    ("symmetric_divergence", 2): 3, ("symmetric_divergence", 3): 6,
    ("tracefree_symmetric_divergence", 3): 10,
    ("einstein_constraint", 2): 6, ("einstein_constraint", 3): 10,
    ("einstein_constraint_cmc", 3): 14,
}


def _cases():
    return sorted(EXPECTED_SIZE)


def _random_poly_field(rng, d, ncomp, degree):
    return TestFunction.polynomial(d, [{a: int(rng.integers(-3, 4)) for a in multi_indices_upto(d, degree)}
                                       for _ in range(ncomp)])


def test_divergence_maximal_system():
    P = builtin("divergence", 2)
    sys = maximal_from_certificate(P, find_certificate(adjoint_symbol(P)))
    assert sys.n == 1 and not sys.B
    assert sys.C == {(i, 0, ((0, 0), i)): GaussianRational(-1) for i in range(2)}


def test_double_divergence_maximal_size():
    P = builtin("double_divergence", 3)
    sys = maximal_from_certificate(P, find_certificate(adjoint_symbol(P)))
    assert sys.n == 4 and min(sys.degree) == -1 and sys.N0 == 2


@pytest.mark.parametrize("name,d,size", [("symmetric_divergence", 3, 12), ("tracefree_symmetric_divergence", 3, 30),
                                         ("einstein_constraint_cmc", 3, 40)])
def test_maximal_sizes(name, d, size):
    from math import comb
    P = builtin(name, d)
    cert = find_certificate(adjoint_symbol(P))
    sys = maximal_from_certificate(P, cert)
    # all jets of order below N0 of every component of phi
    assert sys.n == P.r0 * sum(comb(d + k - 1, k) for k in range(cert.N0)) == size


def test_killing_maximal_residual():
    rng = np.random.default_rng(0)
    P = builtin("symmetric_divergence", 3)
    sys = maximal_from_certificate(P, find_certificate(adjoint_symbol(P)))
    assert sys.n == 3 + 9
    phi = _random_poly_field(rng, 3, 3, 3)
    assert aug_residual(sys, P, phi, rng.uniform(-1, 1, (50, 3))) <= 1e-12


@pytest.mark.parametrize("name,d", _cases())
def test_special_systems(name, d):
    rng = np.random.default_rng(zlib.crc32(f"{name}{d}".encode()))
    P = builtin(name, d)
    sys = special_system(name, d)
    assert sys.n == EXPECTED_SIZE[(name, d)]
    sys.check_grading()
    assert curvature_exact_zero(sys)
    assert np.max(np.abs(curvature(sys))) == 0.0
    x = rng.uniform(-1, 1, (50, d))
    assert aug_residual(sys, P, _random_poly_field(rng, d, P.r0, sys.N0 + 1), x) <= 1e-11
    assert aug_residual(sys, P, random_test_function(rng, d, P.r0), x) <= 1e-11
    assert AugmentedSystem.loads(sys.dumps()).dumps() == sys.dumps()


@pytest.mark.parametrize("name,d", [c for c in _cases() if not c[0].startswith("einstein")])
def test_maximal_systems_match_certificate_degree(name, d):
    rng = np.random.default_rng(1)
    P = builtin(name, d)
    cert = find_certificate(adjoint_symbol(P))
    sys = maximal_from_certificate(P, cert)
    sys.check_grading()
    assert sys.N0 == cert.N0 == special_system(name, d).N0
    assert aug_residual(sys, P, _random_poly_field(rng, d, P.r0, cert.N0 + 1), rng.uniform(-1, 1, (50, d))) <= 1e-11


def test_grading_violation_detected():
    sys = special_system("double_divergence", 2)
    sys.B[(0, 0, 1)] = GaussianRational(1)  # phi row fed by omega: allowed
    sys.check_grading()
    sys.C[(0, 0, ((1, 0), 0))] = GaussianRational(1)  # phi row fed by a derivative of P*phi: too deep
    with pytest.raises(GradingViolation):
        sys.check_grading()


def test_curvature_examples():
    base = special_system("divergence", 2)
    exact = with_callable_B(base, lambda x: np.array([[[x[1]]], [[x[0]]]]))  # B = grad(x1 x2)
    ok, worst = is_completely_integrable(exact, np.random.default_rng(2).uniform(-1, 1, (5, 2)))
    assert ok and worst <= 1e-10
    bad = with_callable_B(base, lambda x: np.array([[[0.0]], [[x[0]]]]))
    F = curvature(bad, [0.3, -0.2])
    assert F[0, 1, 0, 0] == pytest.approx(1.0, abs=1e-9)
    assert not is_completely_integrable(bad)[0]
    assert is_completely_integrable(special_system("double_divergence", 3)) == (True, 0.0)


@pytest.mark.parametrize("name,expected", [
    ("divergence", lambda d: 1), ("double_divergence", lambda d: d + 1),
    ("tracefree_double_divergence", lambda d: d + 2), ("symmetric_divergence", lambda d: d * (d + 1) // 2),
    ("tracefree_symmetric_divergence", lambda d: (d + 1) * (d + 2) // 2)])
@pytest.mark.parametrize("d", [2, 3])
def test_cokernel_bases(name, expected, d):
    try:
        P = builtin(name, d)
    except ThresholdError:
        with pytest.raises(ThresholdError):
            cokernel_basis(name, d)
        return
    B = cokernel_basis(name, d)
    assert B.dim == expected(d) == special_system(name, d).n
    assert all(annihilates(P, Z) for Z in B.elements)
    assert np.linalg.cond(B.gram()) < 1e8


def test_named_bases():
    B = cokernel_basis("double_divergence", 2)
    assert B.labels == ["1", "x1", "x2"]
    K = cokernel_basis("symmetric_divergence", 3)
    assert K.dim == 6
    C = cokernel_basis("tracefree_symmetric_divergence", 3)
    assert C.dim == 10


def test_einstein_basis_is_block_union():
    for d, name in ((3, "einstein_constraint"), (3, "einstein_constraint_cmc")):
        P = builtin(name, d)
        B = cokernel_basis(name, d)
        assert B.dim == special_system(name, d).n
        assert all(annihilates(P, Z) for Z in B.elements)


def test_special_conformal_needs_factor_two():
    P = builtin("tracefree_symmetric_divergence", 3)
    for J in range(3):
        printed = special_conformal_as_printed(3, J)
        assert not annihilates(P, printed)
        # 2 x_J x - |x|^2 e_J lies in the kernel; it differs from the printed field by x_J x
        from fcsolve.multipoly import madd, unit
        xJx = TestFunction.polynomial(3, [{madd(unit(3, J), unit(3, j)): 1} for j in range(3)])
        assert annihilates(P, printed + xJx)
