import numpy as np
import pytest

from fcsolve.diffop import DiffOperator, adjoint_symbol, builtin, pair_index
from fcsolve.fc_cert import (
    Certified, FcCertificate, Falsified, NotFound, decide_fc, falsify_fc, find_certificate,
    verify_certificate,
)
from fcsolve.multipoly import GaussianRational, HomPolyMatrix, ONE

I = GaussianRational(0, 1)


def test_divergence_certificate_is_forced():
    d = 2
    cert = find_certificate(adjoint_symbol(builtin("divergence", d)))
    assert cert.N0 == 1
    for j in range(d):
        a = tuple(int(j == l) for l in range(d))
        assert cert.g[a].entries == {(0, j, (0,) * d): I}
    assert verify_certificate(cert, adjoint_symbol(builtin("divergence", d)))


def test_double_divergence_certificate():
    d = 3
    ps = adjoint_symbol(builtin("double_divergence", d))
    cert = find_certificate(ps)
    assert cert.N0 == 2
    for j in range(d):
        for k in range(j, d):
            a = tuple((l == j) + (l == k) for l in range(d))
            assert cert.g[a].entries == {(0, pair_index(d, j, k), (0,) * d): -ONE}


def test_conformal_killing_minimal_degree():
    ps = adjoint_symbol(builtin("tracefree_symmetric_divergence", 3))
    for N0 in (1, 2):
        with pytest.raises(NotFound):
            find_certificate(ps, N0_max=N0)
    assert find_certificate(ps, N0_max=3).N0 == 3


def test_perturbed_certificate_fails():
    ps = adjoint_symbol(builtin("divergence", 2))
    cert = find_certificate(ps)
    a = (1, 0)
    M = cert.g[a]
    bad = dict(M.entries)
    bad[(0, 0, (0, 0))] = bad[(0, 0, (0, 0))] + 1
    g = dict(cert.g)
    g[a] = HomPolyMatrix(M.rows, M.cols, M.d, M.row_deg, M.col_deg, bad)
    assert not verify_certificate(FcCertificate(cert.N0, cert.r0, cert.s0, cert.d, cert.m, g), ps)


def test_empty_certificate_vacuous():
    ps = HomPolyMatrix(2, 0, 2, (1, 1), (), {})
    assert verify_certificate(FcCertificate(1, 0, 2, 2, (1, 1), {}), ps)


def test_certificate_text_roundtrip():
    ps = adjoint_symbol(builtin("symmetric_divergence", 2))
    cert = find_certificate(ps)
    back = FcCertificate.loads(cert.dumps())
    assert back.dumps() == cert.dumps()
    assert verify_certificate(back, ps)


def test_first_derivative_is_falsified_exactly():
    P = DiffOperator(2, 1, 1, {((1, 0), 0, 0): 1})
    w, smin = falsify_fc(adjoint_symbol(P))
    assert w is not None and w.exact and smin == 0.0
    assert tuple(complex(x) for x in w.xi) == (0, 1)
    assert isinstance(decide_fc(adjoint_symbol(P), N0_max=4), Falsified)


def test_divergence_has_no_witness():
    w, smin = falsify_fc(adjoint_symbol(builtin("divergence", 3)), trials=500, rng=np.random.default_rng(0))
    assert w is None
    assert smin > 0.1


def test_elliptic_but_not_fc_is_not_certified():
    # the Cauchy-Riemann operator on C ~ R^2 is elliptic; its symbol vanishes at xi = (1, i)
    P = DiffOperator(2, 1, 2, {((1, 0), 0, 0): 1, ((0, 1), 0, 1): -1})
    Q = DiffOperator(2, 2, 2, {((1, 0), 0, 0): 1, ((0, 1), 0, 1): -1, ((0, 1), 1, 0): 1, ((1, 0), 1, 1): 1})
    v = decide_fc(adjoint_symbol(Q), N0_max=4)
    assert isinstance(v, Falsified) and v.exact
    assert isinstance(decide_fc(adjoint_symbol(P), N0_max=3), Certified)


@pytest.mark.parametrize("name", ["divergence", "double_divergence", "symmetric_divergence", "einstein_constraint"])
def test_verdicts_mutually_exclusive(name):
    ps = adjoint_symbol(builtin(name, 2))
    assert isinstance(decide_fc(ps), Certified)
    w, _ = falsify_fc(ps, trials=200)
    assert w is None
