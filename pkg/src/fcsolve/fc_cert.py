"""Decide condition (FC) by an exact Nullstellensatz certificate search.

A certificate of degree ``N0`` is a family of polynomial matrices ``g_alpha``
(one per ``|alpha| = N0``) with ``xi^alpha I = g_alpha(xi) p*(xi)``.  Column
``K`` of ``g_alpha`` is homogeneous of degree ``N0 - m_K``.  For fixed
``N0`` the unknown coefficients enter linearly and the coefficient matrix is
the same for every ``alpha`` and output row, so one exact elimination serves
all right-hand sides.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import exact_linalg
from .multipoly import (
    GaussianRational, HomPolyMatrix, MultiIndex, ONE, ZERO, eval_exact, eval_matrix, mat_mul,
    monomial_basis, _parse_lines, dumps,
)


@dataclass(frozen=True)
class FcCertificate:
    N0: int
    r0: int
    s0: int
    d: int
    m: tuple[int, ...]
    g: dict = field(default_factory=dict)  # alpha -> HomPolyMatrix (r0 x s0)

    def dumps(self) -> str:
        out = [f"{self.N0} {self.r0} {self.s0} {self.d}", "m " + " ".join(map(str, self.m))]
        for a in monomial_basis(self.d, self.N0):
            out.append("alpha " + " ".join(map(str, a)))
            out.append(dumps(self.g[a]).rstrip("\n"))
        return "\n".join(out) + "\n"

    @classmethod
    def loads(cls, text: str) -> "FcCertificate":
        lines = [ln.split() for ln in text.splitlines() if ln.strip()]
        N0, r0, s0, d = map(int, lines[0])
        m = tuple(map(int, lines[1][1:]))
        g = {}
        n = 2
        while n < len(lines):
            a = tuple(map(int, lines[n][1:]))
            M, used = _parse_lines(lines[n + 1:])
            g[a] = M
            n += 1 + used
        return cls(N0, r0, s0, d, m, g)


@dataclass(frozen=True)
class Certified:
    certificate: FcCertificate
    label = "Certified"


@dataclass(frozen=True)
class Falsified:
    xi: tuple
    phi: tuple
    residual: float
    exact: bool
    label = "Falsified"


@dataclass(frozen=True)
class Inconclusive:
    N0_max: int
    min_singular: float
    label = "Inconclusive"


FcVerdict = Union[Certified, Falsified, Inconclusive]


class NotFound(Exception):
    def __init__(self, N0_max: int):
        super().__init__(f"no certificate with N0 <= {N0_max}")
        self.N0_max = N0_max


def default_cap(pstar: HomPolyMatrix) -> int:
    return max(pstar.row_deg, default=0) + 4


def find_certificate(pstar: HomPolyMatrix, N0_max: int | None = None, start: int | None = None) -> FcCertificate:
    """Minimal-degree certificate for ``p*`` (s0 x r0, row ``K`` of degree ``m_K``)."""
    s0, r0, d = pstar.rows, pstar.cols, pstar.d
    m = pstar.row_deg
    lo = max(m, default=0)
    if N0_max is None:
        N0_max = lo + 4
    if N0_max < lo:
        raise ValueError(f"N0_max must be at least max m_K = {lo}")
    # p*_{K, J'} as monomial dictionaries
    ent: dict[tuple[int, int], dict[MultiIndex, GaussianRational]] = {}
    for (K, J, a), v in pstar.entries.items():
        ent.setdefault((K, J), {})[a] = v
    for N0 in range(lo if start is None else max(lo, start), N0_max + 1):
        unknowns = [(K, b) for K in range(s0) for b in monomial_basis(d, N0 - m[K])]
        eqs = [(J, mu) for J in range(r0) for mu in monomial_basis(d, N0)]
        row_of = {e: n for n, e in enumerate(eqs)}
        A = [[ZERO] * len(unknowns) for _ in eqs]
        for u, (K, b) in enumerate(unknowns):
            for J in range(r0):
                for a, v in ent.get((K, J), {}).items():
                    mu = tuple(x + y for x, y in zip(a, b))
                    A[row_of[(J, mu)]][u] = A[row_of[(J, mu)]][u] + v
        alphas = monomial_basis(d, N0)
        rhs_cols = [(a, J) for a in alphas for J in range(r0)]
        rhs = [[ONE if (J == Jc and mu == a) else ZERO for (a, Jc) in rhs_cols] for (J, mu) in eqs]
        if not eqs:
            return FcCertificate(N0, r0, s0, d, m, {a: _zero_g(r0, s0, d, N0, m) for a in alphas})
        sols, _ = exact_linalg.solve(A, rhs)
        if any(s is None for s in sols):
            continue
        g: dict[MultiIndex, dict] = {a: {} for a in alphas}
        for (a, J), x in zip(rhs_cols, sols):
            for (K, b), v in zip(unknowns, x):
                if v:
                    g[a][(J, K, b)] = v
        cert = FcCertificate(N0, r0, s0, d, m, {
            a: HomPolyMatrix(r0, s0, d, (N0,) * r0, tuple(-mk for mk in m), g[a]) for a in alphas})
        assert verify_certificate(cert, pstar)
        return cert
    raise NotFound(N0_max)


def _zero_g(r0, s0, d, N0, m):
    return HomPolyMatrix(r0, s0, d, (N0,) * r0, tuple(-mk for mk in m), {})


def verify_certificate(cert: FcCertificate, pstar: HomPolyMatrix) -> bool:
    """Exact check of ``xi^alpha I = g_alpha p*`` for every ``|alpha| = N0``."""
    r0 = pstar.cols
    if r0 == 0:
        return True
    if cert.r0 != r0 or cert.s0 != pstar.rows:
        return False
    for a in monomial_basis(pstar.d, cert.N0):
        if a not in cert.g:
            return False
        try:
            prod = mat_mul(cert.g[a], pstar)
        except ValueError:
            return False
        target = {(J, J, a): ONE for J in range(r0)}
        if dict(prod.entries) != target:
            return False
    return True


# -- falsifier ---------------------------------------------------------------

_SMALL = [GaussianRational(1), GaussianRational(-1), GaussianRational(0, 1), GaussianRational(0, -1),
          GaussianRational(2), GaussianRational(1, 1), GaussianRational(1, -1)]


def _coordinate_candidates(d: int):
    for j in range(d):
        yield tuple(GaussianRational(1) if k == j else ZERO for k in range(d))
    for j, k in itertools.combinations(range(d), 2):
        for a in (GaussianRational(1),):
            for b in _SMALL:
                xi = [ZERO] * d
                xi[j], xi[k] = a, b
                yield tuple(xi)


def _sigma_min(M: np.ndarray) -> tuple[float, np.ndarray]:
    if M.shape[1] == 0:
        return np.inf, np.zeros(0)
    _, s, vh = np.linalg.svd(M)
    smin = s[-1] if len(s) >= M.shape[1] else 0.0
    return float(smin), vh[-1].conj()


def falsify_fc(pstar: HomPolyMatrix, trials: int = 500, rng: np.random.Generator | None = None):
    """Search for ``xi != 0`` with a nontrivial kernel of ``p*(xi)``.

    Returns ``(witness or None, observed minimum singular value)``.  The
    witness is a ``Falsified`` record; ``exact`` is set only when the kernel
    vector was confirmed symbolically at a Gaussian-rational point.
    """
    rng = rng or np.random.default_rng(0)
    d = pstar.d
    best = np.inf
    for xi in _coordinate_candidates(d):
        M = eval_matrix(pstar, [complex(x) for x in xi])
        smin, _ = _sigma_min(M / np.linalg.norm([complex(x) for x in xi]) ** max(max(pstar.row_deg, default=0), 0))
        best = min(best, smin)
        if smin < 1e-10:
            v = exact_linalg.nullspace_vector(eval_exact(pstar, xi))
            if v is not None:
                return Falsified(tuple(complex(x) for x in xi), tuple(complex(c) for c in v), 0.0, True), 0.0
    for _ in range(trials):
        z = rng.normal(size=d) + 1j * rng.normal(size=d)
        z /= np.linalg.norm(z)
        smin, vec = _sigma_min(eval_matrix(pstar, z))
        best = min(best, smin)
        if smin < 1e-10:
            res = float(np.linalg.norm(eval_matrix(pstar, z) @ vec))
            return Falsified(tuple(z), tuple(vec), res, False), smin
    return None, float(best)


def decide_fc(pstar: HomPolyMatrix, N0_max: int | None = None, trials: int = 500,
              rng: np.random.Generator | None = None) -> FcVerdict:
    """Three-valued verdict: certificate, exact witness, or neither."""
    N0_max = default_cap(pstar) if N0_max is None else N0_max
    try:
        return Certified(find_certificate(pstar, N0_max))
    except NotFound:
        pass
    w, smin = falsify_fc(pstar, trials, rng)
    if w is not None and w.exact:
        return w
    return Inconclusive(N0_max, smin)
