"""Graded augmented systems: maximal (jet) systems from certificates, the flat
special systems, curvature, and flat cokernel bases.

A system consists of variables ``Phi_A`` with degrees ``d_A <= 0`` obeying

    d_i Phi_A = (B_i)_A^{A'} Phi_{A'} + (C_i)_A^{(gamma, K)} d^gamma (P* phi)_K .

Each ``Phi_A`` is a fixed linear combination of derivatives of ``phi``
(``jets[A]``), and ``observe[J]`` names the variable equal to ``phi_J``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .diffop import (
    DiffOperator, TestFunction, adjoint, adjoint_symbol, apply, builtin, canonical_name, pair_index,
)
from .fc_cert import FcCertificate, verify_certificate
from .multipoly import GaussianRational, MultiIndex, ZERO, ONE, i_power, madd, multi_indices_upto, unit

CKey = tuple[MultiIndex, int]  # (gamma, K)
Jet = dict  # (alpha, J) -> GaussianRational


class GradingViolation(ValueError):
    pass


@dataclass
class AugmentedSystem:
    d: int
    r0: int
    s0: int
    m: tuple[int, ...]
    names: list[str]
    degree: list[int]
    jets: list[Jet]
    observe: list[int]
    B: dict = field(default_factory=dict)  # (i, A, A') -> GaussianRational
    C: dict = field(default_factory=dict)  # (i, A, (gamma, K)) -> GaussianRational
    B_fn: Callable[[np.ndarray], np.ndarray] | None = None  # x -> (d, n, n)
    name: str = ""
    kind: str = "special"

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def N0(self) -> int:
        return max(-g for g in self.degree) + 1

    @property
    def constant(self) -> bool:
        return self.B_fn is None

    def index(self, name: str) -> int:
        return self.names.index(name)

    def c_keys(self) -> list[CKey]:
        """Column labels of ``C`` in a fixed order (by K, then |gamma|, then gamma)."""
        keys = {k for (_, _, k) in self.C}
        return sorted(keys, key=lambda gk: (gk[1], sum(gk[0]), tuple(-e for e in gk[0])))

    def m_prime(self) -> tuple[int, ...]:
        out = [0] * self.s0
        for (_, _, (g, K)) in self.C:
            out[K] = max(out[K], sum(g))
        return tuple(out)

    def B_numeric(self, x: np.ndarray | None = None) -> np.ndarray:
        if self.B_fn is not None:
            return np.asarray(self.B_fn(np.asarray(x, dtype=float)), dtype=float)
        out = np.zeros((self.d, self.n, self.n), dtype=complex)
        for (i, a, b), v in self.B.items():
            out[i, a, b] = complex(v)
        return out.real if not np.any(out.imag) else out

    def C_numeric(self) -> tuple[np.ndarray, list[CKey]]:
        keys = self.c_keys()
        col = {k: n for n, k in enumerate(keys)}
        out = np.zeros((self.d, self.n, len(keys)), dtype=complex)
        for (i, a, k), v in self.C.items():
            out[i, a, col[k]] = complex(v)
        return (out.real if not np.any(out.imag) else out), keys

    def check_grading(self) -> None:
        """Structural checks of the graded form; raises on violation."""
        for (i, a, b), v in self.B.items():
            if v and self.degree[a] > self.degree[b] + 1:
                raise GradingViolation(f"B_{i}[{self.names[a]}, {self.names[b]}] breaks the grading")
        for (i, a, (g, K)), v in self.C.items():
            if v and self.degree[a] > -self.m[K] - sum(g) + 1:
                raise GradingViolation(f"C_{i}[{self.names[a]}, {g}, {K}] breaks the grading")

    # -- text form ---------------------------------------------------------
    def dumps(self) -> str:
        out = [f"system {self.name or '-'} {self.kind} d={self.d} r0={self.r0} s0={self.s0}",
               "m " + " ".join(map(str, self.m))]
        for a, (nm, dg) in enumerate(zip(self.names, self.degree)):
            out.append(f"var {a} {nm} {dg}")
        out.append("observe " + " ".join(map(str, self.observe)))
        for a, jet in enumerate(self.jets):
            for (al, J), v in sorted(jet.items()):
                out.append(f"jet {a} {' '.join(map(str, al))} {J} {v.to_text()}")
        for (i, a, b), v in sorted(self.B.items()):
            out.append(f"B {i} {a} {b} {v.to_text()}")
        for (i, a, (g, K)), v in sorted(self.C.items()):
            out.append(f"C {i} {a} {' '.join(map(str, g))} {K} {v.to_text()}")
        return "\n".join(out) + "\n"

    @classmethod
    def loads(cls, text: str) -> "AugmentedSystem":
        lines = [ln.split() for ln in text.splitlines() if ln.strip()]
        head = lines[0]
        kv = dict(t.split("=") for t in head[3:])
        d, r0, s0 = int(kv["d"]), int(kv["r0"]), int(kv["s0"])
        sys = cls(d, r0, s0, tuple(map(int, lines[1][1:])), [], [], [], [],
                  name="" if head[1] == "-" else head[1], kind=head[2])
        for t in lines[2:]:
            if t[0] == "var":
                sys.names.append(t[2]); sys.degree.append(int(t[3])); sys.jets.append({})
            elif t[0] == "observe":
                sys.observe = list(map(int, t[1:]))
            elif t[0] == "jet":
                a = int(t[1]); al = tuple(map(int, t[2:2 + d]))
                sys.jets[a][(al, int(t[2 + d]))] = GaussianRational.from_text(t[3 + d], t[4 + d])
            elif t[0] == "B":
                sys.B[(int(t[1]), int(t[2]), int(t[3]))] = GaussianRational.from_text(t[4], t[5])
            elif t[0] == "C":
                g = tuple(map(int, t[3:3 + d]))
                sys.C[(int(t[1]), int(t[2]), (g, int(t[3 + d])))] = GaussianRational.from_text(t[4 + d], t[5 + d])
        return sys


# -- maximal systems ---------------------------------------------------------

def maximal_from_certificate(P: DiffOperator, cert: FcCertificate) -> AugmentedSystem:
    """Jet system ``Phi_(alpha, J) = d^alpha phi_J`` with ``|alpha| <= N0 - 1``.

    The certificate identity read as differential operators gives
    ``d^beta phi_J = sum_{K, gamma} i^{m_K} c[g_beta]_{J K}^gamma d^gamma (P*_prin phi)_K``
    and constant lower-order terms of ``P*`` are moved into ``B``.
    """
    pstar = adjoint_symbol(P)
    if (cert.r0, cert.s0, cert.d) != (P.r0, P.s0, P.d) or not verify_certificate(cert, pstar):
        raise ValueError("certificate does not match the operator")
    d, r0, N0 = P.d, P.r0, cert.N0
    m = P.m
    alphas = multi_indices_upto(d, N0 - 1)
    vars_ = [(a, J) for a in alphas for J in range(r0)]
    idx = {v: n for n, v in enumerate(vars_)}
    Pstar_low = {k: v for k, v in adjoint(P).coeff.items() if sum(k[0]) < m[k[1]]}
    B: dict = {}
    C: dict = {}
    for (a, J), A in idx.items():
        for i in range(d):
            b = madd(a, unit(d, i))
            if sum(a) < N0 - 1:
                B[(i, A, idx[(b, J)])] = ONE
                continue
            g = cert.g[b]
            for (JJ, K, gam), v in g.entries.items():
                if JJ != J:
                    continue
                c = v * i_power(m[K])
                C[(i, A, (gam, K))] = C.get((i, A, (gam, K)), ZERO) + c
                # d^gam (P*_prin phi)_K = d^gam (P* phi)_K - d^gam (P*_low phi)_K
                for (al, KK, Jp), w in Pstar_low.items():
                    if KK != K:
                        continue
                    tgt = madd(gam, al)
                    if sum(tgt) > N0 - 1:
                        raise AssertionError("lower-order re-expression leaves the jet space")
                    key = (i, A, idx[(tgt, Jp)])
                    B[key] = B.get(key, ZERO) - c * w
    B = {k: v for k, v in B.items() if v}
    C = {k: v for k, v in C.items() if v}
    names = [f"d{''.join(map(str, a))}phi{J + 1}" for (a, J) in vars_]
    jets = [{(a, J): ONE} for (a, J) in vars_]
    observe = [idx[((0,) * d, J)] for J in range(r0)]
    sys = AugmentedSystem(d, r0, P.s0, m, names, [-sum(a) for (a, _) in vars_], jets, observe, B, C,
                          name=P.name, kind="maximal")
    sys.check_grading()
    return sys


# -- special flat systems ----------------------------------------------------

class _Builder:
    def __init__(self, d: int, r0: int, s0: int, m: Sequence[int], name: str):
        self.d, self.r0, self.s0, self.m, self.name = d, r0, s0, tuple(m), name
        self.names: list[str] = []
        self.degree: list[int] = []
        self.jets: list[Jet] = []
        self.B: dict = {}
        self.C: dict = {}

    def var(self, name: str, deg: int, jet: Mapping) -> int:
        self.names.append(name)
        self.degree.append(deg)
        self.jets.append({k: GaussianRational.coerce(v) for k, v in jet.items() if v})
        return len(self.names) - 1

    def b(self, i, A, A2, v):
        key = (i, A, A2)
        self.B[key] = self.B.get(key, ZERO) + GaussianRational.coerce(v)

    def c(self, i, A, gamma, K, v):
        key = (i, A, (tuple(gamma), K))
        self.C[key] = self.C.get(key, ZERO) + GaussianRational.coerce(v)

    def build(self, observe) -> AugmentedSystem:
        B = {k: v for k, v in self.B.items() if v}
        C = {k: v for k, v in self.C.items() if v}
        s = AugmentedSystem(self.d, self.r0, self.s0, self.m, self.names, self.degree, self.jets,
                            list(observe), B, C, name=self.name, kind="special")
        s.check_grading()
        return s


def _hessian_block(bd: _Builder, J: int, K0: int, tracefree: bool) -> list[int]:
    """phi, omega_j = d_j phi (and w = Delta phi / d when trace-free)."""
    d = bd.d
    z = (0,) * d
    phi = bd.var("phi" if J == 0 else f"phi{J}", 0, {(z, J): 1})
    om = [bd.var(f"alpha{j + 1}", -1, {(unit(d, j), J): 1}) for j in range(d)]
    for i in range(d):
        bd.b(i, phi, om[i], 1)
        for j in range(d):
            bd.c(i, om[j], z, K0 + pair_index(d, i, j), 1)
    if tracefree:
        w = bd.var("w", -2, {(madd(unit(d, l), unit(d, l)), J): Fraction(1, d) for l in range(d)})
        for i in range(d):
            bd.b(i, om[i], w, 1)
            for l in range(d):
                bd.c(i, w, unit(d, l), K0 + pair_index(d, i, l), Fraction(1, d - 1))
    return [phi]


def _killing_block(bd: _Builder, J0: int, K0: int, tracefree: bool) -> list[int]:
    """omega, eta_jk = (d_j omega_k - d_k omega_j) / 2, and w, zeta for the conformal case."""
    d = bd.d
    z = (0,) * d
    h = Fraction(1, 2)
    om = [bd.var(f"omega{j + 1}", 0, {(z, J0 + j): 1}) for j in range(d)]
    eta = {}
    for j in range(d):
        for k in range(j + 1, d):
            eta[(j, k)] = bd.var(f"eta{j + 1}{k + 1}", -1,
                                 {(unit(d, j), J0 + k): h, (unit(d, k), J0 + j): -h})

    def eta_of(j, k):
        if j == k:
            return None, 0
        return (eta[(j, k)], 1) if j < k else (eta[(k, j)], -1)

    K = lambda a, b: K0 + pair_index(d, a, b)
    if tracefree:
        w = bd.var("w", -1, {(unit(d, l), J0 + l): Fraction(1, d) for l in range(d)})
        zeta = [bd.var(f"zeta{j + 1}", -2,
                       {(madd(unit(d, j), unit(d, l)), J0 + l): Fraction(1, d) for l in range(d)})
                for j in range(d)]
    for i in range(d):
        for j in range(d):
            # d_i omega_j = eta_ij (+ w delta_ij) - (P* omega)_ij
            e, s = eta_of(i, j)
            if e is not None:
                bd.b(i, om[j], e, s)
            if tracefree and i == j:
                bd.b(i, om[j], w, 1)
            bd.c(i, om[j], z, K(i, j), -1)
        for (j, k), e in eta.items():
            # d_i eta_jk = (zeta_j delta_ik - zeta_k delta_ij) + d_k (P*)_ij - d_j (P*)_ki
            bd.c(i, e, unit(d, k), K(i, j), 1)
            bd.c(i, e, unit(d, j), K(k, i), -1)
            if tracefree:
                if i == k:
                    bd.b(i, e, zeta[j], 1)
                if i == j:
                    bd.b(i, e, zeta[k], -1)
    if tracefree:
        a = Fraction(1, d - 2)
        for i in range(d):
            bd.b(i, w, zeta[i], 1)
            for j in range(d):
                # d_i zeta_j = C(P* omega)_ij / (d - 2)
                for l in range(d):
                    bd.c(i, zeta[j], madd(unit(d, l), unit(d, i)), K(l, j), -a)
                    bd.c(i, zeta[j], madd(unit(d, l), unit(d, j)), K(l, i), -a)
                    bd.c(i, zeta[j], madd(unit(d, l), unit(d, l)), K(i, j), a)
                    if i == j:
                        for mm in range(d):
                            bd.c(i, zeta[j], madd(unit(d, l), unit(d, mm)), K(l, mm), a / (d - 1))
    return om


SPECIAL_NAMES = ("divergence", "double_divergence", "tracefree_double_divergence", "symmetric_divergence",
                 "tracefree_symmetric_divergence", "einstein_constraint", "einstein_constraint_cmc")


def special_system(name: str, d: int) -> AugmentedSystem:
    """Hand-built flat augmented system for a zoo operator."""
    name = canonical_name(name)
    P = builtin(name, d)
    bd = _Builder(d, P.r0, P.s0, P.m, name)
    z = (0,) * d
    n = d * (d + 1) // 2
    if name == "divergence":
        phi = bd.var("phi", 0, {(z, 0): 1})
        for i in range(d):
            bd.c(i, phi, z, i, -1)
        return bd.build([phi])
    if name in ("double_divergence", "tracefree_double_divergence"):
        obs = _hessian_block(bd, 0, 0, name.startswith("tracefree"))
        return bd.build(obs)
    if name in ("symmetric_divergence", "tracefree_symmetric_divergence"):
        obs = _killing_block(bd, 0, 0, name.startswith("tracefree"))
        return bd.build(obs)
    obs = _hessian_block(bd, 0, 0, False)
    obs += _killing_block(bd, 1, n, name == "einstein_constraint_cmc")
    return bd.build(obs)


def with_callable_B(sys: AugmentedSystem, B_fn: Callable[[np.ndarray], np.ndarray]) -> AugmentedSystem:
    """Copy of ``sys`` whose connection ``B_i(x)`` is a user callable (must be pure)."""
    return AugmentedSystem(sys.d, sys.r0, sys.s0, sys.m, list(sys.names), list(sys.degree),
                           [dict(j) for j in sys.jets], list(sys.observe), {}, dict(sys.C), B_fn,
                           sys.name, sys.kind)


# -- curvature ---------------------------------------------------------------

def _richardson_grad(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, i: int, h: float) -> np.ndarray:
    e = np.zeros_like(x)
    e[i] = 1.0

    def D(hh):
        return (f(x + hh * e) - f(x - hh * e)) / (2 * hh)

    d1, d2, d3 = D(h), D(h / 2), D(h / 4)
    r1, r2 = (4 * d2 - d1) / 3, (4 * d3 - d2) / 3
    return (16 * r2 - r1) / 15


def curvature(sys: AugmentedSystem, x: Sequence[float] | None = None) -> np.ndarray:
    """``F_ij = d_i B_j - d_j B_i + B_i B_j - B_j B_i`` at ``x``, shape (d, d, n, n)."""
    d = sys.d
    x = np.zeros(d) if x is None else np.asarray(x, dtype=float)
    Bx = sys.B_numeric(x)
    F = np.einsum("iab,jbc->ijac", Bx, Bx) - np.einsum("jab,ibc->ijac", Bx, Bx)
    if sys.B_fn is not None:
        h = 1e-5 * (1 + float(np.linalg.norm(x)))
        dB = np.stack([_richardson_grad(sys.B_numeric, x, i, h) for i in range(d)])  # dB[i] = d_i B
        F = F + np.einsum("ijab->ijab", dB) - np.einsum("jiab->ijab", dB)
    return F


def curvature_exact_zero(sys: AugmentedSystem) -> bool:
    """Exact commutator test for constant systems."""
    for i in range(sys.d):
        for j in range(i + 1, sys.d):
            prod: dict = {}
            for (ii, a, b), v in sys.B.items():
                for (jj, b2, c), w in sys.B.items():
                    if b2 != b:
                        continue
                    if ii == i and jj == j:
                        prod[(a, c)] = prod.get((a, c), ZERO) + v * w
                    elif ii == j and jj == i:
                        prod[(a, c)] = prod.get((a, c), ZERO) - v * w
            if any(prod.values()):
                return False
    return True


def is_completely_integrable(sys: AugmentedSystem, sample_points: Sequence[Sequence[float]] | None = None,
                             tol: float = 1e-10) -> tuple[bool, float]:
    if sys.constant:
        ok = curvature_exact_zero(sys)
        return ok, 0.0 if ok else float(np.max(np.abs(curvature(sys))))
    pts = sample_points if sample_points is not None else [np.zeros(sys.d)]
    worst = max(float(np.max(np.abs(curvature(sys, p)))) for p in pts)
    return worst <= tol, worst


# -- evaluation helpers ------------------------------------------------------

def eval_variables(sys: AugmentedSystem, phi: TestFunction, x: np.ndarray) -> np.ndarray:
    """``Phi_A`` at points ``x`` (N, d) for a test field ``phi``; returns (n, N)."""
    x = np.atleast_2d(x)
    out = np.zeros((sys.n, x.shape[0]), dtype=complex)
    for A, jet in enumerate(sys.jets):
        for (al, J), v in jet.items():
            out[A] += complex(v) * phi.derivative(al)(x)[J]
    return out


def eval_sources(sys: AugmentedSystem, psi: TestFunction, x: np.ndarray, keys: Sequence[CKey]) -> np.ndarray:
    """``d^gamma psi_K`` at ``x`` for each key; returns (len(keys), N)."""
    x = np.atleast_2d(x)
    return np.array([psi.derivative(g)(x)[K] for (g, K) in keys]).reshape(len(keys), x.shape[0])


def aug_residual(sys: AugmentedSystem, P: DiffOperator, phi: TestFunction, x: np.ndarray) -> float:
    """Max over points of ``|d_i Phi - B_i Phi - C_i d^gamma P* phi|``."""
    x = np.atleast_2d(x)
    psi = apply(adjoint(P), phi)
    Phi = eval_variables(sys, phi, x)
    Cn, keys = sys.C_numeric()
    src = eval_sources(sys, psi, x, keys)
    worst = 0.0
    for i in range(sys.d):
        dPhi = np.zeros_like(Phi)
        for A, jet in enumerate(sys.jets):
            for (al, J), v in jet.items():
                dPhi[A] += complex(v) * phi.derivative(madd(al, unit(sys.d, i)))(x)[J]
        if sys.constant:
            rhs = sys.B_numeric()[i] @ Phi
        else:
            rhs = np.stack([sys.B_numeric(p)[i] @ Phi[:, k] for k, p in enumerate(x)], axis=1)
        if keys:
            rhs = rhs + Cn[i] @ src
        worst = max(worst, float(np.max(np.abs(dPhi - rhs))))
    return worst


# -- flat cokernel bases -----------------------------------------------------

@dataclass
class CokernelBasis:
    name: str
    d: int
    labels: list[str]
    elements: list[TestFunction]

    @property
    def dim(self) -> int:
        return len(self.elements)

    def gram(self, radius: float = 1.0, n: int = 12) -> np.ndarray:
        """Gram matrix on the ball of given radius (tensor Gauss-Legendre on the box, masked)."""
        from .quadrature import ball_rule
        pts, w = ball_rule(self.d, radius, n)
        vals = np.array([np.asarray(Z(pts)).reshape(Z.ncomp, -1) for Z in self.elements])
        return np.einsum("acn,bcn,n->ab", vals, vals.conj(), w).real


def _poly(d: int, terms: Mapping[MultiIndex, object]) -> dict:
    return {tuple(a): Fraction(v) for a, v in terms.items() if v}


def _x(d, j):
    return unit(d, j)


def _hessian_basis(d: int) -> tuple[list[str], list[list[dict]]]:
    z = (0,) * d
    labels = ["1"] + [f"x{j + 1}" for j in range(d)]
    polys = [[{z: Fraction(1)}]] + [[{_x(d, j): Fraction(1)}] for j in range(d)]
    return labels, polys


def _killing_basis(d: int, conformal: bool) -> tuple[list[str], list[list[dict]]]:
    z = (0,) * d
    labels, polys = [], []
    for J in range(d):
        v = [{} for _ in range(d)]
        v[J] = {z: Fraction(1)}
        labels.append(f"e{J + 1}")
        polys.append(v)
    for J in range(d):
        for K in range(J + 1, d):
            v = [{} for _ in range(d)]
            v[J] = {_x(d, K): Fraction(1)}
            v[K] = {_x(d, J): Fraction(-1)}
            labels.append(f"x{K + 1}e{J + 1}-x{J + 1}e{K + 1}")
            polys.append(v)
    if conformal:
        labels.append("x.e")
        polys.append([{_x(d, j): Fraction(1)} for j in range(d)])
        for J in range(d):
            # 2 x_J x - |x|^2 e_J
            v = []
            for j in range(d):
                p = {madd(_x(d, J), _x(d, j)): Fraction(2)}
                if j == J:
                    p = {madd(_x(d, l), _x(d, l)): Fraction(-1) for l in range(d) if l != J}
                    p[madd(_x(d, J), _x(d, J))] = Fraction(1)
                v.append(p)
            labels.append(f"2x{J + 1}x-|x|^2e{J + 1}")
            polys.append(v)
    return labels, polys


def special_conformal_as_printed(d: int, J: int) -> TestFunction:
    """The field ``x_J x - |x|^2 e_J`` (without the factor 2), kept for comparison."""
    v = []
    for j in range(d):
        p = {madd(_x(d, J), _x(d, j)): Fraction(1)}
        if j == J:
            p = {madd(_x(d, l), _x(d, l)): Fraction(-1) for l in range(d) if l != J}
            p[madd(_x(d, J), _x(d, J))] = Fraction(0)
        v.append({a: c for a, c in p.items() if c})
    return TestFunction.polynomial(d, v)


def cokernel_basis(name: str, d: int) -> CokernelBasis:
    """Exact polynomial basis of ``ker P*`` on flat space."""
    name = canonical_name(name)
    builtin(name, d)  # threshold check
    z = (0,) * d
    if name == "divergence":
        labels, polys = ["1"], [[{z: Fraction(1)}]]
    elif name == "double_divergence":
        labels, polys = _hessian_basis(d)
    elif name == "tracefree_double_divergence":
        labels, polys = _hessian_basis(d)
        labels.append("|x|^2")
        polys.append([{madd(_x(d, l), _x(d, l)): Fraction(1) for l in range(d)}])
    elif name in ("symmetric_divergence", "tracefree_symmetric_divergence"):
        labels, polys = _killing_basis(d, name.startswith("tracefree"))
    else:
        hl, hp = _hessian_basis(d)
        kl, kp = _killing_basis(d, name == "einstein_constraint_cmc")
        labels = [f"({l}, 0)" for l in hl] + [f"(0, {l})" for l in kl]
        polys = [p + [{} for _ in range(d)] for p in hp] + [[{}] + p for p in kp]
    return CokernelBasis(name, d, labels, [TestFunction.polynomial(d, p) for p in polys])


def annihilates(P: DiffOperator, Z: TestFunction) -> bool:
    """Exact check ``P* Z = 0`` for a polynomial field."""
    return apply(adjoint(P), Z).is_zero()
