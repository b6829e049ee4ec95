"""Transport along curves: fundamental matrices, rough kernels and recovery.

Along a segment ``x(s) = y + s (y1 - y)`` the augmented variables obey
``d/ds Phi = xdot^i (B_i Phi + C_i d^gamma P*phi)``.  With ``Pi(s, t)`` the
fundamental matrix (``d_s Pi(s, t) = xdot^i B_i Pi(s, t)``, ``Pi(t, t) = I``)
variation of constants gives

    Phi(y) = Pi(0, 1) Phi(y1) - int_0^1 Pi(0, t) xdot^i C_i d^gamma P*phi(x(t)) dt ,

whose observed rows are the curve-supported Green's identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad_vec, solve_ivp
from scipy.linalg import expm

from .augmented import AugmentedSystem, CKey, eval_sources, eval_variables
from .diffop import TestFunction
from .multipoly import GaussianRational, ONE, ZERO


class StepControlError(RuntimeError):
    pass


# -- curves ------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    """Straight segment from ``y`` (s = 0) to ``y1`` (s = 1)."""

    y: np.ndarray
    y1: np.ndarray

    @property
    def velocity(self) -> np.ndarray:
        return np.asarray(self.y1, dtype=float) - np.asarray(self.y, dtype=float)

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.asarray(self.y, float) + s[..., None] * self.velocity


def ray(y, omega, length: float) -> Segment:
    """A ray from ``y`` in direction ``omega``, truncated where it leaves the working region."""
    omega = np.asarray(omega, dtype=float)
    omega = omega / np.linalg.norm(omega)
    return Segment(np.asarray(y, float), np.asarray(y, float) + length * omega)


# -- fundamental matrices ----------------------------------------------------

def generator(sys: AugmentedSystem, v: np.ndarray, x: np.ndarray | None = None) -> np.ndarray:
    """``M = v^i B_i`` (constant systems, or callable ones evaluated at ``x``)."""
    return np.tensordot(np.asarray(v, dtype=float), sys.B_numeric(x), axes=(0, 0))


def _nilpotent_exp(M: np.ndarray) -> np.ndarray | None:
    """``exp(M)`` as a terminating series, or None if ``M`` is not nilpotent."""
    n = M.shape[-1]
    out = np.eye(n, dtype=M.dtype) + M
    term = M
    for k in range(2, n + 2):
        if not np.any(term):
            return out
        term = term @ M / k
        out = out + term
    return out if not np.any(term) else None


def exp_minus(M: np.ndarray) -> np.ndarray:
    E = _nilpotent_exp(-M)
    return E if E is not None else expm(-M)


def exp_minus_batch(sys: AugmentedSystem, V: np.ndarray) -> np.ndarray:
    """``exp(-V^i B_i)`` for a batch of vectors ``V`` (N, d); constant systems only."""
    B = sys.B_numeric()
    Ms = -np.einsum("ni,iab->nab", V, B)
    n = sys.n
    out = np.broadcast_to(np.eye(n), Ms.shape).astype(Ms.dtype).copy()
    term = out.copy()
    for k in range(1, n + 1):
        term = term @ Ms / k
        if not np.any(term):
            return out
        out += term
    # not nilpotent: fall back to dense exponentials
    return np.stack([expm(m) for m in Ms])


def _ode_matrix(sys: AugmentedSystem, seg: Segment, s: float, t: float, rtol: float) -> np.ndarray:
    n, v = sys.n, seg.velocity

    def rhs(sig, p):
        return (generator(sys, v, seg(sig)) @ p.reshape(n, n)).ravel()

    if s == t:
        return np.eye(n)
    sol = solve_ivp(rhs, (t, s), np.eye(n).ravel(), method="DOP853", rtol=rtol, atol=rtol * 1e-2)
    if not sol.success:
        raise StepControlError(f"integration failed: {sol.message}")
    return sol.y[:, -1].reshape(n, n)


def fundamental_matrix(sys: AugmentedSystem, y, y1, s: float = 0.0, t: float = 1.0,
                       rtol: float = 1e-12) -> np.ndarray:
    """``Pi(s, t)`` along the segment from ``y`` to ``y1``.

    Constant systems use ``exp(-(t - s) (y1 - y)^i B_i)`` (terminating when
    nilpotent); callable systems are integrated with an adaptive 8th-order
    Runge-Kutta method.
    """
    if not 0.0 <= s <= t <= 1.0:
        raise ValueError("need 0 <= s <= t <= 1")
    seg = Segment(np.asarray(y, float), np.asarray(y1, float))
    if sys.constant:
        return exp_minus((t - s) * generator(sys, seg.velocity))
    return _ode_matrix(sys, seg, s, t, rtol)


def fundamental_matrix_exact(sys: AugmentedSystem, y: Sequence, y1: Sequence) -> list[list[GaussianRational]]:
    """Exact ``Pi(0, 1)`` for a constant nilpotent system and rational endpoints."""
    if not sys.constant:
        raise ValueError("exact transport needs constant coefficients")
    n = sys.n
    v = [GaussianRational.coerce(Fraction(b) - Fraction(a)) for a, b in zip(y, y1)]
    M = [[ZERO] * n for _ in range(n)]
    for (i, a, b), c in sys.B.items():
        M[a][b] = M[a][b] - v[i] * c  # -v^i B_i
    out = [[ONE if a == b else ZERO for b in range(n)] for a in range(n)]
    term = [row[:] for row in out]
    for k in range(1, n + 1):
        term = [[sum((term[a][c] * M[c][b] for c in range(n) if term[a][c] and M[c][b]), ZERO) / k
                 for b in range(n)] for a in range(n)]
        if not any(any(r) for r in term):
            return out
        out = [[out[a][b] + term[a][b] for b in range(n)] for a in range(n)]
    raise ValueError("connection is not nilpotent; no exact polynomial transport")


class _Transport:
    """``Q(t) = Pi(0, t)`` on [0, 1] for one segment."""

    def __init__(self, sys: AugmentedSystem, seg: Segment, rtol: float = 1e-12):
        self.sys, self.seg = sys, seg
        if sys.constant:
            self.M = generator(sys, seg.velocity)
            self._sol = None
        else:
            n, v = sys.n, seg.velocity

            def rhs(t, q):
                return -(q.reshape(n, n) @ generator(sys, v, seg(t))).ravel()

            sol = solve_ivp(rhs, (0.0, 1.0), np.eye(n).ravel(), method="DOP853", rtol=rtol,
                            atol=rtol * 1e-2, dense_output=True)
            if not sol.success:
                raise StepControlError(f"integration failed: {sol.message}")
            self._sol = sol

    def __call__(self, t: float) -> np.ndarray:
        if self._sol is None:
            return exp_minus(t * self.M)
        return self._sol.sol(t).reshape(self.sys.n, self.sys.n)

    def batch(self, ts: np.ndarray) -> np.ndarray:
        n = self.sys.n
        if self._sol is None:
            return exp_minus_batch(self.sys, ts[:, None] * self.seg.velocity[None, :])
        return self._sol.sol(ts).T.reshape(len(ts), n, n)


def gauss_legendre_adaptive(fn: Callable[[np.ndarray], np.ndarray], a: float, b: float, tol: float = 1e-10,
                            n0: int = 16, max_level: int = 6) -> tuple[np.ndarray, float]:
    """Integrate a vectorized ``fn(t) -> (T, ...)`` by doubling the Gauss-Legendre order.

    Returns the value and the last difference between successive orders.
    """
    prev = None
    n = n0
    for _ in range(max_level):
        x, w = np.polynomial.legendre.leggauss(n)
        t = a + (b - a) * (x + 1) / 2
        val = np.tensordot(w * (b - a) / 2, fn(t), axes=(0, 0))
        if prev is not None:
            err = float(np.max(np.abs(val - prev)))
            if err <= tol * max(1.0, float(np.max(np.abs(val)))):
                return val, err
        prev, n = val, 2 * n
    raise StepControlError(f"Gauss-Legendre did not converge (last difference {err:.2e})")


# -- rough kernel ------------------------------------------------------------

@dataclass
class RoughKernel:
    """Curve-supported Green's kernel data for one pair ``(y, y1)``."""

    sys: AugmentedSystem
    seg: Segment
    keys: list[CKey]
    _transport: _Transport
    _vC: np.ndarray  # xdot^i C_i, shape (n, ncols)
    Z: np.ndarray  # Pi(0, 1) observed rows, shape (r0, n)

    def S(self, t) -> np.ndarray:
        """``S_J^{(gamma, K)}(t) = -Pi_J^A(0, t) xdot^i (C_i)_A^{(gamma, K)}``.

        Shape (r0, ncols) for scalar ``t``, (T, r0, ncols) for an array.
        """
        t = np.asarray(t, dtype=float)
        Q = self._transport.batch(np.atleast_1d(t))[:, self.sys.observe]
        out = -(Q @ self._vC)
        return out[0] if t.ndim == 0 else out

    def pair_K(self, source: Callable[[np.ndarray], np.ndarray], tol: float = 1e-10) -> np.ndarray:
        """``<K_{y1}, psi>`` given ``source(t) = d^gamma psi_K(x(t))``, shape (T, ncols) in ``keys`` order."""
        if not self.keys:
            return np.zeros(self.sys.r0)
        val, _ = gauss_legendre_adaptive(lambda t: np.einsum("tjc,tc->tj", self.S(t), source(t)), 0.0, 1.0, tol)
        return val

    def pair_b(self, Phi_y1: np.ndarray) -> np.ndarray:
        """``<b_{y1}, phi> = Pi_J^A(0, 1) Phi_A(y1)``."""
        return self.Z @ Phi_y1

    def pair_K_test(self, psi: TestFunction, tol: float = 1e-10) -> np.ndarray:
        return self.pair_K(lambda t: eval_sources(self.sys, psi, self.seg(t), self.keys).T, tol)

    def pair_b_test(self, phi: TestFunction) -> np.ndarray:
        return self.pair_b(eval_variables(self.sys, phi, np.asarray(self.seg.y1, float)[None, :])[:, 0])


def rough_kernel(sys: AugmentedSystem, y, y1, rtol: float = 1e-12) -> RoughKernel:
    seg = Segment(np.asarray(y, float), np.asarray(y1, float))
    Cn, keys = sys.C_numeric()
    vC = np.tensordot(seg.velocity, Cn, axes=(0, 0)) if keys else np.zeros((sys.n, 0))
    tr = _Transport(sys, seg, rtol)
    Z = tr(1.0)[sys.observe]
    return RoughKernel(sys, seg, keys, tr, vC, Z)


def recover(sys: AugmentedSystem, y, y1, source: Callable[[float], np.ndarray], Phi_y1: np.ndarray,
            tol: float = 1e-10) -> np.ndarray:
    """``phi(y)`` from ``P*phi`` along the segment and the variables ``Phi`` at ``y1``."""
    rk = rough_kernel(sys, y, y1)
    return rk.pair_K(source, tol) + rk.pair_b(Phi_y1)


def recover_test(sys: AugmentedSystem, psi: TestFunction, phi: TestFunction, y, y1, tol: float = 1e-10) -> np.ndarray:
    """``<K_{y1}, psi> + <b_{y1}, phi>`` for test fields (``psi = P*phi`` for the identity)."""
    rk = rough_kernel(sys, y, y1)
    return rk.pair_K_test(psi, tol) + rk.pair_b_test(phi)


def pair_b_exact(sys: AugmentedSystem, Z: TestFunction, y: Sequence, y1: Sequence) -> list:
    """Exact ``<b_{y1}(., y), Z>`` for a polynomial field and rational points."""
    Pi = fundamental_matrix_exact(sys, y, y1)
    y1f = [Fraction(v) for v in y1]
    Phi = []
    for jet in sys.jets:
        acc = ZERO
        for (al, J), c in jet.items():
            acc = acc + c * GaussianRational.coerce(Z.derivative(al).eval_exact(y1f)[J])
        Phi.append(acc)
    return [sum((Pi[a][A] * Phi[A] for A in range(sys.n)), ZERO) for a in sys.observe]


# -- constant curvature radial oracle ----------------------------------------

@dataclass(frozen=True)
class GenTrig:
    """Generalized sine and cosine: ``s'' = -kappa s``, ``s(0) = 0``, ``s'(0) = 1``, ``c = s'``."""

    kappa: float

    def s(self, t):
        t = np.asarray(t, dtype=float)
        k = self.kappa
        if k > 0:
            return np.sin(np.sqrt(k) * t) / np.sqrt(k)
        if k < 0:
            return np.sinh(np.sqrt(-k) * t) / np.sqrt(-k)
        return t

    def c(self, t):
        t = np.asarray(t, dtype=float)
        k = self.kappa
        if k > 0:
            return np.cos(np.sqrt(k) * t)
        if k < 0:
            return np.cosh(np.sqrt(-k) * t)
        return np.ones_like(t)


@dataclass(frozen=True)
class RadialData:
    kappa: float
    rho: float
    c: float
    s: float
    weight: Callable[[np.ndarray], np.ndarray]

    def recover(self, F: Callable[[np.ndarray], np.ndarray], phi_end: float, omega_end: float) -> float:
        """``phi(0) = c phi(rho) - s omega_r(rho) + int_0^rho s_kappa F``."""
        val, _ = quad_vec(lambda t: self.weight(t) * F(t), 0.0, self.rho, epsabs=1e-15, epsrel=1e-14)
        return self.c * phi_end - self.s * omega_end + float(val)


def curvature_oracle_radial(kappa: float, rho: float) -> RadialData:
    """Closed-form radial transport for the double-divergence system on a space form.

    Variables ``(phi, omega_r)`` with ``phi' = omega_r``, ``omega_r' = -kappa phi + F``,
    ``F = (P*phi)_rr`` along a unit-speed geodesic of length ``rho``.
    """
    g = GenTrig(kappa)
    return RadialData(kappa, rho, float(g.c(rho)), float(g.s(rho)), g.s)


def radial_system(kappa: float) -> AugmentedSystem:
    """The radial 2x2 system as a one-dimensional callable system (integrated numerically)."""
    from .augmented import AugmentedSystem as AS

    Bk = np.array([[[0.0, 1.0], [-kappa, 0.0]]])
    sys = AS(1, 1, 1, (2,), ["phi", "omega_r"], [0, -1], [{((0,), 0): ONE}, {((1,), 0): ONE}], [0],
             {}, {(0, 1, ((0,), 0)): ONE}, B_fn=lambda x: Bk, name="radial_double_divergence")
    return sys


def radial_numeric(kappa: float, rho: float, F: Callable[[np.ndarray], np.ndarray], phi_end: float,
                   omega_end: float, rtol: float = 1e-13) -> float:
    """``phi(0)`` by integrating the radial system backwards from ``rho`` (oracle for the closed form)."""

    def rhs(t, u):
        return [u[1], -kappa * u[0] + float(F(t))]

    sol = solve_ivp(rhs, (rho, 0.0), [phi_end, omega_end], method="DOP853", rtol=rtol, atol=1e-15)
    if not sol.success:
        raise StepControlError(sol.message)
    return float(sol.y[0, -1])
