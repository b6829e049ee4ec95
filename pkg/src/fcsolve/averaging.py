"""Smoothly averaged kernels and endpoint densities.

Averaging the curve kernels over the far endpoint ``y1`` against a weight
gives a locally integrable kernel ``K(x, y)`` (matrix ``[K, J]`` of shape
s0 x r0) and, for compactly supported weights, a smooth density ``b(x, y)``
(r0 x r0) such that ``<K(., y), P*phi> + <b(., y), phi> = phi(y)``.

Two independent evaluators are provided: one integrates the transport data
of an augmented system along the radial variable, the other implements the
explicit flat-space formulas.  Outer derivatives are taken by
Richardson-extrapolated central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import sympy as sp
from scipy.integrate import quad
from scipy.special import gamma as gamma_fn

from .augmented import AugmentedSystem, special_system
from .diffop import TestFunction, builtin, canonical_name, pair_weight, sym_pairs
from .multipoly import MultiIndex, unit
from .ode_kernel import exp_minus_batch, rough_kernel

NEAR_DIAGONAL = 1e-6


def sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / gamma_fn(d / 2)


# -- weights -----------------------------------------------------------------

@dataclass(frozen=True)
class BogovskiiWeight:
    """``eta(x) = A (1 - |x - c|^2 / R^2)^p`` on the ball, normalized to unit mass."""

    center: tuple
    radius: float
    p: int = 8
    amplitude: float = 1.0

    kind = "bogovskii"

    @property
    def d(self) -> int:
        return len(self.center)

    @cached_property
    def c(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    @cached_property
    def mass_unnormalized(self) -> float:
        d, p = self.d, self.p
        radial, _ = quad(lambda t: (1 - t * t) ** p * t ** (d - 1), 0.0, 1.0, epsabs=0, epsrel=1e-13)
        return self.amplitude * self.radius ** d * sphere_area(d) * radial

    @cached_property
    def scale(self) -> float:
        return self.amplitude / self.mass_unnormalized

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        q = 1 - np.sum((X - self.c) ** 2, axis=-1) / self.radius ** 2
        return self.scale * np.where(q > 0, np.clip(q, 0, None) ** self.p, 0.0)

    def grad(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        q = 1 - np.sum((X - self.c) ** 2, axis=-1) / self.radius ** 2
        f = np.where(q > 0, self.p * np.clip(q, 0, None) ** (self.p - 1), 0.0) * self.scale
        return (-2 / self.radius ** 2) * f[..., None] * (X - self.c)

    def chord(self, Y: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Parameters ``r_lo <= r_hi`` where ``Y + r U`` (|U| = 1) crosses the support ball; NaN if it misses."""
        w = Y - self.c
        b = np.sum(w * U, axis=-1)
        disc = b * b - (np.sum(w * w, axis=-1) - self.radius ** 2)
        s = np.sqrt(np.where(disc > 0, disc, np.nan))
        return -b - s, -b + s

    def radial_moment(self, Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """``R(z; y) = int_{|z|}^inf eta(y + r z/|z|) r^{d-1} dr`` (exact Gauss-Legendre on the chord)."""
        rho = np.linalg.norm(Z, axis=-1)
        U = Z / rho[:, None]
        lo, hi = self.chord(Y, U)
        a = np.maximum(lo, rho)
        ok = np.isfinite(lo) & (hi > a)
        a, b = np.where(ok, a, 0.0), np.where(ok, hi, 0.0)
        t, w = np.polynomial.legendre.leggauss(self.p + self.d + 2)
        r = a[:, None] + (b - a)[:, None] * (t[None, :] + 1) / 2
        pts = Y[:, None, :] + r[..., None] * U[:, None, :]
        vals = self(pts) * r ** (self.d - 1)
        return np.where(ok, vals @ w * (b - a) / 2, 0.0)

    def sympy_expr(self, xs: Sequence[sp.Symbol]) -> sp.Expr:
        q = 1 - sum((x - sp.nsimplify(c)) ** 2 for x, c in zip(xs, self.center)) / sp.nsimplify(self.radius) ** 2
        return q ** self.p

    def support(self) -> tuple[np.ndarray, float]:
        return self.c, float(self.radius)


@dataclass(frozen=True)
class ConicWeight:
    """Density on the sphere: ``A (1 - (a / theta)^2)^p`` for the angle ``a`` to ``axis`` below ``theta``.

    ``aperture=None`` gives the uniform density.
    """

    axis: tuple
    aperture: float | None = None
    p: int = 8
    amplitude: float = 1.0

    kind = "conic"

    @property
    def d(self) -> int:
        return len(self.axis)

    @cached_property
    def u0(self) -> np.ndarray:
        a = np.asarray(self.axis, dtype=float)
        return a / np.linalg.norm(a)

    @cached_property
    def mass_unnormalized(self) -> float:
        d = self.d
        if self.aperture is None:
            return self.amplitude * sphere_area(d)
        th = self.aperture
        if d == 2:
            val, _ = quad(lambda a: (1 - (a / th) ** 2) ** self.p, -th, th, epsabs=0, epsrel=1e-13)
            return self.amplitude * val
        val, _ = quad(lambda a: (1 - (a / th) ** 2) ** self.p * math.sin(a) ** (d - 2), 0, th,
                      epsabs=0, epsrel=1e-13)
        return self.amplitude * sphere_area(d - 1) * val

    @cached_property
    def scale(self) -> float:
        return self.amplitude / self.mass_unnormalized

    def angle(self, U: np.ndarray) -> np.ndarray:
        return np.arccos(np.clip(U @ self.u0, -1.0, 1.0))

    def __call__(self, U) -> np.ndarray:
        U = np.asarray(U, dtype=float)
        if self.aperture is None:
            return np.full(U.shape[:-1], self.scale)
        q = 1 - (self.angle(U) / self.aperture) ** 2
        return self.scale * np.where(q > 0, np.clip(q, 0, None) ** self.p, 0.0)

    def in_cap(self, U: np.ndarray, margin: float = 0.0) -> np.ndarray:
        if self.aperture is None:
            return np.ones(U.shape[:-1], dtype=bool)
        return self.angle(U) < self.aperture + margin


Weight = BogovskiiWeight | ConicWeight


# -- finite differences ------------------------------------------------------

def _steps(Z: np.ndarray, base: float) -> np.ndarray:
    rho = np.linalg.norm(Z, axis=-1)
    return np.minimum(base * (1 + rho), 0.1 * rho)


def _richardson(D: Callable[[float], np.ndarray], order: int) -> np.ndarray:
    """Two Richardson levels for an even-error central difference of the given order."""
    d1, d2, d3 = D(1.0), D(0.5), D(0.25)
    r1, r2 = (4 * d2 - d1) / 3, (4 * d3 - d2) / 3
    return (16 * r2 - r1) / 15


def fd_partial(f: Callable[[np.ndarray], np.ndarray], Z: np.ndarray, gamma: MultiIndex,
               base1: float = 1e-4, base2: float = 1e-3) -> np.ndarray:
    """``d^gamma f`` at ``Z`` (N, d) for ``|gamma| <= 2`` by extrapolated central differences."""
    order = sum(gamma)
    if order == 0:
        return f(Z)
    d = Z.shape[1]
    idx = [i for i in range(d) for _ in range(gamma[i])]
    if order == 1:
        h = _steps(Z, base1)
        e = np.eye(d)[idx[0]]

        def D(c):
            hh = (c * h)[:, None]
            return _bcast(f(Z + hh * e) - f(Z - hh * e), 1 / (2 * c * h))

        return _richardson(D, 1)
    if order == 2:
        h = _steps(Z, base2)
        i, j = idx
        ei, ej = np.eye(d)[i], np.eye(d)[j]
        if i == j:
            f0 = f(Z)

            def D(c):
                hh = (c * h)[:, None]
                return _bcast(f(Z + hh * ei) - 2 * f0 + f(Z - hh * ei), 1 / (c * h) ** 2)
        else:
            def D(c):
                hh = (c * h)[:, None]
                return _bcast(f(Z + hh * (ei + ej)) - f(Z + hh * (ei - ej)) - f(Z - hh * (ei - ej))
                              + f(Z - hh * (ei + ej)), 1 / (4 * (c * h) ** 2))

        return _richardson(D, 2)
    raise NotImplementedError("derivatives of order > 2 are not needed by the zoo")


def _bcast(a: np.ndarray, s: np.ndarray) -> np.ndarray:
    return a * s.reshape(s.shape + (1,) * (a.ndim - 1))


def fd_grad(f, Z, **kw) -> np.ndarray:
    """(N, d, ...) first derivatives."""
    d = Z.shape[1]
    return np.stack([fd_partial(f, Z, unit(d, i), **kw) for i in range(d)], axis=1)


def fd_hess(f, Z, **kw) -> np.ndarray:
    d = Z.shape[1]
    out = None
    for i in range(d):
        for j in range(i, d):
            g = [0] * d
            g[i] += 1
            g[j] += 1
            v = fd_partial(f, Z, tuple(g), **kw)
            if out is None:
                out = np.zeros((Z.shape[0], d, d) + v.shape[1:], dtype=v.dtype)
            out[:, i, j] = v
            out[:, j, i] = v
    return out


# -- symmetric tensor helpers ------------------------------------------------

def full_to_reduced(Kf: np.ndarray) -> np.ndarray:
    """(N, d, d, ...) full symmetric-slot kernel to stored pair components with contraction weights."""
    d = Kf.shape[1]
    return np.stack([pair_weight(j, k) * 0.5 * (Kf[:, j, k] + Kf[:, k, j]) for j, k in sym_pairs(d)], axis=1)


def reduced_to_full(Kr: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros((Kr.shape[0], d, d) + Kr.shape[2:], dtype=Kr.dtype)
    for n, (j, k) in enumerate(sym_pairs(d)):
        v = Kr[:, n] / pair_weight(j, k)
        out[:, j, k] = v
        out[:, k, j] = v
    return out


def tstar(Kf: np.ndarray) -> np.ndarray:
    """Trace-free symmetric part in the two leading tensor slots (after the sample axis)."""
    d = Kf.shape[1]
    sym = 0.5 * (Kf + np.swapaxes(Kf, 1, 2))
    tr = np.einsum("nii...->n...", sym)
    eye = np.eye(d).reshape((1, d, d) + (1,) * (Kf.ndim - 3))
    return sym - eye * tr[:, None, None] / d


# -- kernels -----------------------------------------------------------------

@dataclass
class AveragedKernel:
    """Evaluator ``(X, Y) -> K`` of shape (N, s0, r0); ``backing`` names the construction."""

    name: str
    d: int
    r0: int
    s0: int
    m: tuple
    weight: Weight
    backing: str
    core: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)

    def evaluate(self, X, Y) -> tuple[np.ndarray, np.ndarray]:
        """Kernel values and a near-diagonal mask; flagged rows are set to zero."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.broadcast_to(np.asarray(Y, dtype=float), X.shape)
        Z = X - Y
        near = np.linalg.norm(Z, axis=1) < NEAR_DIAGONAL
        out = np.zeros((X.shape[0], self.s0, self.r0))
        if np.any(~near):
            out[~near] = self.core(Z[~near], np.ascontiguousarray(Y[~near]))
        return out, near

    def __call__(self, x, y) -> np.ndarray:
        vals, near = self.evaluate(np.asarray(x, float)[None], np.asarray(y, float)[None])
        if near[0]:
            raise ValueError("kernel evaluation on the diagonal x = y")
        return vals[0]

    def singular_exponent(self) -> tuple[int, ...]:
        return tuple(m - self.d for m in self.m)


def _check_weight(weight, d):
    if weight.d != d:
        raise ValueError(f"weight dimension {weight.d} does not match d = {d}")


# ODE-synthesized kernels

def _ode_core(sys: AugmentedSystem, weight: Weight, length: float, tracefree: bool, symmetric: bool):
    """Build ``core(Z, Y)`` from the transport data of ``sys``."""
    Cn, keys = sys.C_numeric()
    d, r0, s0 = sys.d, sys.r0, sys.s0
    gammas = sorted({g for (g, _) in keys}, key=lambda g: (sum(g), g))

    def G(Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Inner integral for every C column, shape (N, r0, ncols)."""
        rho = np.linalg.norm(Z, axis=1)
        U = Z / rho[:, None]
        if weight.kind == "conic":
            if np.any(rho >= length):
                raise ValueError("ray length must exceed the sampled distances")
            V = length * U  # y1 - y
            S = _S_batch(sys, Cn, V, rho / length, Y)
            return S * (weight(U) * rho ** (1 - d) / length)[:, None, None]
        lo, hi = weight.chord(Y, U)
        a = np.maximum(lo, rho)
        ok = np.isfinite(lo) & (hi > a)
        a, b = np.where(ok, a, rho), np.where(ok, hi, rho + 1)
        t, w = np.polynomial.legendre.leggauss(weight.p + d + 3)
        r = a[:, None] + (b - a)[:, None] * (t[None, :] + 1) / 2  # (N, q)
        N, q = r.shape
        V = (r[..., None] * U[:, None, :]).reshape(N * q, d)
        s = (rho[:, None] / r).reshape(N * q)
        S = _S_batch(sys, Cn, V, s, np.repeat(Y, q, axis=0)).reshape(N, q, r0, -1)
        fac = weight(Y[:, None, :] + V.reshape(N, q, d)) * r ** (d - 2) * (w * (b - a)[:, None] / 2)
        out = np.einsum("nq,nqjc->njc", fac, S) * (rho ** (1 - d))[:, None, None]
        return np.where(ok[:, None, None], out, 0.0)

    def core(Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
        out = np.zeros((Z.shape[0], s0, r0))
        for g in gammas:
            cols = [c for c, (gg, _) in enumerate(keys) if gg == g]
            Dg = fd_partial(lambda ZZ: G(ZZ, Y)[:, :, cols], Z, g)
            sign = (-1) ** sum(g)
            for n, c in enumerate(cols):
                out[:, keys[c][1], :] += sign * Dg[:, :, n]
        return _postprocess(out, d, tracefree, symmetric)

    return core


def _S_batch(sys: AugmentedSystem, Cn: np.ndarray, V: np.ndarray, s: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``S(y, y + V, s)`` for many segments, shape (M, r0, ncols)."""
    vC = np.einsum("mi,iac->mac", V, Cn)
    if sys.constant:
        Q = exp_minus_batch(sys, s[:, None] * V)[:, sys.observe]
        return -np.einsum("mja,mac->mjc", Q, vC)
    out = np.empty((V.shape[0], sys.r0, Cn.shape[2]))
    for k in range(V.shape[0]):
        out[k] = rough_kernel(sys, Y[k], Y[k] + V[k]).S(float(s[k]))
    return out


def _postprocess(out: np.ndarray, d: int, tracefree: bool, symmetric: bool) -> np.ndarray:
    if not symmetric:
        return out
    return full_to_reduced(tstar(reduced_to_full(out, d))) if tracefree else out


_SYM_INPUT = {"double_divergence": (True, False), "tracefree_double_divergence": (True, True),
              "symmetric_divergence": (True, False), "tracefree_symmetric_divergence": (True, True)}


def ode_kernel_average(sys: AugmentedSystem | str, weight: Weight, d: int | None = None,
                       length: float = 100.0) -> AveragedKernel:
    """Averaged kernel synthesized from an augmented system along segments (or rays for conic weights)."""
    if isinstance(sys, str):
        sys = special_system(sys, d)
    _check_weight(weight, sys.d)
    name = canonical_name(sys.name) if sys.name else ""
    if name.startswith("einstein"):
        n = sys.d * (sys.d + 1) // 2
        tf = name == "einstein_constraint_cmc"
        raw = _ode_core(sys, weight, length, False, False)

        def core(Z, Y):
            out = raw(Z, Y)
            out[:, n:, 1:] = _postprocess(out[:, n:, 1:], sys.d, tf, True)
            return out
    else:
        symmetric, tf = _SYM_INPUT.get(name, (False, False))
        core = _ode_core(sys, weight, length, tf, symmetric)
    return AveragedKernel(name or "system", sys.d, sys.r0, sys.s0, sys.m, weight, "ode", core)


# closed-form kernels

def _radial(weight: Weight, Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``R(z; y)`` for a Bogovskii weight, ``|z| slashed-eta(z/|z|)`` style factor for conic ones.

    Returned so that ``radial * f(z) / |z|^d`` reproduces both families, where
    the conic factor is ``slashed-eta(z/|z|)`` itself.
    """
    if weight.kind == "bogovskii":
        return weight.radial_moment(Z, Y)
    rho = np.linalg.norm(Z, axis=1)
    return weight(Z / rho[:, None])


def _div_full(weight, Z, Y):
    d = Z.shape[1]
    rho = np.linalg.norm(Z, axis=1)
    return (_radial(weight, Z, Y) / rho ** d)[:, None] * Z  # (N, d)


def _zz_full(weight, Z, Y, power=None):
    d = Z.shape[1]
    rho = np.linalg.norm(Z, axis=1)
    return (_radial(weight, Z, Y) / rho ** d)[:, None, None] * Z[:, :, None] * Z[:, None, :]


def _cf_divergence(weight, Z, Y):
    return _div_full(weight, Z, Y)[:, :, None]


def _cf_double_divergence(weight, Z, Y):
    return full_to_reduced(_zz_full(weight, Z, Y)[..., None])


def _cf_tf_double_divergence(weight, Z, Y):
    d = Z.shape[1]
    first = _zz_full(weight, Z, Y)

    def v(ZZ):  # R z^i / |z|^{d-2}
        rho = np.linalg.norm(ZZ, axis=1)
        return (_radial(weight, ZZ, Y) / rho ** (d - 2))[:, None] * ZZ

    dv = fd_grad(v, Z)  # (N, j, i)
    second = np.swapaxes(dv, 1, 2) / (2 * (d - 1))  # [i, j] = d_j v^i
    return full_to_reduced(tstar(first + second)[..., None])


def _sdiv_full(weight, Z, Y):
    """Killing closed form, full slots (N, i, j, k)."""
    d = Z.shape[1]
    rho = np.linalg.norm(Z, axis=1)
    R = _radial(weight, Z, Y)
    t1 = 0.5 * (R / rho ** d)[:, None, None, None] * Z_sym(Z, d)

    def g2(ZZ):  # R z^m (z^i delta^j_k + z^j delta^i_k) / |z|^d, shape (N, m, i, j, k)
        rr = np.linalg.norm(ZZ, axis=1)
        return (_radial(weight, ZZ, Y) / rr ** d)[:, None, None, None, None] * ZZ[:, :, None, None, None] * Z_sym(ZZ, d)[:, None]

    t2 = 0.5 * sum(fd_partial(lambda ZZ: g2(ZZ)[:, m], Z, unit(d, m)) for m in range(d))

    def g3(ZZ):  # R z^i z^j / |z|^d
        return _zz_full(weight, ZZ, Y)

    dg3 = fd_grad(g3, Z)  # (N, k, i, j)
    t3 = -np.transpose(dg3, (0, 2, 3, 1))
    return t1 + t2 + t3


def Z_sym(Z: np.ndarray, d: int) -> np.ndarray:
    """``z^i delta^j_k + z^j delta^i_k`` as (N, i, j, k)."""
    eye = np.eye(d)
    return Z[:, :, None, None] * eye[None, None, :, :] + Z[:, None, :, None] * eye[None, :, None, :]


def _cf_symmetric_divergence(weight, Z, Y):
    return full_to_reduced(_sdiv_full(weight, Z, Y))


def _cstar(F: Callable[[np.ndarray], np.ndarray], Z: np.ndarray) -> np.ndarray:
    """``(C* f)_ij`` for a field ``F(Z) -> (N, d, d, ...)``."""
    d = Z.shape[1]
    H = fd_hess(F, Z)  # (N, a, b, i, j, ...)
    out = -np.einsum("nlilj...->nij...", H) - np.einsum("nlijl...->nij...", H) + np.einsum("nllij...->nij...", H)
    tr = np.einsum("nijkk...->nij...", H)
    return out + tr / (d - 1)


def _cf_tf_symmetric_divergence(weight, Z, Y):
    d = Z.shape[1]
    eye = np.eye(d)

    def rad(ZZ, power):
        rr = np.linalg.norm(ZZ, axis=1)
        return _radial(weight, ZZ, Y) / rr ** power

    conic = weight.kind == "conic"

    def f1(ZZ):  # z^i delta^j_k R / |z|^d   (N, i, j, k)
        return rad(ZZ, d)[:, None, None, None] * ZZ[:, :, None, None] * eye[None, None]

    def f2(ZZ):  # z^i delta^j_k R / |z|^{d-2}
        return rad(ZZ, d - 2)[:, None, None, None] * ZZ[:, :, None, None] * eye[None, None]

    def f3(ZZ):  # z^i z^j z_k R / |z|^d
        return rad(ZZ, d)[:, None, None, None] * ZZ[:, :, None, None] * ZZ[:, None, :, None] * ZZ[:, None, None, :]

    def f4(ZZ):  # z^i z^l R / |z|^d  (N, i, l)
        return _zz_full(weight, ZZ, Y)

    if conic:
        cterm = _cstar(lambda ZZ: f2(ZZ) - 2 * f3(ZZ), Z) / (2 * (d - 2))
    else:
        cterm = _cstar(f2, Z) / (2 * (d - 2)) - _cstar(f3, Z) / (d - 2)
    dg = fd_grad(f4, Z)  # (N, a, i, l): d_a (z^i z^l R/|z|^d)
    # delta^j_l d_k g^{il} - delta^j_k d_l g^{il}
    last = np.transpose(dg, (0, 2, 3, 1)) - np.einsum("nlil->ni", dg)[:, :, None, None] * eye[None, None]
    if conic:  # stated with the roles of i and j exchanged; identical after symmetrization
        last = np.swapaxes(last, 1, 2)
    full = tstar(f1(Z) + cterm - last)
    return full_to_reduced(full)


def _block(a, b, d, r0a, s0a):
    def core(weight, Z, Y):
        A, B = a(weight, Z, Y), b(weight, Z, Y)
        out = np.zeros((Z.shape[0], A.shape[1] + B.shape[1], A.shape[2] + B.shape[2]))
        out[:, :A.shape[1], :A.shape[2]] = A
        out[:, A.shape[1]:, A.shape[2]:] = B
        return out
    return core


CLOSED_FORMS = {
    "divergence": _cf_divergence,
    "double_divergence": _cf_double_divergence,
    "tracefree_double_divergence": _cf_tf_double_divergence,
    "symmetric_divergence": _cf_symmetric_divergence,
    "tracefree_symmetric_divergence": _cf_tf_symmetric_divergence,
    "einstein_constraint": _block(_cf_double_divergence, _cf_symmetric_divergence, 0, 0, 0),
    "einstein_constraint_cmc": _block(_cf_double_divergence, _cf_tf_symmetric_divergence, 0, 0, 0),
}


def closed_form_kernel(name: str, weight: Weight, d: int) -> AveragedKernel:
    """Explicit flat-space kernel for a zoo operator."""
    name = canonical_name(name)
    P = builtin(name, d)
    _check_weight(weight, d)
    fn = CLOSED_FORMS[name]
    return AveragedKernel(name, d, P.r0, P.s0, P.m, weight, "closed_form", lambda Z, Y: fn(weight, Z, Y))


# -- endpoint densities ------------------------------------------------------

def _sympy_setup(d: int):
    xs = sp.symbols(f"x1:{d + 1}", real=True)
    ys = sp.symbols(f"y1:{d + 1}", real=True)
    return xs, ys


@dataclass
class EndpointDensity:
    """``b(x, y)`` of shape (r0, r0): rows ``J`` (recovered component), columns ``J'`` (paired component)."""

    name: str
    d: int
    r0: int
    weight: BogovskiiWeight
    backing: str
    _fn: Callable = field(repr=False)

    def __call__(self, X, Y) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, float))
        Y = np.broadcast_to(np.asarray(Y, float), X.shape)
        args = [X[:, i] for i in range(self.d)] + [Y[:, i] for i in range(self.d)]
        raw = np.empty((X.shape[0], self.r0, self.r0))
        for J in range(self.r0):
            for Jp in range(self.r0):
                raw[:, J, Jp] = np.broadcast_to(self._fn[J][Jp](*args), X.shape[:1])
        c, R = self.weight.support()
        inside = np.sum((X - c) ** 2, axis=1) < R ** 2
        return raw * (self.weight.scale * inside)[:, None, None]


def _require_bogovskii(weight):
    if weight.kind != "bogovskii":
        raise ValueError("endpoint densities need a compactly supported weight on R^d; "
                         "conic constructions carry no endpoint term")


def b_eta(source: AugmentedSystem | str, weight: BogovskiiWeight, d: int | None = None) -> EndpointDensity:
    """``b(x, y) = sum_A sum_alpha (-1)^|alpha| d_x^alpha (c[g_A] Z^A(y, x) eta(x))`` from a system."""
    _require_bogovskii(weight)
    sys = special_system(source, d) if isinstance(source, str) else source
    if not sys.constant:
        raise ValueError("symbolic endpoint densities need constant coefficients")
    d = sys.d
    xs, ys = _sympy_setup(d)
    eta = weight.sympy_expr(xs)
    z = [x - y for x, y in zip(xs, ys)]
    n = sys.n
    M = sp.zeros(n, n)
    for (i, a, b2), v in sys.B.items():
        M[a, b2] += z[i] * (sp.Rational(v.re.numerator, v.re.denominator) + sp.I * sp.Rational(v.im.numerator, v.im.denominator))
    W = sp.eye(n)
    term = sp.eye(n)
    for k in range(1, n + 1):
        term = -term * M / k
        if term.is_zero_matrix:
            break
        W += term
    else:
        raise ValueError("connection is not nilpotent")
    fns = []
    for a in sys.observe:
        row = []
        for Jp in range(sys.r0):
            expr = sp.Integer(0)
            for A in range(n):
                if W[a, A] == 0:
                    continue
                for (al, J), c in sys.jets[A].items():
                    if J != Jp:
                        continue
                    cc = sp.Rational(c.re.numerator, c.re.denominator) + sp.I * sp.Rational(c.im.numerator, c.im.denominator)
                    g = cc * W[a, A] * eta
                    for i, k in enumerate(al):
                        if k:
                            g = sp.diff(g, xs[i], k)
                    expr += (-1) ** sum(al) * g
            row.append(sp.lambdify(list(xs) + list(ys), sp.re(sp.expand(expr)) if expr.has(sp.I) else expr, "numpy"))
        fns.append(row)
    return EndpointDensity(sys.name, d, sys.r0, weight, "system", fns)


def b_eta_closed_form(name: str, weight: BogovskiiWeight, d: int) -> EndpointDensity:
    """Explicit flat-space endpoint densities for the zoo."""
    _require_bogovskii(weight)
    name = canonical_name(name)
    P = builtin(name, d)
    xs, ys = _sympy_setup(d)
    eta = weight.sympy_expr(xs)
    z = [x - y for x, y in zip(xs, ys)]
    r2 = sum(v * v for v in z)
    D = lambda e, i: sp.diff(e, xs[i])
    lap = lambda e: sum(sp.diff(e, x, 2) for x in xs)

    def dd():
        return [[(d + 1) * eta + sum(z[i] * D(eta, i) for i in range(d))]]

    def sdiv():
        return [[sp.Rational(d + 1, 2) * eta * int(j == k) + sp.Rational(1, 2) * sum(z[l] * D(eta, l) for l in range(d)) * int(j == k)
                 - sp.Rational(1, 2) * z[j] * D(eta, k) for j in range(d)] for k in range(d)]

    def tf_sdiv():
        rows = []
        for k in range(d):
            row = []
            for j in range(d):
                e = eta * int(j == k) + sp.Rational(1, 2) * sum(D(eta * z[l], l) for l in range(d)) * int(j == k)
                e += -sp.Rational(1, 2) * D(eta * z[j], k) + sp.Rational(1, d) * D(eta * z[k], j)
                e += -sp.Rational(1, 2 * d) * D(D(eta * r2, k), j)
                e += sp.Rational(1, d) * sum(D(D(eta * z[l] * z[k], l), j) for l in range(d))
                row.append(e)
            rows.append(row)
        return rows

    def blockdiag(a, b):
        na, nb = len(a), len(b)
        return [[a[i][j] if i < na and j < na else (b[i - na][j - na] if i >= na and j >= na else 0)
                 for j in range(na + nb)] for i in range(na + nb)]

    if name == "divergence":
        mat = [[eta]]
    elif name == "double_divergence":
        mat = dd()
    elif name == "tracefree_double_divergence":
        mat = [[eta + sum(D(z[j] * eta, j) for j in range(d)) + lap(r2 * eta) / (2 * d)]]
    elif name == "symmetric_divergence":
        mat = sdiv()
    elif name == "tracefree_symmetric_divergence":
        mat = tf_sdiv()
    elif name == "einstein_constraint":
        mat = blockdiag(dd(), sdiv())
    else:
        mat = blockdiag(dd(), tf_sdiv())
    args = list(xs) + list(ys)
    fns = [[sp.lambdify(args, sp.sympify(e), "numpy") for e in row] for row in mat]
    return EndpointDensity(name, d, P.r0, weight, "closed_form", fns)


def b_eta_pairing(sys: AugmentedSystem, weight: BogovskiiWeight, phi: TestFunction, y, n: int = 24,
                  chunk: int = 200_000) -> np.ndarray:
    """``<b(., y), phi> = int eta(x) Z^A(y, x) Phi_A[phi](x) dx`` using exact jets of ``phi``."""
    from .augmented import eval_variables
    from .quadrature import ball_rule

    _require_bogovskii(weight)
    c, R = weight.support()
    pts, w = ball_rule(sys.d, R, n, center=c)
    y = np.asarray(y, float)
    out = np.zeros(sys.r0)
    for s in range(0, len(w), chunk):
        P, ww = pts[s:s + chunk], w[s:s + chunk]
        W = exp_minus_batch(sys, P - y)[:, sys.observe]  # (N, r0, n)
        Phi = eval_variables(sys, phi, P)  # (n, N)
        out = out + (np.einsum("nja,an->nj", W, Phi) * (weight(P) * ww)[:, None]).sum(axis=0)
    return out


# -- decay -------------------------------------------------------------------

def generic_direction(weight: Weight, d: int) -> np.ndarray:
    """A fixed direction avoiding coordinate planes; tilted toward the axis for conic weights."""
    v = np.array([1.0, 0.37, 0.21, 0.13][:d]) if d <= 4 else np.linspace(1.0, 0.1, d)
    v /= np.linalg.norm(v)
    if weight.kind == "conic" and weight.aperture is not None:
        u0 = weight.u0
        w = v - (v @ u0) * u0
        if np.linalg.norm(w) < 1e-12:
            w = np.roll(u0, 1)
            w -= (w @ u0) * u0
        w /= np.linalg.norm(w)
        a = 0.3 * weight.aperture
        return math.cos(a) * u0 + math.sin(a) * w
    return v


def decay_slopes(kernel: AveragedKernel, y, theta=None, ts=None) -> np.ndarray:
    """Least-squares slope of ``log|K_row|`` against ``log t`` along ``y + t theta``, per row ``K``."""
    ts = np.logspace(-3, -1, 9) if ts is None else np.asarray(ts)
    theta = generic_direction(kernel.weight, kernel.d) if theta is None else theta
    theta = np.asarray(theta, float) / np.linalg.norm(theta)
    X = np.asarray(y, float)[None] + ts[:, None] * theta[None]
    vals, _ = kernel.evaluate(X, np.asarray(y, float))
    out = []
    for K in range(kernel.s0):
        mag = np.linalg.norm(vals[:, K, :], axis=1)
        out.append(np.polyfit(np.log(ts), np.log(mag), 1)[0] if np.all(mag > 0) else np.nan)
    return np.array(out)
