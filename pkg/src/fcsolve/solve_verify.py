"""Apply averaged solution operators by quadrature and verify their identities.

Integrals with a point singularity are done in polar coordinates centred at
the singular point.  Radial nodes are Gauss-Legendre on the pieces cut out by
the support balls of the integrand; angles use the periodic trapezoid rule
(with Gauss-Legendre in the polar angle for d = 3), or a Gauss rule on the
cap for conic weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .augmented import CokernelBasis
from .averaging import AveragedKernel, BogovskiiWeight, ConicWeight, EndpointDensity, b_eta_pairing
from .diffop import DiffOperator, TestFunction
from .multipoly import MultiIndex
from .quadrature import ball_rule, gauss_legendre, sphere_rule

Ball = tuple[np.ndarray, float]


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureSpec:
    n_radial: int = 24  # Gauss-Legendre nodes per radial piece at level 0
    n_angular: int = 24  # angular resolution at level 0
    levels: int = 4  # refinements (each doubles both orders)
    tol: float = 1e-10
    n_ball: int = 24  # order of the smooth ball rule
    chunk: int = 40_000

    def at_level(self, k: int) -> "QuadratureSpec":
        return QuadratureSpec(self.n_radial * 2 ** k, self.n_angular * 2 ** k, 0, self.tol, self.n_ball * 2 ** k,
                              self.chunk)


@dataclass
class VerificationReport:
    identity: str
    residual_max: float
    residual_l2: float
    tolerance: float
    passed: bool
    oracle: str
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# -- data fields -------------------------------------------------------------

@dataclass(frozen=True)
class Bump:
    """``poly_J(y) (1 - |y - c|^2 / R^2)^p`` on the ball, one polynomial per component."""

    center: tuple
    radius: float
    polys: tuple  # per component: {exponents: coefficient} in absolute coordinates
    p: int = 8

    def __call__(self, Y: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, float)
        q = 1 - np.sum((Y - c) ** 2, axis=-1) / self.radius ** 2
        base = np.where(q > 0, np.clip(q, 0, None) ** self.p, 0.0)
        out = np.zeros((len(self.polys),) + Y.shape[:-1])
        for J, poly in enumerate(self.polys):
            for a, v in poly.items():
                t = np.full(Y.shape[:-1], float(v))
                for i, e in enumerate(a):
                    if e:
                        t = t * Y[..., i] ** e
                out[J] += t
        return out * base

    def ball(self) -> Ball:
        return np.asarray(self.center, float), float(self.radius)


@dataclass(frozen=True)
class BumpField:
    """Finite sum of bumps; compactly supported data for the solvers."""

    d: int
    ncomp: int
    bumps: tuple

    @classmethod
    def constant_bumps(cls, d: int, terms: Sequence[tuple[Sequence[float], float, Sequence[float]]], p: int = 8):
        """Bumps with constant amplitude vectors: ``(center, radius, amplitude)``."""
        zero = (0,) * d
        bumps = tuple(Bump(tuple(c), float(r), tuple({zero: float(a)} if a else {} for a in amp), p)
                      for c, r, amp in terms)
        return cls(d, len(terms[0][2]) if terms else 0, bumps)

    def __call__(self, Y) -> np.ndarray:
        Y = np.asarray(Y, float)
        out = np.zeros((self.ncomp,) + Y.shape[:-1])
        for b in self.bumps:
            out += b(Y)
        return out

    def balls(self) -> list[Ball]:
        return [b.ball() for b in self.bumps]

    def __add__(self, o: "BumpField") -> "BumpField":
        return BumpField(self.d, self.ncomp, self.bumps + o.bumps)

    def scale(self, s: float) -> "BumpField":
        return BumpField(self.d, self.ncomp, tuple(
            Bump(b.center, b.radius, tuple({a: s * v for a, v in p.items()} for p in b.polys), b.p) for b in self.bumps))

    def is_zero(self) -> bool:
        return all(not any(v for p in b.polys for v in p.values()) for b in self.bumps)


def test_function_balls(f: TestFunction, eps: float = 1e-18) -> list[Ball]:
    """Balls outside which each Gaussian term of ``f`` is below ``eps``."""
    out = []
    for c in f.comps:
        for (mu, sigma), p in c.items():
            single = TestFunction(f.d, ({(mu, sigma): p},))
            out.append(single.support_ball(eps))
    return out


def _as_field(f) -> tuple[Callable[[np.ndarray], np.ndarray], list[Ball]]:
    if isinstance(f, TestFunction):
        return (lambda Y: np.real(f(Y))), test_function_balls(f)
    return f, f.balls()


# -- polar quadrature --------------------------------------------------------

def cap_rule(d: int, axis: np.ndarray, aperture: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Directions within ``aperture`` of ``axis`` and their surface weights."""
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    if d == 2:
        t, w = np.polynomial.legendre.leggauss(2 * n)
        a = aperture * t
        base = math.atan2(axis[1], axis[0])
        return np.stack([np.cos(base + a), np.sin(base + a)], axis=1), w * aperture
    if d == 3:
        t, w = gauss_legendre(n)
        a, wa = aperture * t, aperture * w * np.sin(aperture * t)
        ph = 2 * np.pi * (np.arange(2 * n) + 0.5) / (2 * n)
        A, PH = np.meshgrid(a, ph, indexing="ij")
        local = np.stack([np.sin(A) * np.cos(PH), np.sin(A) * np.sin(PH), np.cos(A)], axis=-1).reshape(-1, 3)
        # rotate e3 onto the axis
        e3 = np.array([0.0, 0.0, 1.0])
        v = np.cross(e3, axis)
        s, c = np.linalg.norm(v), float(e3 @ axis)
        if s < 1e-15:
            Rm = np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
        else:
            vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
            Rm = np.eye(3) + vx + vx @ vx * ((1 - c) / s ** 2)
        W = (wa[:, None] * np.full(2 * n, np.pi / n)[None, :]).reshape(-1)
        return local @ Rm.T, W
    raise NotImplementedError("cap rules are provided for d = 2, 3")


def _chords(center: np.ndarray, U: np.ndarray, balls: Sequence[Ball]) -> np.ndarray:
    """(Ndir, 2 * nballs) crossing parameters, clipped at 0; misses give 0."""
    cols = []
    for c, R in balls:
        w = center - c
        b = U @ w
        disc = b * b - (w @ w - R * R)
        s = np.sqrt(np.clip(disc, 0, None))
        hit = disc > 0
        cols += [np.where(hit, np.clip(-b - s, 0, None), 0.0), np.where(hit, np.clip(-b + s, 0, None), 0.0)]
    return np.stack(cols, axis=1) if cols else np.zeros((U.shape[0], 0))


def polar_nodes(center: np.ndarray, d: int, support: Sequence[Ball], kinks: Sequence[Ball] = (),
                cap: ConicWeight | None = None, n_radial: int = 24, n_angular: int = 24,
                sign: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Nodes ``center + sign * r * u`` and weights for a polar rule cut at the ball boundaries.

    Returns ``(points, directions, radii, weights)``; weights include ``r^(d-1)``.
    The integrand is assumed to vanish outside the union of ``support``;
    ``kinks`` only add radial breakpoints.  With ``cap`` the directions are
    restricted to the cap of the conic weight.
    """
    center = np.asarray(center, float)
    if cap is not None and cap.aperture is not None:
        U, wu = cap_rule(d, cap.u0, cap.aperture, n_angular)
    else:
        U, wu = sphere_rule(d, n_angular)
    Us = sign * U
    br = _chords(center, Us, support)
    rmax = br.max(axis=1) if br.shape[1] else np.zeros(U.shape[0])
    allb = np.concatenate([np.zeros((U.shape[0], 1)), br, _chords(center, Us, kinks)], axis=1)
    allb = np.sort(np.minimum(allb, rmax[:, None]), axis=1)
    t, w = gauss_legendre(n_radial)
    lo, hi = allb[:, :-1], allb[:, 1:]  # (Ndir, npieces)
    keep = np.broadcast_to((hi - lo)[..., None] > 0, lo.shape + (n_radial,))
    r = lo[..., None] + (hi - lo)[..., None] * t
    wr = (hi - lo)[..., None] * w * r ** (d - 1) * wu[:, None, None]
    r, wr = r[keep], wr[keep]
    dirs = np.broadcast_to(U[:, None, None, :], keep.shape + (d,))[keep]
    return center + sign * r[:, None] * dirs, dirs, r, wr


def polar_integrate(fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray], center: np.ndarray, d: int,
                    support: Sequence[Ball], kinks: Sequence[Ball] = (), cap: ConicWeight | None = None,
                    n_radial: int = 24, n_angular: int = 24, chunk: int = 40_000, sign: float = 1.0):
    """``int fn`` over the nodes of ``polar_nodes``; ``fn(points, u, r)`` returns shape (M, ...)."""
    pts, dirs, r, wr = polar_nodes(center, d, support, kinks, cap, n_radial, n_angular, sign)
    total = 0.0
    for s in range(0, r.shape[0], max(1, chunk)):
        sl = slice(s, s + chunk)
        total = total + np.tensordot(wr[sl], fn(pts[sl], dirs[sl], r[sl]), axes=(0, 0))
    return total


# -- solution operator -------------------------------------------------------

def apply_operator_S(kernel: AveragedKernel, f, x, quad: QuadratureSpec = QuadratureSpec()) -> np.ndarray:
    """``u(x) = int K(x, y) f(y) dy`` (s0 components); ``x`` may be one point or an (N, d) array."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    out = np.zeros((X.shape[0], kernel.s0))
    if isinstance(f, BumpField) and f.is_zero():
        return out[0] if single else out
    fv, balls = _as_field(f)
    cap = kernel.weight if kernel.weight.kind == "conic" else None
    # y = x - r u, with u the direction of x - y
    batch: list = []
    size = 0

    def flush():
        nonlocal batch, size
        if not batch:
            return
        owner = np.concatenate([np.full(len(w), n) for n, _, w in batch])
        Y = np.concatenate([p for _, p, _ in batch])
        W = np.concatenate([w for _, _, w in batch])
        K, _ = kernel.evaluate(X[owner], Y)
        vals = np.einsum("mkj,jm->mk", K, fv(Y)) * W[:, None]
        np.add.at(out, owner, vals)
        batch, size = [], 0

    for n, xn in enumerate(X):
        pts, _, _, w = polar_nodes(xn, kernel.d, balls, (), cap, quad.n_radial, quad.n_angular, sign=-1.0)
        batch.append((n, pts, w))
        size += len(w)
        if size >= quad.chunk:
            flush()
    flush()
    return out[0] if single else out


def apply_operator_S_converged(kernel: AveragedKernel, f, x, quad: QuadratureSpec = QuadratureSpec(),
                               floor: float = 1e-13) -> tuple[np.ndarray, list[float]]:
    """Refine until successive levels agree to ``quad.tol``; returns value and level differences."""
    prev, diffs = None, []
    for k in range(quad.levels + 1):
        val = apply_operator_S(kernel, f, x, quad.at_level(k))
        if prev is not None:
            diffs.append(float(np.max(np.abs(val - prev))))
            if diffs[-1] <= max(quad.tol * max(1.0, float(np.max(np.abs(val)))), floor):
                return val, diffs
        prev = val
    raise QuadratureError(f"quadrature depth exhausted; last difference {diffs[-1]:.2e}")


# -- Green's identity --------------------------------------------------------

def pair_kernel(kernel: AveragedKernel, psi: TestFunction, y, quad: QuadratureSpec) -> np.ndarray:
    """``<K(., y), psi>`` (r0 components) by polar quadrature around ``y``."""
    y = np.asarray(y, float)
    cap = kernel.weight if kernel.weight.kind == "conic" else None
    kinks = [kernel.weight.support()] if kernel.weight.kind == "bogovskii" else []

    def integrand(X, U, r):
        K, _ = kernel.evaluate(X, np.broadcast_to(y, X.shape))
        return np.einsum("nkj,kn->nj", K, np.real(psi(X)))

    return polar_integrate(integrand, y, kernel.d, test_function_balls(psi), kinks, cap,
                           quad.n_radial, quad.n_angular, quad.chunk)


def greens_identity_residual(kernel: AveragedKernel, sys, phi: TestFunction, psi: TestFunction, y,
                             quad: QuadratureSpec = QuadratureSpec()) -> float:
    """``|<K(., y), P*phi> + <b(., y), phi> - phi(y)|``; conic kernels carry no endpoint term.

    ``psi`` must be ``P*phi`` (exact); ``sys`` supplies the endpoint transport
    for Bogovskii weights.
    """
    val = pair_kernel(kernel, psi, y, quad)
    if kernel.weight.kind == "bogovskii":
        val = val + b_eta_pairing(sys, kernel.weight, phi, y, quad.n_ball)
    return float(np.max(np.abs(val - np.real(phi(np.asarray(y, float)[None]))[:, 0])))


def greens_convergence(kernel: AveragedKernel, sys, phi: TestFunction, psi: TestFunction, y,
                       quad: QuadratureSpec = QuadratureSpec(n_radial=4, n_angular=4, levels=4)) -> list[float]:
    """Residuals for successive refinement levels (orders doubled each time)."""
    return [greens_identity_residual(kernel, sys, phi, psi, y, quad.at_level(k)) for k in range(quad.levels + 1)]


def convergence_ok(residuals: Sequence[float], floor: float, factor: float = 4.0) -> bool:
    """Each refinement reduces the residual by ``factor`` unless it is already at the floor."""
    return all(b <= a / factor or b <= floor for a, b in zip(residuals, residuals[1:]))


# -- support -----------------------------------------------------------------

def verify_support(sampler: Callable[[np.ndarray], np.ndarray], region: Callable[[np.ndarray], np.ndarray],
                   points: np.ndarray, tol: float, identity: str = "support") -> VerificationReport:
    """Max of ``|sampler|`` over the points that lie outside ``region``."""
    pts = np.asarray(points, float)
    outside = ~np.asarray(region(pts), dtype=bool)
    vals = np.array([np.max(np.abs(sampler(p))) for p in pts[outside]]) if np.any(outside) else np.zeros(0)
    mx = float(vals.max()) if vals.size else 0.0
    l2 = float(np.sqrt(np.mean(vals ** 2))) if vals.size else 0.0
    return VerificationReport(identity, mx, l2, tol, mx <= tol, "kernel support containment",
                              {"n_outside": int(outside.sum()), "n_samples": int(len(pts))})


def star_hull_predicate(balls: Sequence[Ball], weight: BogovskiiWeight) -> Callable[[np.ndarray], np.ndarray]:
    """Points on a segment from some ``y`` in a data ball to some ``y1`` in the weight ball."""
    c1, R1 = weight.support()

    def pred(X):
        X = np.atleast_2d(X)
        out = np.zeros(X.shape[0], dtype=bool)
        for c, R in balls:
            # the convex hull of two balls contains every such segment
            out |= _in_hull_of_balls(X, c, R, c1, R1)
        return out

    return pred


def _in_hull_of_balls(X, c0, R0, c1, R1):
    """Membership in the convex hull of two balls (a capped truncated cone)."""
    best = np.full(X.shape[0], np.inf)
    for lam in np.linspace(0, 1, 401):
        c = (1 - lam) * c0 + lam * c1
        R = (1 - lam) * R0 + lam * R1
        best = np.minimum(best, np.linalg.norm(X - c, axis=1) - R)
    return best <= 1e-9


def cone_predicate(balls: Sequence[Ball], weight: ConicWeight, margin: float = 0.0):
    """Points ``y + t u`` with ``y`` in a data ball, ``t >= 0`` and ``u`` in the cap (enlarged by ``margin``)."""

    def pred(X):
        X = np.atleast_2d(X)
        out = np.zeros(X.shape[0], dtype=bool)
        for c, R in balls:
            v = X - c
            dist = np.linalg.norm(v, axis=1)
            inside = dist <= R
            ang = np.arccos(np.clip((v @ weight.u0) / np.maximum(dist, 1e-300), -1, 1))
            # angular half-width of the ball seen from X
            spread = np.arcsin(np.clip(R / np.maximum(dist, 1e-300), 0, 1))
            ap = math.pi if weight.aperture is None else weight.aperture
            out |= inside | (ang <= ap + spread + margin)
        return out

    return pred


# -- cokernel projection -----------------------------------------------------

def _pieces(f) -> list[tuple[Callable[[np.ndarray], np.ndarray], Ball]]:
    """Summands of ``f`` paired with balls containing their supports."""
    if isinstance(f, BumpField):
        return [(b, b.ball()) for b in f.bumps]
    c, R = f.support_ball(1e-18)
    return [((lambda Y: np.real(f(Y))), (c, R))]


def moments(basis: CokernelBasis, f, n: int = 24) -> np.ndarray:
    """``<Z^A, f>`` for every basis element."""
    out = np.zeros(basis.dim)
    for piece, (c, R) in _pieces(f):
        pts, w = ball_rule(basis.d, R, n, center=c)
        F = piece(pts)
        for A, Z in enumerate(basis.elements):
            out[A] += float(np.sum(np.real(Z(pts)) * F * w))
    return out


def _poly_of_testfunction(Z: TestFunction) -> tuple:
    polys = []
    for comp in Z.comps:
        p: dict = {}
        for (mu, sigma), q in comp.items():
            if any(mu) or sigma != math.inf:
                raise ValueError("cokernel elements must be plain polynomials")
            for a, v in q.items():
                p[a] = p.get(a, 0) + float(v)
        polys.append(p)
    return tuple(polys)


def project_out_cokernel(f: BumpField, basis: CokernelBasis, center, radius: float, p: int = 8,
                         n: int = 24) -> BumpField:
    """``f - sum_B c_B Z^B bump`` with the correction supported in the given ball and all moments zero."""
    corr = [BumpField(basis.d, f.ncomp, (Bump(tuple(center), float(radius), _poly_of_testfunction(Z), p),))
            for Z in basis.elements]
    G = np.array([moments(basis, c, n) for c in corr]).T  # G[A, B] = <Z^A, corr_B>
    if np.linalg.cond(G) > 1e12:
        raise np.linalg.LinAlgError("singular cokernel Gram matrix on the correction ball")
    coef = np.linalg.solve(G, moments(basis, f, n))
    out = f
    for cB, fb in zip(coef, corr):
        if cB:
            out = out + fb.scale(-float(cB))
    return out


# -- operator residual -------------------------------------------------------

def _fd_derivative(u: Callable[[np.ndarray], np.ndarray], X: np.ndarray, alpha: MultiIndex, h: float,
                   richardson: int = 1) -> np.ndarray:
    """Central differences of order up to 2 with ``richardson`` extrapolation steps (0, 1 or 2)."""
    d = X.shape[1]
    idx = [i for i in range(d) for _ in range(alpha[i])]
    E = np.eye(d)

    def D(hh):
        if len(idx) == 0:
            return u(X)
        if len(idx) == 1:
            e = E[idx[0]] * hh
            return (u(X + e) - u(X - e)) / (2 * hh)
        i, j = idx
        if i == j:
            e = E[i] * hh
            return (u(X + e) - 2 * u(X) + u(X - e)) / hh ** 2
        a, b = E[i] * hh, E[j] * hh
        return (u(X + a + b) - u(X + a - b) - u(X - a + b) + u(X - a - b)) / (4 * hh * hh)

    if not idx:
        return u(X)
    d1 = D(h)
    if richardson == 0:
        return d1
    d2 = D(h / 2)
    r1 = (4 * d2 - d1) / 3
    if richardson == 1:
        return r1
    r2 = (4 * D(h / 4) - d2) / 3
    return (16 * r2 - r1) / 15


def apply_P_fd(P: DiffOperator, u: Callable[[np.ndarray], np.ndarray], X: np.ndarray, h: float = 0.02,
               richardson: int = 1) -> np.ndarray:
    """``(P u)(X)`` with ``u(X) -> (N, s0)``; returns (N, r0)."""
    X = np.atleast_2d(X)
    out = np.zeros((X.shape[0], P.r0))
    cache: dict = {}
    for (a, J, K), v in P.coeff.items():
        if a not in cache:
            cache[a] = _fd_derivative(u, X, a, h, richardson)
        out[:, J] += float(complex(v).real) * cache[a][:, K]
    return out


class SolutionField:
    """Memoized ``u = S f`` on arbitrary point sets (rows keyed by rounded coordinates)."""

    def __init__(self, kernel: AveragedKernel, f, quad: QuadratureSpec = QuadratureSpec()):
        self.kernel, self.f, self.quad = kernel, f, quad
        self._memo: dict = {}

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        keys = [tuple(np.round(x, 13)) for x in X]
        todo = {k: x for k, x in zip(keys, X) if k not in self._memo}
        if todo:
            vals = apply_operator_S(self.kernel, self.f, np.array(list(todo.values())), self.quad)
            self._memo.update(zip(todo.keys(), vals))
        return np.array([self._memo[k] for k in keys])


def endpoint_term(b: EndpointDensity, f, X: np.ndarray, n: int = 24) -> np.ndarray:
    """``int b(x, y)^T f(y) dy`` at each ``x`` (N, r0); ``b`` rows index the recovered component."""
    X = np.atleast_2d(X)
    out = np.zeros((X.shape[0], b.r0))
    for piece, (c, R) in _pieces(f):
        pts, w = ball_rule(b.d, R, n, center=c)
        F = piece(pts) * w
        for k, x in enumerate(X):
            B = b(np.broadcast_to(x, pts.shape), pts)  # (M, r0, r0)
            out[k] += np.einsum("mjl,jm->l", B, F)
    return out


def residual_matches_beta(P: DiffOperator, kernel: AveragedKernel, b: EndpointDensity, f, grid: np.ndarray,
                          tol: float = 1e-4, h: float = 0.02, quad: QuadratureSpec = QuadratureSpec(24, 36),
                          richardson: int = 2) -> VerificationReport:
    """Compare ``P(S f) - f`` (finite differences) against ``-int b(x, y) f(y) dy`` on ``grid``."""
    fv, _ = _as_field(f)
    u = SolutionField(kernel, f, quad)
    lhs = apply_P_fd(P, u, grid, h, richardson) - fv(grid).T
    rhs = -endpoint_term(b, f, grid)
    diff = np.abs(lhs - rhs)
    mx = float(diff.max()) if diff.size else 0.0
    return VerificationReport("P(Sf) - f = -int b f", mx, float(np.sqrt(np.mean(diff ** 2))), tol, mx <= tol,
                              "finite-difference P applied to the quadrature solution; endpoint density by ball quadrature",
                              {"n_points": int(len(grid)), "fd_step": h, "richardson": richardson,
                               "lhs_max": float(np.abs(lhs).max()), "rhs_max": float(np.abs(rhs).max())})
