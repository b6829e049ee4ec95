"""Constant-coefficient matrix differential operators and exact test functions.

Convention: ``(P u)^J = sum_{alpha, K} c[P]^{(alpha, J)}_K d^alpha u^K`` with ``J``
running over the ``r0`` outputs and ``K`` over the ``s0`` inputs.  Symmetric
2-tensors are stored as ordered pairs ``j <= k``; the stored input component
is ``u^{jk} = w_jk h^{jk}`` with ``w = 2`` off the diagonal, so the plain
Euclidean pairing over stored components equals the full tensor contraction
and the adjoint outputs ``(P* phi)_{jk}`` are the full-index components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .multipoly import (
    GaussianRational, HomPolyMatrix, MultiIndex, ONE, ZERO, i_power, madd, monomial_basis, unit,
)

Coeff = tuple[MultiIndex, int, int]


class ThresholdError(ValueError):
    """Spatial dimension below the operator's threshold."""


# -- symmetric pair bookkeeping ---------------------------------------------

def sym_pairs(d: int) -> list[tuple[int, int]]:
    return [(j, k) for j in range(d) for k in range(j, d)]


def pair_index(d: int, j: int, k: int) -> int:
    if j > k:
        j, k = k, j
    return sym_pairs(d).index((j, k))


def pair_weight(j: int, k: int) -> int:
    return 1 if j == k else 2


def _exact(v) -> Fraction | complex:
    """Exact scalar for polynomial arithmetic (Fraction when real)."""
    v = GaussianRational.coerce(v)
    return v.re if not v.im else complex(v)


# -- operators ---------------------------------------------------------------

@dataclass(frozen=True)
class DiffOperator:
    d: int
    r0: int
    s0: int
    coeff: Mapping[Coeff, GaussianRational]
    name: str = ""
    in_labels: tuple[str, ...] = ()
    out_labels: tuple[str, ...] = ()

    def __post_init__(self):
        clean = {}
        for (a, J, K), v in self.coeff.items():
            v = GaussianRational.coerce(v)
            if len(a) != self.d or not (0 <= J < self.r0 and 0 <= K < self.s0):
                raise IndexError(f"coefficient {(a, J, K)} out of range")
            if v:
                clean[(tuple(a), J, K)] = v
        object.__setattr__(self, "coeff", clean)
        if not self.in_labels:
            object.__setattr__(self, "in_labels", tuple(f"u{K}" for K in range(self.s0)))
        if not self.out_labels:
            object.__setattr__(self, "out_labels", tuple(f"f{J}" for J in range(self.r0)))

    @property
    def m(self) -> tuple[int, ...]:
        """Per-input orders ``m_K``."""
        out = [0] * self.s0
        for (a, _, K) in self.coeff:
            out[K] = max(out[K], sum(a))
        return tuple(out)

    def principal_part(self) -> "DiffOperator":
        m = self.m
        return self._with({k: v for k, v in self.coeff.items() if sum(k[0]) == m[k[2]]})

    def lower_order_part(self) -> "DiffOperator":
        m = self.m
        return self._with({k: v for k, v in self.coeff.items() if sum(k[0]) < m[k[2]]})

    def with_lower_order(self, table: Mapping[Coeff, object]) -> "DiffOperator":
        """Add constant lower-order terms; each must have ``|alpha| < m_K``."""
        m = self.m
        out = dict(self.coeff)
        for (a, J, K), v in table.items():
            if sum(a) >= m[K]:
                raise ValueError(f"term {(a, J, K)} is not lower order (m_K = {m[K]})")
            out[(tuple(a), J, K)] = out.get((tuple(a), J, K), ZERO) + GaussianRational.coerce(v)
        return self._with(out)

    def _with(self, coeff) -> "DiffOperator":
        return DiffOperator(self.d, self.r0, self.s0, coeff, self.name, self.in_labels, self.out_labels)

    def __eq__(self, o):
        if not isinstance(o, DiffOperator):
            return NotImplemented
        return (self.d, self.r0, self.s0, self.coeff) == (o.d, o.r0, o.s0, o.coeff)

    def __hash__(self):
        return hash((self.d, self.r0, self.s0, frozenset(self.coeff.items())))


def adjoint(P: DiffOperator) -> DiffOperator:
    """Formal adjoint for the flat measure: ``c[P*]^{(a,K)}_J = (-1)^|a| conj c[P]^{(a,J)}_K``."""
    coeff = {(a, K, J): v.conjugate() * (-1) ** sum(a) for (a, J, K), v in P.coeff.items()}
    return DiffOperator(P.d, P.s0, P.r0, coeff, P.name + "*" if P.name else "",
                        P.out_labels, P.in_labels)


def principal_symbol(P: DiffOperator) -> HomPolyMatrix:
    """``p^J_K(xi) = sum_{|a| = m_K} c[P]^{(a,J)}_K i^|a| xi^a`` (column-graded, r0 x s0)."""
    m = P.m
    ent = {(J, K, a): v * i_power(sum(a)) for (a, J, K), v in P.coeff.items() if sum(a) == m[K]}
    return HomPolyMatrix(P.r0, P.s0, P.d, (0,) * P.r0, m, ent)


def adjoint_symbol(P: DiffOperator) -> HomPolyMatrix:
    """Principal symbol of ``P*``: row ``K`` has degree ``m_K`` (s0 x r0)."""
    m = P.m
    ent = {(K, J, a): v.conjugate() * (-1) ** sum(a) * i_power(sum(a))
           for (a, J, K), v in P.coeff.items() if sum(a) == m[K]}
    return HomPolyMatrix(P.s0, P.r0, P.d, m, (0,) * P.r0, ent)


# -- built-in zoo ------------------------------------------------------------

ZOO_THRESHOLDS = {
    "divergence": 1,
    "double_divergence": 1,
    "tracefree_double_divergence": 2,
    "symmetric_divergence": 1,
    "tracefree_symmetric_divergence": 3,
    "einstein_constraint": 1,
    "einstein_constraint_cmc": 3,
}

ALIASES = {
    "killing": "symmetric_divergence",
    "conformal_killing": "tracefree_symmetric_divergence",
    "einstein": "einstein_constraint",
    "einstein_cmc": "einstein_constraint_cmc",
    "ddiv": "double_divergence",
    "div": "divergence",
}


def canonical_name(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in ZOO_THRESHOLDS:
        raise KeyError(f"unknown operator {name!r}; known: {sorted(ZOO_THRESHOLDS)}")
    return name


def _sym_labels(d: int, stem: str) -> tuple[str, ...]:
    return tuple(f"{stem}{j + 1}{k + 1}" for j, k in sym_pairs(d))


def _ddiv_terms(d: int, tracefree: bool, J: int = 0, K0: int = 0) -> dict:
    out: dict = {}
    pairs = sym_pairs(d)
    for n, (j, k) in enumerate(pairs):
        a = madd(unit(d, j), unit(d, k))
        out[(a, J, K0 + n)] = out.get((a, J, K0 + n), ZERO) + ONE
    if tracefree:
        for a_ in range(d):
            K = K0 + pairs.index((a_, a_))
            for l in range(d):
                key = (madd(unit(d, l), unit(d, l)), J, K)
                out[key] = out.get(key, ZERO) - GaussianRational(Fraction(1, d))
    return out


def _sdiv_terms(d: int, tracefree: bool, J0: int = 0, K0: int = 0) -> dict:
    out: dict = {}
    pairs = sym_pairs(d)
    for k in range(d):
        for j in range(d):
            n = pairs.index((min(j, k), max(j, k)))
            key = (unit(d, j), J0 + k, K0 + n)
            out[key] = out.get(key, ZERO) + GaussianRational(Fraction(1, pair_weight(j, k)))
        if tracefree:
            for a_ in range(d):
                key = (unit(d, k), J0 + k, K0 + pairs.index((a_, a_)))
                out[key] = out.get(key, ZERO) - GaussianRational(Fraction(1, d))
    return out


def builtin(name: str, d: int) -> DiffOperator:
    """Flat principal part of one of the seven zoo operators."""
    name = canonical_name(name)
    need = ZOO_THRESHOLDS[name]
    if d < need:
        raise ThresholdError(f"{name} requires d ≥ {need} (got d = {d})")
    n = d * (d + 1) // 2
    vec = tuple(f"w{j + 1}" for j in range(d))
    if name == "divergence":
        coeff = {(unit(d, j), 0, j): ONE for j in range(d)}
        return DiffOperator(d, 1, d, coeff, name, tuple(f"u{j + 1}" for j in range(d)), ("f",))
    if name in ("double_divergence", "tracefree_double_divergence"):
        coeff = _ddiv_terms(d, name.startswith("tracefree"))
        return DiffOperator(d, 1, n, coeff, name, _sym_labels(d, "h"), ("f",))
    if name in ("symmetric_divergence", "tracefree_symmetric_divergence"):
        coeff = _sdiv_terms(d, name.startswith("tracefree"))
        return DiffOperator(d, d, n, coeff, name, _sym_labels(d, "h"), vec)
    tf = name == "einstein_constraint_cmc"
    coeff = _ddiv_terms(d, False)
    coeff.update(_sdiv_terms(d, tf, J0=1, K0=n))
    return DiffOperator(d, 1 + d, 2 * n, coeff, name,
                        _sym_labels(d, "h") + _sym_labels(d, "p"), ("f",) + vec)


# -- operator config files ---------------------------------------------------

def parse_operator(text: str) -> DiffOperator:
    """Parse ``dim`` / ``rows`` / ``cols`` / ``term J K alpha... re im`` lines (1-based J, K)."""
    d = r0 = s0 = None
    terms = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "dim":
                d = int(tok[1])
            elif tok[0] == "rows":
                r0 = int(tok[1])
            elif tok[0] == "cols":
                s0 = int(tok[1])
            elif tok[0] == "term":
                if d is None:
                    raise ValueError("'dim' must precede 'term'")
                J, K = int(tok[1]) - 1, int(tok[2]) - 1
                a = tuple(int(t) for t in tok[3:3 + d])
                if len(a) != d or len(tok) != 5 + d:
                    raise ValueError(f"expected {d} exponents followed by re im")
                terms.append(((a, J, K), GaussianRational(Fraction(tok[3 + d]), Fraction(tok[4 + d]))))
            else:
                raise ValueError(f"unknown key {tok[0]!r}")
        except (ValueError, IndexError) as exc:
            raise OperatorParseError(lineno, len(raw) - len(raw.lstrip()) + 1, str(exc)) from exc
    if None in (d, r0, s0):
        raise OperatorParseError(0, 0, "missing dim/rows/cols")
    coeff: dict = {}
    for key, v in terms:
        coeff[key] = coeff.get(key, ZERO) + v
    try:
        return DiffOperator(d, r0, s0, coeff, "file")
    except IndexError as exc:
        raise OperatorParseError(0, 0, str(exc)) from exc


def dump_operator(P: DiffOperator) -> str:
    lines = [f"dim {P.d}", f"rows {P.r0}", f"cols {P.s0}"]
    for (a, J, K), v in sorted(P.coeff.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0])):
        lines.append(f"term {J + 1} {K + 1} {' '.join(map(str, a))} {v.re} {v.im}")
    return "\n".join(lines) + "\n"


class OperatorParseError(ValueError):
    def __init__(self, line: int, col: int, msg: str):
        super().__init__(f"line {line}, column {col}: {msg}")
        self.line, self.col = line, col


# -- polynomial x Gaussian test functions -------------------------------------

Poly = dict  # MultiIndex -> scalar (Fraction, float or complex)
TermKey = tuple[tuple[float, ...], float]  # (center, width); width inf means pure polynomial


def _padd(p: Poly, q: Poly, s=1) -> Poly:
    out = dict(p)
    for a, v in q.items():
        out[a] = out.get(a, 0) + s * v
    return {a: v for a, v in out.items() if v != 0}


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Vector field whose components are sums of ``p(x - mu) exp(-|x - mu|^2 / (2 sigma^2))``.

    ``sigma = inf`` gives plain polynomials.  The class is closed under
    differentiation and linear combination, and all operations are exact on
    the stored coefficients.
    """

    __test__ = False  # not a pytest class

    d: int
    comps: tuple[Mapping[TermKey, Poly], ...]
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    @classmethod
    def gaussian(cls, d: int, ncomp: int, terms: Iterable[tuple[int, Sequence[float], float, Poly]]):
        comps: list[dict] = [dict() for _ in range(ncomp)]
        for c, mu, sigma, poly in terms:
            key = (tuple(float(x) for x in mu), float(sigma))
            comps[c][key] = _padd(comps[c].get(key, {}), {tuple(a): v for a, v in poly.items()})
        return cls(d, tuple(comps))

    @classmethod
    def polynomial(cls, d: int, polys: Sequence[Poly]):
        key = ((0.0,) * d, math.inf)
        return cls(d, tuple({key: {tuple(a): v for a, v in p.items() if v != 0}} for p in polys))

    @classmethod
    def zeros(cls, d: int, ncomp: int):
        return cls(d, tuple({} for _ in range(ncomp)))

    @property
    def ncomp(self) -> int:
        return len(self.comps)

    def __add__(self, o: "TestFunction") -> "TestFunction":
        return self.axpy(1, o)

    def __sub__(self, o: "TestFunction") -> "TestFunction":
        return self.axpy(-1, o)

    def axpy(self, s, o: "TestFunction") -> "TestFunction":
        if o.ncomp != self.ncomp:
            raise ValueError("component mismatch")
        out = []
        for a, b in zip(self.comps, o.comps):
            c = dict(a)
            for k, p in b.items():
                c[k] = _padd(c.get(k, {}), p, s)
            out.append({k: p for k, p in c.items() if p})
        return TestFunction(self.d, tuple(out))

    def scale(self, s) -> "TestFunction":
        return TestFunction(self.d, tuple({k: {a: s * v for a, v in p.items()} for k, p in c.items()}
                                          for c in self.comps))

    def component(self, c: int) -> "TestFunction":
        return TestFunction(self.d, (self.comps[c],))

    def is_zero(self) -> bool:
        return all(not any(p for p in c.values()) for c in self.comps)

    def derivative(self, alpha: MultiIndex) -> "TestFunction":
        alpha = tuple(alpha)
        if not any(alpha):
            return self
        if alpha in self._cache:
            return self._cache[alpha]
        i = next(j for j, e in enumerate(alpha) if e)
        rest = tuple(e - (j == i) for j, e in enumerate(alpha))
        out = self._d1(i).derivative(rest)
        self._cache[alpha] = out
        return out

    def _d1(self, i: int) -> "TestFunction":
        out = []
        for c in self.comps:
            nc = {}
            for (mu, sigma), p in c.items():
                q: Poly = {}
                for a, v in p.items():
                    if a[i]:
                        b = a[:i] + (a[i] - 1,) + a[i + 1:]
                        q[b] = q.get(b, 0) + a[i] * v
                    if sigma != math.inf:
                        b = a[:i] + (a[i] + 1,) + a[i + 1:]
                        q[b] = q.get(b, 0) - v / sigma ** 2
                q = {a: v for a, v in q.items() if v != 0}
                if q:
                    nc[(mu, sigma)] = q
            out.append(nc)
        return TestFunction(self.d, tuple(out))

    def __call__(self, x) -> np.ndarray:
        """Values at points ``x`` of shape ``(..., d)``; returns ``(ncomp, ...)``."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        pts = x.reshape(-1, self.d)
        complex_ = any(isinstance(v, complex) for c in self.comps for p in c.values() for v in p.values())
        out = np.zeros((self.ncomp, pts.shape[0]), dtype=complex if complex_ else float)
        for n, c in enumerate(self.comps):
            for (mu, sigma), p in c.items():
                X = pts - np.asarray(mu)
                val = np.zeros(pts.shape[0], dtype=out.dtype)
                for a, v in p.items():
                    term = np.full(pts.shape[0], complex(v) if isinstance(v, complex) else float(v),
                                   dtype=out.dtype)
                    for j, e in enumerate(a):
                        if e:
                            term = term * X[:, j] ** e
                    val += term
                if sigma != math.inf:
                    val = val * np.exp(-np.sum(X * X, axis=1) / (2 * sigma ** 2))
                out[n] += val
        return out.reshape((self.ncomp,) + shape)

    def eval_exact(self, x: Sequence[Fraction]) -> list:
        """Exact values of a pure-polynomial field at a rational point."""
        out = []
        for c in self.comps:
            s = 0
            for (mu, sigma), p in c.items():
                if sigma != math.inf:
                    raise ValueError("exact evaluation needs a polynomial field")
                for a, v in p.items():
                    t = v
                    for xj, mj, e in zip(x, mu, a):
                        t = t * (Fraction(xj) - Fraction(mj)) ** e
                    s = s + t
            out.append(s)
        return out

    def max_degree(self) -> int:
        return max((sum(a) for c in self.comps for p in c.values() for a in p), default=0)

    def support_ball(self, eps: float = 1e-300) -> tuple[np.ndarray, float]:
        """A ball outside which every component is below ``eps`` in magnitude."""
        keys = [(np.asarray(mu), sigma, p) for c in self.comps for (mu, sigma), p in c.items()]
        if any(s == math.inf for _, s, _ in keys):
            return np.zeros(self.d), math.inf
        if not keys:
            return np.zeros(self.d), 0.0
        center = np.mean([mu for mu, _, _ in keys], axis=0)
        radius = 0.0
        for mu, sigma, p in keys:
            coef = [(sum(a), abs(complex(v))) for a, v in p.items()]
            r = sigma
            while math.log(max(sum(cv * r ** k for k, cv in coef), 1e-300)) - r * r / (2 * sigma ** 2) > math.log(eps) - math.log(len(keys) + 1):
                r *= 1.1
            radius = max(radius, float(np.linalg.norm(mu - center)) + r)
        return center, radius

    def sup_norm(self, n: int = 41) -> float:
        """Sup of the component magnitudes on a sample grid over the effective support."""
        center, radius = self.support_ball(1e-12)
        if radius == 0:
            return 0.0
        g = np.linspace(-1, 1, n) * radius
        mesh = np.stack(np.meshgrid(*([g] * self.d), indexing="ij"), axis=-1) + center
        return float(np.max(np.abs(self(mesh))))


def apply(P: DiffOperator, f: TestFunction) -> TestFunction:
    """Exact application of ``P`` to a test function."""
    if f.ncomp != P.s0 or f.d != P.d:
        raise ValueError(f"component mismatch: operator takes {P.s0} components in d={P.d}, "
                         f"got {f.ncomp} in d={f.d}")
    out = TestFunction.zeros(P.d, P.r0)
    for (a, J, K), v in sorted(P.coeff.items()):
        g = f.component(K).derivative(a).scale(_exact(v))
        comps = [dict() for _ in range(P.r0)]
        comps[J] = g.comps[0]
        out = out + TestFunction(P.d, tuple(comps))
    return out


def random_test_function(rng: np.random.Generator, d: int, ncomp: int, degree: int = 2,
                         sigma: float = 0.7, spread: float = 0.5, nterms: int = 1) -> TestFunction:
    """Random Gaussian-polynomial field with centers near the origin."""
    terms = []
    for c in range(ncomp):
        for _ in range(nterms):
            mu = rng.uniform(-spread, spread, d)
            poly = {}
            for k in range(degree + 1):
                for a in monomial_basis(d, k):
                    poly[a] = float(rng.normal())
            terms.append((c, mu, sigma, poly))
    return TestFunction.gaussian(d, ncomp, terms)
