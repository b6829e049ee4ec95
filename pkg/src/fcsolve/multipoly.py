"""Exact multi-index and homogeneous polynomial matrix arithmetic.

Coefficients live in Q(i) (Gaussian rationals).  A polynomial matrix is stored
sparsely as ``{(row, col, alpha): coeff}``; entry ``(r, c)`` is homogeneous of
degree ``row_deg[r] + col_deg[c]``.  Principal symbols use ``col_deg = 0``
(row-graded); Nullstellensatz multipliers are column-graded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations_with_replacement
from math import comb
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

MultiIndex = tuple[int, ...]
Number = Union[int, Fraction, "GaussianRational"]


# -- multi-indices -----------------------------------------------------------

def monomial_basis(d: int, k: int) -> list[MultiIndex]:
    """All multi-indices of length ``d`` and order ``k``, lexicographically descending."""
    if d < 1 or k < 0:
        raise ValueError("need d >= 1 and k >= 0")
    out = []
    for combo in combinations_with_replacement(range(d), k):
        a = [0] * d
        for j in combo:
            a[j] += 1
        out.append(tuple(a))
    out.sort(reverse=True)
    assert len(out) == comb(d + k - 1, k)
    return out


def multi_indices_upto(d: int, k: int) -> list[MultiIndex]:
    """Multi-indices with ``|alpha| <= k`` ordered by degree, then lexicographically."""
    return [a for n in range(k + 1) for a in monomial_basis(d, n)]


def unit(d: int, i: int) -> MultiIndex:
    return tuple(1 if j == i else 0 for j in range(d))


def madd(a: MultiIndex, b: MultiIndex) -> MultiIndex:
    return tuple(x + y for x, y in zip(a, b))


def msub(a: MultiIndex, b: MultiIndex) -> MultiIndex | None:
    """``a - b`` or None when some exponent would go negative."""
    c = tuple(x - y for x, y in zip(a, b))
    return None if min(c, default=0) < 0 else c


def order(a: MultiIndex) -> int:
    return sum(a)


# -- Gaussian rationals ------------------------------------------------------

class GaussianRational:
    """Exact element ``re + i*im`` of Q(i)."""

    __slots__ = ("re", "im")

    def __init__(self, re: int | Fraction | str = 0, im: int | Fraction | str = 0):
        object.__setattr__(self, "re", Fraction(re))
        object.__setattr__(self, "im", Fraction(im))

    def __setattr__(self, name, value):
        raise AttributeError("GaussianRational is immutable")

    @classmethod
    def coerce(cls, x: Number | complex) -> "GaussianRational":
        if isinstance(x, GaussianRational):
            return x
        if isinstance(x, complex):
            return cls(Fraction(x.real), Fraction(x.imag))
        return cls(Fraction(x))

    def __add__(self, o):
        o = GaussianRational.coerce(o)
        return GaussianRational(self.re + o.re, self.im + o.im)

    __radd__ = __add__

    def __neg__(self):
        return GaussianRational(-self.re, -self.im)

    def __sub__(self, o):
        return self + (-GaussianRational.coerce(o))

    def __rsub__(self, o):
        return GaussianRational.coerce(o) - self

    def __mul__(self, o):
        o = GaussianRational.coerce(o)
        return GaussianRational(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = GaussianRational.coerce(o)
        n = o.re * o.re + o.im * o.im
        if n == 0:
            raise ZeroDivisionError("GaussianRational division by zero")
        return self * GaussianRational(o.re / n, -o.im / n)

    def __rtruediv__(self, o):
        return GaussianRational.coerce(o) / self

    def __pow__(self, n: int):
        out = GaussianRational(1)
        base = self if n >= 0 else GaussianRational(1) / self
        for _ in range(abs(n)):
            out = out * base
        return out

    def conjugate(self) -> "GaussianRational":
        return GaussianRational(self.re, -self.im)

    def __eq__(self, o):
        try:
            o = GaussianRational.coerce(o)
        except (TypeError, ValueError):
            return NotImplemented
        return self.re == o.re and self.im == o.im

    def __hash__(self):
        return hash((self.re, self.im))

    def __bool__(self):
        return bool(self.re) or bool(self.im)

    def __complex__(self):
        return complex(float(self.re), float(self.im))

    def __repr__(self):
        if not self.im:
            return f"GR({self.re})"
        return f"GR({self.re}, {self.im})"

    def to_text(self) -> str:
        return f"{self.re.numerator}/{self.re.denominator} {self.im.numerator}/{self.im.denominator}"

    @classmethod
    def from_text(cls, re: str, im: str) -> "GaussianRational":
        return cls(Fraction(re), Fraction(im))


I = GaussianRational(0, 1)
ZERO = GaussianRational(0)
ONE = GaussianRational(1)


def i_power(n: int) -> GaussianRational:
    return [ONE, I, -ONE, -I][n % 4]


# -- polynomial matrices -----------------------------------------------------

class GradingError(ValueError):
    pass


@dataclass(frozen=True)
class HomPolyMatrix:
    """Sparse matrix of homogeneous polynomials in ``d`` variables."""

    rows: int
    cols: int
    d: int
    row_deg: tuple[int, ...]
    col_deg: tuple[int, ...]
    entries: Mapping[tuple[int, int, MultiIndex], GaussianRational] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for (r, c, a), v in self.entries.items():
            v = GaussianRational.coerce(v)
            if not v:
                continue
            if not (0 <= r < self.rows and 0 <= c < self.cols) or len(a) != self.d:
                raise IndexError(f"entry {(r, c, a)} out of range")
            if sum(a) != self.row_deg[r] + self.col_deg[c]:
                raise GradingError(f"monomial {a} in entry ({r}, {c}) has wrong degree")
            clean[(r, c, tuple(a))] = v
        object.__setattr__(self, "entries", clean)
        object.__setattr__(self, "row_deg", tuple(self.row_deg))
        object.__setattr__(self, "col_deg", tuple(self.col_deg))

    @property
    def degree_of_row(self) -> tuple[int, ...]:
        """Per-row degree for row-graded matrices (``col_deg`` all zero)."""
        return tuple(r + self.col_deg[0] if self.cols else r for r in self.row_deg)

    def entry_degree(self, r: int, c: int) -> int:
        return self.row_deg[r] + self.col_deg[c]

    @classmethod
    def identity(cls, n: int, d: int) -> "HomPolyMatrix":
        z = (0,) * d
        return cls(n, n, d, (0,) * n, (0,) * n, {(k, k, z): ONE for k in range(n)})

    def entry(self, r: int, c: int) -> dict[MultiIndex, GaussianRational]:
        return {a: v for (rr, cc, a), v in self.entries.items() if rr == r and cc == c}

    def __eq__(self, o):
        if not isinstance(o, HomPolyMatrix):
            return NotImplemented
        return (self.rows, self.cols, self.d) == (o.rows, o.cols, o.d) and self.entries == o.entries

    def __hash__(self):
        return hash((self.rows, self.cols, self.d, frozenset(self.entries.items())))

    def __add__(self, o: "HomPolyMatrix") -> "HomPolyMatrix":
        if (self.rows, self.cols) != (o.rows, o.cols):
            raise ValueError("shape mismatch")
        for r in range(self.rows):
            for c in range(self.cols):
                if self.entry_degree(r, c) != o.entry_degree(r, c):
                    raise GradingError(f"grading mismatch at ({r}, {c})")
        out = dict(self.entries)
        for k, v in o.entries.items():
            out[k] = out.get(k, ZERO) + v
        return HomPolyMatrix(self.rows, self.cols, self.d, self.row_deg, self.col_deg, out)

    def scale(self, s: Number) -> "HomPolyMatrix":
        s = GaussianRational.coerce(s)
        return HomPolyMatrix(self.rows, self.cols, self.d, self.row_deg, self.col_deg,
                             {k: v * s for k, v in self.entries.items()})

    def conj_transpose(self) -> "HomPolyMatrix":
        return HomPolyMatrix(self.cols, self.rows, self.d, self.col_deg, self.row_deg,
                             {(c, r, a): v.conjugate() for (r, c, a), v in self.entries.items()})

    def eval(self, xi: Sequence[complex]) -> np.ndarray:
        return eval_matrix(self, xi)

    def to_text(self) -> str:
        return dumps(self)


def mat_mul(A: HomPolyMatrix, B: HomPolyMatrix) -> HomPolyMatrix:
    """Exact product; the inner gradings must make every product entry homogeneous."""
    if A.cols != B.rows:
        raise ValueError(f"shape mismatch: {A.rows}x{A.cols} times {B.rows}x{B.cols}")
    if A.d != B.d:
        raise ValueError("variable count mismatch")
    if A.cols:
        inner = {A.col_deg[k] + B.row_deg[k] for k in range(A.cols)}
        if len(inner) > 1:
            bad = next(k for k in range(A.cols) if A.col_deg[k] + B.row_deg[k] != A.col_deg[0] + B.row_deg[0])
            raise GradingError(f"grading mismatch: inner index {bad} (rows 0.., col {bad}) is not homogeneous")
        shift = inner.pop()
    else:
        shift = 0
    by_row: dict[int, list] = {}
    for (k, c, b), v in B.entries.items():
        by_row.setdefault(k, []).append((c, b, v))
    out: dict[tuple[int, int, MultiIndex], GaussianRational] = {}
    for (r, k, a), u in A.entries.items():
        for c, b, v in by_row.get(k, ()):
            key = (r, c, madd(a, b))
            out[key] = out.get(key, ZERO) + u * v
    row_deg = tuple(rd + shift for rd in A.row_deg)
    return HomPolyMatrix(A.rows, B.cols, A.d, row_deg, B.col_deg, out)


def eval_matrix(M: HomPolyMatrix, xi: Sequence[complex]) -> np.ndarray:
    xi = np.asarray(xi, dtype=complex)
    if xi.shape != (M.d,):
        raise ValueError(f"expected {M.d} coordinates")
    out = np.zeros((M.rows, M.cols), dtype=complex)
    for (r, c, a), v in M.entries.items():
        out[r, c] += complex(v) * np.prod(xi ** np.asarray(a))
    return out


def eval_exact(M: HomPolyMatrix, xi: Sequence[Number]) -> list[list[GaussianRational]]:
    """Exact evaluation at a Gaussian-rational point."""
    xi = [GaussianRational.coerce(x) for x in xi]
    out = [[ZERO] * M.cols for _ in range(M.rows)]
    for (r, c, a), v in M.entries.items():
        t = v
        for x, e in zip(xi, a):
            t = t * x ** e
        out[r][c] = out[r][c] + t
    return out


# -- text form ---------------------------------------------------------------

def dumps(M: HomPolyMatrix) -> str:
    lines = [f"matrix {M.rows} {M.cols} {M.d}",
             "rowdeg " + " ".join(map(str, M.row_deg)),
             "coldeg " + " ".join(map(str, M.col_deg))]
    for (r, c, a), v in sorted(M.entries.items(), key=lambda kv: (kv[0][0], kv[0][1], tuple(-e for e in kv[0][2]))):
        lines.append(" ".join([str(r), str(c), *map(str, a), v.to_text()]))
    return "\n".join(lines) + "\n"


def loads(text: str) -> HomPolyMatrix:
    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    return _parse_lines(lines)[0]


def _parse_lines(lines: list[list[str]]) -> tuple[HomPolyMatrix, int]:
    head = lines[0]
    if head[0] != "matrix":
        raise ValueError("expected 'matrix rows cols d'")
    rows, cols, d = map(int, head[1:4])
    row_deg = tuple(map(int, lines[1][1:]))
    col_deg = tuple(map(int, lines[2][1:]))
    entries = {}
    n = 3
    while n < len(lines) and lines[n][0] not in ("matrix", "alpha", "cert"):
        tok = lines[n]
        r, c = int(tok[0]), int(tok[1])
        a = tuple(int(t) for t in tok[2:2 + d])
        entries[(r, c, a)] = GaussianRational.from_text(tok[2 + d], tok[3 + d])
        n += 1
    return HomPolyMatrix(rows, cols, d, row_deg, col_deg, entries), n


def parse_blocks(lines: list[list[str]]) -> Iterable[tuple[HomPolyMatrix, int]]:
    yield _parse_lines(lines)
