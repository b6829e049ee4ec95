"""Fraction-free (Bareiss) elimination over the Gaussian integers."""

from __future__ import annotations

from fractions import Fraction
from math import lcm
from typing import Sequence

from .multipoly import GaussianRational, ZERO

GInt = tuple[int, int]


def _gmul(a: GInt, b: GInt) -> GInt:
    return (a[0] * b[0] - a[1] * b[1], a[0] * b[1] + a[1] * b[0])


def _gsub(a: GInt, b: GInt) -> GInt:
    return (a[0] - b[0], a[1] - b[1])


def _gdiv_exact(a: GInt, b: GInt) -> GInt:
    n = b[0] * b[0] + b[1] * b[1]
    re = a[0] * b[0] + a[1] * b[1]
    im = a[1] * b[0] - a[0] * b[1]
    if re % n or im % n:
        raise ArithmeticError("inexact Bareiss division")
    return (re // n, im // n)


def _row_to_gint(row: Sequence[GaussianRational]) -> list[GInt]:
    den = 1
    for v in row:
        den = lcm(den, v.re.denominator, v.im.denominator)
    return [(int(v.re * den), int(v.im * den)) for v in row]


def solve(A: Sequence[Sequence[GaussianRational]],
          rhs: Sequence[Sequence[GaussianRational]]) -> tuple[list[list[GaussianRational] | None], int]:
    """Solve ``A X = rhs`` column by column.

    Returns one solution vector per right-hand-side column (None when that
    column is inconsistent) and the rank of ``A``.  Free unknowns are set to
    zero, so the answer is deterministic.
    """
    m = len(A)
    n = len(A[0]) if m else 0
    k = len(rhs[0]) if m else 0
    aug = [_row_to_gint(list(A[r]) + list(rhs[r])) for r in range(m)]
    width = n + k
    prev: GInt = (1, 0)
    pivots: list[int] = []
    row = 0
    for col in range(n):
        if row == m:
            break
        p = next((r for r in range(row, m) if aug[r][col] != (0, 0)), None)
        if p is None:
            continue
        aug[row], aug[p] = aug[p], aug[row]
        piv = aug[row][col]
        for r in range(row + 1, m):
            lead = aug[r][col]
            new = [(0, 0)] * width
            for j in range(col + 1, width):
                t = _gsub(_gmul(piv, aug[r][j]), _gmul(lead, aug[row][j]))
                new[j] = _gdiv_exact(t, prev)
            aug[r] = new
        # rows above the pivot row are untouched; earlier columns of `row` keep their values
        prev = piv
        pivots.append(col)
        row += 1
    rank = len(pivots)

    def gr(v: GInt) -> GaussianRational:
        return GaussianRational(v[0], v[1])

    sols: list[list[GaussianRational] | None] = []
    for c in range(k):
        if any(aug[r][n + c] != (0, 0) for r in range(rank, m)):
            sols.append(None)
            continue
        x = [ZERO] * n
        for r in range(rank - 1, -1, -1):
            pc = pivots[r]
            s = gr(aug[r][n + c])
            for j in range(pc + 1, n):
                if aug[r][j] != (0, 0) and x[j]:
                    s = s - gr(aug[r][j]) * x[j]
            x[pc] = s / gr(aug[r][pc])
        sols.append(x)
    return sols, rank


def nullspace_vector(A: Sequence[Sequence[GaussianRational]]) -> list[GaussianRational] | None:
    """A nonzero exact kernel vector of ``A`` or None if the kernel is trivial."""
    m = len(A)
    n = len(A[0]) if m else 0
    if n == 0:
        return None
    _, rank = solve(A, [[ZERO] for _ in range(m)]) if m else (None, 0)
    if rank == n:
        return None
    # find first free column by incremental rank test
    cols: list[int] = []
    for j in range(n):
        sub = [[A[r][c] for c in cols + [j]] for r in range(m)]
        if solve(sub, [[ZERO] for _ in range(m)])[1] < len(cols) + 1:
            # column j is a combination of the chosen pivot columns
            basis = [[A[r][c] for c in cols] for r in range(m)]
            target = [[-A[r][j]] for r in range(m)]
            coef = solve(basis, target)[0][0] if cols else []
            v = [ZERO] * n
            for c, a in zip(cols, coef):
                v[c] = a
            v[j] = GaussianRational(1)
            return v
        cols.append(j)
    return None


def to_fraction_matrix(M) -> list[list[GaussianRational]]:
    return [[GaussianRational.coerce(Fraction(v) if isinstance(v, int) else v) for v in row] for row in M]
