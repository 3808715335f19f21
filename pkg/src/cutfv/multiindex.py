"""Multi-index bookkeeping for moment vectors and Taylor coefficients.

Every vector or matrix in this package that is indexed by monomials
(x - xbar)^qx (y - ybar)^qy uses the ordering defined here:

    (0,0),(1,0),...,(P,0),(0,1),(1,1),...,(0,P)

i.e. blocks of increasing qy, with qx increasing inside each block.  No
other module is allowed to reorder.
"""
from __future__ import annotations

from functools import lru_cache
from math import comb, factorial

import numpy as np

MultiIndex = tuple[int, int]


class MultiIndexSet:
    """Ordered collection of multi-indices q = (qx, qy).

    Parameters
    ----------
    order : int
        Maximum total degree |q| = qx + qy represented by the set.
    indices : sequence of (int, int), optional
        Explicit index list (used for reduced subsets).  Defaults to all
        q with |q| <= order in the canonical ordering.
    """

    def __init__(self, order: int, indices=None):
        if order < 0:
            raise ValueError(f"order must be >= 0, got {order}")
        self.order = order
        if indices is None:
            indices = [(qx, qy) for qy in range(order + 1)
                       for qx in range(order + 1 - qy)]
        self.indices: list[MultiIndex] = [tuple(q) for q in indices]
        self._pos = {q: k for k, q in enumerate(self.indices)}
        # qx/qy exponent arrays, handy for vectorized moment formulas
        self.qx = np.array([q[0] for q in self.indices], dtype=np.intp)
        self.qy = np.array([q[1] for q in self.indices], dtype=np.intp)
        self.total = self.qx + self.qy

    def position(self, q: MultiIndex) -> int:
        """Position of index q; the inverse of enumeration."""
        return self._pos[tuple(q)]

    def __contains__(self, q) -> bool:
        return tuple(q) in self._pos

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __getitem__(self, k: int) -> MultiIndex:
        return self.indices[k]

    def __eq__(self, other) -> bool:
        return (isinstance(other, MultiIndexSet)
                and self.indices == other.indices)

    def __repr__(self) -> str:
        return f"MultiIndexSet(order={self.order}, size={len(self)})"


@lru_cache(maxsize=None)
def enumerate_indices(order: int) -> MultiIndexSet:
    """All multi-indices with |q| <= order, canonically ordered.

    Size is (order+1)(order+2)/2.
    """
    return MultiIndexSet(order)


@lru_cache(maxsize=None)
def reduced_regular(order: int) -> MultiIndexSet:
    """Subset used by regular-cell stencils at even order P.

    Keeps every q with |q| < P plus the top-degree indices |q| = P whose
    exponents are both even; the dropped mixed-odd terms are not needed
    on a square cell.
    """
    if order < 2 or order % 2 != 0:
        raise ValueError(f"reduced_regular requires even order >= 2, got {order}")
    keep = [q for q in enumerate_indices(order)
            if q[0] + q[1] < order or (q[0] % 2 == 0 and q[1] % 2 == 0)]
    return MultiIndexSet(order, keep)


@lru_cache(maxsize=None)
def binomial_table(nmax: int) -> np.ndarray:
    """Table B[n, k] = C(n, k) for 0 <= k <= n <= nmax, exact integers in float64."""
    tab = np.zeros((nmax + 1, nmax + 1))
    for n in range(nmax + 1):
        for k in range(n + 1):
            tab[n, k] = comb(n, k)
    return tab


@lru_cache(maxsize=None)
def factorial_table(nmax: int) -> np.ndarray:
    tab = np.array([factorial(n) for n in range(nmax + 1)], dtype=float)
    return tab


def translate_moments(moments: np.ndarray, shift, mset: MultiIndexSet) -> np.ndarray:
    """Re-center a moment vector from center c to center c - shift.

    If m[q] = integral of (x - c)^q, the returned vector holds the
    integrals of (x - (c - t))^q = ((x - c) + t)^q, expanded binomially:

        m'[q] = sum_{s <= q} C(qx,sx) C(qy,sy) t^(q-s) m[s]

    Works on the trailing axis of a stacked array as well.
    """
    tx, ty = shift
    B = binomial_table(mset.order)
    out = np.zeros_like(moments)
    for k, (qx, qy) in enumerate(mset.indices):
        acc = 0.0
        for sx in range(qx + 1):
            for sy in range(qy + 1):
                j = mset.position((sx, sy))
                acc = acc + (B[qx, sx] * B[qy, sy]
                             * tx ** (qx - sx) * ty ** (qy - sy)
                             * moments[..., j])
        out[..., k] = acc
    return out
