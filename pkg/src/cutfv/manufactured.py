"""Analytic fields for manufactured-solution testing.

Fields expose vectorized point values, arbitrary-order partial
derivatives, and local Taylor coefficient vectors; the exact source
term is produced by applying the differential operator to the exact
solution through truncated Taylor arithmetic.
"""
from __future__ import annotations

from math import factorial, pi

import numpy as np

from .multiindex import binomial_table, enumerate_indices


# ---------------------------------------------------------------------------
# truncated 2D polynomial arithmetic on triangular coefficient vectors
# ---------------------------------------------------------------------------

def poly_mul(a, ka, b, kb, kout):
    mo = enumerate_indices(kout)
    ma, mb = enumerate_indices(ka), enumerate_indices(kb)
    out = np.zeros(len(mo))
    for ia, (ax, ay) in enumerate(ma.indices):
        if a[ia] == 0.0:
            continue
        for ib, (bx, by) in enumerate(mb.indices):
            if ax + bx + ay + by > kout:
                continue
            out[mo.position((ax + bx, ay + by))] += a[ia] * b[ib]
    return out


def poly_dx(a, k):
    ma, mo = enumerate_indices(k), enumerate_indices(k - 1)
    out = np.zeros(len(mo))
    for ia, (ax, ay) in enumerate(ma.indices):
        if ax >= 1 and ax - 1 + ay <= k - 1:
            out[mo.position((ax - 1, ay))] += ax * a[ia]
    return out


def poly_dy(a, k):
    ma, mo = enumerate_indices(k), enumerate_indices(k - 1)
    out = np.zeros(len(mo))
    for ia, (ax, ay) in enumerate(ma.indices):
        if ay >= 1 and ax + ay - 1 <= k - 1:
            out[mo.position((ax, ay - 1))] += ay * a[ia]
    return out


def poly_truncate(a, k_in, k_out):
    """Restrict a triangular coefficient vector to total degree k_out."""
    mi, mo = enumerate_indices(k_in), enumerate_indices(k_out)
    return np.array([a[mi.position(q)] for q in mo.indices])


# ---------------------------------------------------------------------------
# field classes
# ---------------------------------------------------------------------------

class ConstField:
    def __init__(self, c):
        self.c = float(c)

    def value(self, x, y):
        return self.c * np.ones_like(np.asarray(x, dtype=float))

    def deriv(self, ax, ay, x, y):
        if ax == 0 and ay == 0:
            return self.value(x, y)
        return np.zeros_like(np.asarray(x, dtype=float))

    def taylor(self, x, y, order):
        out = np.zeros(len(enumerate_indices(order)))
        out[0] = self.c
        return out


class PolyField:
    """Global polynomial sum c[q] x^qx y^qy (coefficients about the origin)."""

    def __init__(self, coeffs):
        if isinstance(coeffs, dict):
            order = max(qx + qy for qx, qy in coeffs)
            mset = enumerate_indices(order)
            vec = np.zeros(len(mset))
            for q, v in coeffs.items():
                vec[mset.position(q)] = v
            coeffs = vec
        self.c = np.asarray(coeffs, dtype=float)
        self.order = enumerate_indices(0).order if self.c.size == 1 else None
        # recover order from the triangular size
        k = 0
        while (k + 1) * (k + 2) // 2 != self.c.size:
            k += 1
        self.order = k
        self.mset = enumerate_indices(k)

    def value(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(x)
        for k, (qx, qy) in enumerate(self.mset.indices):
            if self.c[k] != 0.0:
                out = out + self.c[k] * x ** qx * y ** qy
        return out

    def deriv(self, ax, ay, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(x)
        for k, (qx, qy) in enumerate(self.mset.indices):
            if self.c[k] == 0.0 or qx < ax or qy < ay:
                continue
            f = (factorial(qx) // factorial(qx - ax)
                 * factorial(qy) // factorial(qy - ay))
            out = out + f * self.c[k] * x ** (qx - ax) * y ** (qy - ay)
        return out

    def taylor(self, x, y, order):
        mo = enumerate_indices(order)
        out = np.zeros(len(mo))
        B = binomial_table(max(self.order, order))
        for k, (qx, qy) in enumerate(self.mset.indices):
            if self.c[k] == 0.0:
                continue
            for sx in range(min(qx, order) + 1):
                for sy in range(min(qy, order - sx) + 1):
                    out[mo.position((sx, sy))] += (
                        self.c[k] * B[qx, sx] * B[qy, sy]
                        * x ** (qx - sx) * y ** (qy - sy))
        return out


class TrigField:
    """Linear combination of cos^2(pi kx x) sin^2(pi ky y) modes.

    Modes are the 20 slots kx in {-2..2}, ky in {-2,-1,1,2}; evenness in
    kx and ky makes only 6 of them distinct, which is documented rather
    than "fixed" so seeded draws stay reproducible.  An additive offset
    keeps coefficient fields positive, and `scale` implements the
    solution-scaling factors.
    """

    KXS = (-2, -1, 0, 1, 2)
    KYS = (-2, -1, 1, 2)

    def __init__(self, coeffs, offset=0.0, scale=1.0):
        modes = [(kx, ky) for kx in self.KXS for ky in self.KYS]
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (len(modes),):
            raise ValueError(f"need {len(modes)} mode coefficients")
        self.modes = np.array(modes, dtype=float)
        self.coeffs = coeffs
        self.offset = float(offset)
        self.scale = float(scale)

    @staticmethod
    def _cos2_deriv(k, a, x):
        # d^a/dx^a of cos^2(pi k x) = (1 + cos(2 pi k x)) / 2
        w = 2.0 * pi * k
        if a == 0:
            return 0.5 * (1.0 + np.cos(w * x))
        return 0.5 * w ** a * np.cos(w * x + 0.5 * a * pi)

    @staticmethod
    def _sin2_deriv(k, a, y):
        # d^a/dy^a of sin^2(pi k y) = (1 - cos(2 pi k y)) / 2
        w = 2.0 * pi * k
        if a == 0:
            return 0.5 * (1.0 - np.cos(w * y))
        return -0.5 * w ** a * np.cos(w * y + 0.5 * a * pi)

    def deriv(self, ax, ay, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape)
        for (kx, ky), c in zip(self.modes, self.coeffs):
            if c == 0.0:
                continue
            out = out + c * (self._cos2_deriv(kx, ax, x)
                             * self._sin2_deriv(ky, ay, y))
        out = out * self.scale
        if ax == 0 and ay == 0:
            out = out + self.offset * self.scale
        return out

    def value(self, x, y):
        return self.deriv(0, 0, x, y)

    def taylor(self, x, y, order):
        mo = enumerate_indices(order)
        out = np.empty(len(mo))
        for k, (qx, qy) in enumerate(mo.indices):
            out[k] = self.deriv(qx, qy, x, y) / (factorial(qx) * factorial(qy))
        return out

    def rescaled(self, scale):
        return TrigField(self.coeffs, self.offset, scale)


class OperatorField:
    """The exact source alpha u - div(beta grad u) of analytic factors."""

    def __init__(self, alpha, beta, u):
        self.alpha = alpha
        self.beta = beta
        self.u = u

    def value(self, x, y):
        a = self.alpha.value(x, y) if self.alpha is not None else 0.0
        term = a * self.u.value(x, y)
        bx = self.beta.deriv(1, 0, x, y)
        by = self.beta.deriv(0, 1, x, y)
        b = self.beta.value(x, y)
        return (term
                - bx * self.u.deriv(1, 0, x, y) - b * self.u.deriv(2, 0, x, y)
                - by * self.u.deriv(0, 1, x, y) - b * self.u.deriv(0, 2, x, y))

    def taylor(self, x, y, order):
        K = order
        tu = self.u.taylor(x, y, K + 2)
        tb = self.beta.taylor(x, y, K + 1)
        ux = poly_dx(tu, K + 2)
        uy = poly_dy(tu, K + 2)
        fx = poly_mul(tb, K + 1, ux, K + 1, K + 1)
        fy = poly_mul(tb, K + 1, uy, K + 1, K + 1)
        out = -poly_dx(fx, K + 1) - poly_dy(fy, K + 1)
        if self.alpha is not None:
            ta = self.alpha.taylor(x, y, K)
            out = out + poly_mul(ta, K, poly_truncate(tu, K + 2, K), K, K)
        return out

    def taylor_grids(self, x, y, order):
        """Taylor coefficient grids via Leibniz products of cached
        component derivative grids (vectorized over the sample arrays)."""
        K = order
        du = {(a, b): self.u.deriv(a, b, x, y)
              for a in range(K + 3) for b in range(K + 3 - a)}
        db = {(a, b): self.beta.deriv(a, b, x, y)
              for a in range(K + 2) for b in range(K + 2 - a)}
        da = None
        if self.alpha is not None:
            da = {(a, b): self.alpha.deriv(a, b, x, y)
                  for a in range(K + 1) for b in range(K + 1 - a)}
        B = binomial_table(K)
        out = {}
        for a in range(K + 1):
            for b in range(K + 1 - a):
                acc = 0.0
                for i in range(a + 1):
                    for j in range(b + 1):
                        c = B[a, i] * B[b, j]
                        ri, rj = a - i, b - j
                        div = (db[(i + 1, j)] * du[(ri + 1, rj)]
                               + db[(i, j)] * du[(ri + 2, rj)]
                               + db[(i, j + 1)] * du[(ri, rj + 1)]
                               + db[(i, j)] * du[(ri, rj + 2)])
                        term = -c * div
                        if da is not None:
                            term = term + c * da[(i, j)] * du[(ri, rj)]
                        acc = acc + term
                out[(a, b)] = acc / (factorial(a) * factorial(b))
        return out


def taylor_coefficient_grids(fld, x, y, order):
    """Grids of local Taylor coefficients c_q(x, y) = D^q f / q!."""
    if hasattr(fld, "taylor_grids"):
        return fld.taylor_grids(x, y, order)
    mset = enumerate_indices(order)
    return {q: fld.deriv(q[0], q[1], x, y) / (factorial(q[0]) * factorial(q[1]))
            for q in mset.indices}


class FieldSet:
    """The six manufactured fields plus the induced exact sources."""

    def __init__(self, u, alpha, beta):
        self.u = u          # {1: field, -1: field}
        self.alpha = alpha  # may be None
        self.beta = beta
        a = alpha or {1: None, -1: None}
        self.f = {p: OperatorField(a[p], beta[p], u[p]) for p in (1, -1)}


def _positivity_offset(field: TrigField, domain, floor=0.1, samples=201):
    (x0, x1), (y0, y1) = domain
    xs = np.linspace(x0, x1, samples)
    ys = np.linspace(y0, y1, samples)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    m = float(np.min(field.value(X, Y)))
    return max(0.0, floor - m)


def manufactured_fields(seed, domain=((-1.0, 1.0), (-1.0, 1.0)),
                        scale_plus=1.0, scale_minus=1.0,
                        alpha_zero=False, beta_const=None) -> FieldSet:
    """Draw the six random fields from one seed.

    Coefficients are uniform in [-1, 1]; alpha and beta are offset so
    their sampled minimum is at least 0.1.  `beta_const = (bp, bm)`
    replaces the diffusion coefficients with constants (the coefficient
    ratio studies); `alpha_zero` drops the linear term entirely.
    """
    rng = np.random.default_rng(seed)
    nm = len(TrigField.KXS) * len(TrigField.KYS)

    def draw(scale=1.0, positive=False):
        f = TrigField(rng.uniform(-1.0, 1.0, nm), 0.0, scale)
        if positive:
            f = TrigField(f.coeffs, _positivity_offset(f, domain), scale)
        return f

    # fixed draw order: u+, u-, alpha+, alpha-, beta+, beta-
    u = {1: draw(scale_plus), -1: draw(scale_minus)}
    ap, am = draw(positive=True), draw(positive=True)
    bp, bm = draw(positive=True), draw(positive=True)
    alpha = None if alpha_zero else {1: ap, -1: am}
    beta = {1: bp, -1: bm}
    if beta_const is not None:
        beta = {1: ConstField(beta_const[0]), -1: ConstField(beta_const[1])}
    return FieldSet(u, alpha, beta)
