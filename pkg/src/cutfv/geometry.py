"""Exact geometric moments of cut cells from an implicit interface function.

The interface is the zero level set of psi(x, y); psi > 0 is phase "+",
psi < 0 is phase "-" (a corner value of exactly zero counts as "+").
Inside one cut cell the interface is approximated by 2^k line segments
whose vertices are roots of psi; moments of the two phase polygons and
of the interface polyline follow from Green's theorem edge formulas and
the segment sequence is Richardson extrapolated until it stagnates at
machine precision.

All stored moments are integrals of centered monomials (x - xc)^qx
(y - yc)^qy about the full cell's center, in physical units.
Interface normal moments are oriented from phase "-" into phase "+".
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .multiindex import MultiIndexSet, binomial_table, enumerate_indices


class GeometryError(Exception):
    pass


class NoSignChange(GeometryError):
    pass


class NoConvergence(GeometryError):
    pass


class UnderResolved(GeometryError):
    """Interface crosses a face more than once or more than two faces."""


class DegeneratePolygon(GeometryError):
    pass


class ZeroLengthSegment(GeometryError):
    pass


UNIFORM_PLUS = "uniform-plus"
UNIFORM_MINUS = "uniform-minus"
CUT = "cut"

MAX_REFINE = 12          # Romberg table depth cap: 2^12 segments
STAGNATION_TOL = 1e-15   # on scaled (unit-cell) moments


def _sign(v) -> int:
    # zero is deterministically "+"
    return 1 if v >= 0.0 else -1


def classify_corners(psi, lo, h) -> str:
    """Classify the square cell with lower-left corner lo and side h."""
    x0, y0 = lo
    s = [_sign(psi(x0, y0)), _sign(psi(x0 + h, y0)),
         _sign(psi(x0 + h, y0 + h)), _sign(psi(x0, y0 + h))]
    if all(si > 0 for si in s):
        return UNIFORM_PLUS
    if all(si < 0 for si in s):
        return UNIFORM_MINUS
    return CUT


def find_face_root(psi, a, b, tol=None, max_iter=100):
    """Root of psi on the segment [a, b] by secant with bisection fallback.

    Requires a sign change (or zero endpoint).  tol is a coordinate-space
    bracket tolerance, default 1e-14 * |b - a|.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    seg = np.linalg.norm(b - a)
    if tol is None:
        tol = 1e-14 * seg
    fa = float(psi(a[0], a[1]))
    fb = float(psi(b[0], b[1]))
    if fa == 0.0:
        return a.copy()
    if fb == 0.0:
        return b.copy()
    if fa * fb > 0.0:
        raise NoSignChange(f"psi({a}) = {fa}, psi({b}) = {fb}")
    # parametrize x(t) = a + t (b - a), keep a bracket [tlo, thi] at all times
    tlo, thi, flo, fhi = 0.0, 1.0, fa, fb
    t0, f0 = tlo, flo
    t1, f1 = thi, fhi
    for _ in range(max_iter):
        if f1 != f0:
            t2 = t1 - f1 * (t1 - t0) / (f1 - f0)
        else:
            t2 = 0.5 * (tlo + thi)
        if not (tlo < t2 < thi):
            t2 = 0.5 * (tlo + thi)
        x2 = a + t2 * (b - a)
        f2 = float(psi(x2[0], x2[1]))
        if f2 == 0.0 or (thi - tlo) * seg <= tol:
            return x2
        if flo * f2 < 0.0:
            thi, fhi = t2, f2
        else:
            tlo, flo = t2, f2
        t0, f0 = t1, f1
        t1, f1 = t2, f2
    if (thi - tlo) * seg <= 1e3 * tol:
        return a + 0.5 * (tlo + thi) * (b - a)
    raise NoConvergence(f"root not bracketed to {tol} in {max_iter} iterations")


def _edge_powers(verts, order):
    """Power tables for the Green's theorem edge sums.

    verts is closed implicitly: edge k runs verts[k] -> verts[k+1 mod n].
    Returns (X, Y, DX, DY) with X[i] = x_k^i etc., shape (order+2, nedges).
    """
    v = np.asarray(verts, dtype=float)
    x0, y0 = v[:, 0], v[:, 1]
    x1 = np.roll(x0, -1)
    y1 = np.roll(y0, -1)
    dx, dy = x1 - x0, y1 - y0
    n = order + 2
    X = np.vstack([x0 ** i for i in range(n)])
    Y = np.vstack([y0 ** i for i in range(n)])
    DX = np.vstack([dx ** i for i in range(n)])
    DY = np.vstack([dy ** i for i in range(n)])
    return X, Y, DX, DY


def polygon_moments(vertices, order, center=(0.0, 0.0)) -> np.ndarray:
    """Signed moments of a polygon: integral of (x-cx)^p (y-cy)^q dV.

    Exact for polygons (up to roundoff).  Counterclockwise vertex order
    gives positive area; a clockwise polygon yields the negated values,
    so callers that need unsigned moments must orient their input.
    """
    mset = order if isinstance(order, MultiIndexSet) else enumerate_indices(order)
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[0] < 3:
        raise DegeneratePolygon(f"need at least 3 vertices, got {v.shape}")
    v = v - np.asarray(center, dtype=float)
    B = binomial_table(mset.order + 1)
    X, Y, DX, DY = _edge_powers(v, mset.order)
    out = np.zeros(len(mset))
    for k, (p, q) in enumerate(mset.indices):
        acc = 0.0
        for i in range(p + 2):
            for j in range(q + 1):
                c = B[p + 1, i] * B[q, j] / ((p + 1) * (p + 2 + q - i - j))
                acc += c * np.sum(X[i] * DX[p + 1 - i] * Y[j] * DY[q + 1 - j])
        out[k] = acc
    return out


def _chain_base_moments(verts, mset):
    """Per-index edge sums for line moments over an open vertex chain.

    Returns (base, dy_sum, ndx_sum, dc_sum) where base[k] holds, per edge,
    sum_{i,j} C(p,i)C(q,j)/(p+1+q-i-j) x^i y^j dx^(p-i) dy^(q-j); the
    caller multiplies by dC, dy or -dx and sums edges.
    """
    v = np.asarray(verts, dtype=float)
    x0, y0 = v[:-1, 0], v[:-1, 1]
    dx = v[1:, 0] - x0
    dy = v[1:, 1] - y0
    dc = np.hypot(dx, dy)
    n = mset.order + 1
    X = np.vstack([x0 ** i for i in range(n)])
    Y = np.vstack([y0 ** i for i in range(n)])
    DX = np.vstack([dx ** i for i in range(n)])
    DY = np.vstack([dy ** i for i in range(n)])
    B = binomial_table(mset.order)
    area = np.zeros(len(mset))
    nx = np.zeros(len(mset))
    ny = np.zeros(len(mset))
    for k, (p, q) in enumerate(mset.indices):
        base = np.zeros_like(dx)
        for i in range(p + 1):
            for j in range(q + 1):
                c = B[p, i] * B[q, j] / (p + 1 + q - i - j)
                base = base + c * X[i] * Y[j] * DX[p - i] * DY[q - j]
        area[k] = np.sum(base * dc)
        nx[k] = np.sum(base * dy)
        ny[k] = np.sum(base * (-dx))
    return area, nx, ny


def segment_moments(v0, v1, order, center=(0.0, 0.0)):
    """Line moments of one segment: plain, x-normal- and y-normal-weighted.

    The normal is the tangent rotated 90 degrees clockwise,
    n = (dy, -dx)/|d|; traversing a region's boundary counterclockwise
    makes this the outward normal.
    """
    v0 = np.asarray(v0, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    if np.allclose(v0, v1, rtol=0.0, atol=0.0):
        raise ZeroLengthSegment(f"{v0} == {v1}")
    mset = order if isinstance(order, MultiIndexSet) else enumerate_indices(order)
    c = np.asarray(center, dtype=float)
    return _chain_base_moments(np.vstack([v0 - c, v1 - c]), mset)


def full_cell_moments(h, order) -> np.ndarray:
    """Centered monomial integrals over a full square cell of side h."""
    mset = order if isinstance(order, MultiIndexSet) else enumerate_indices(order)
    out = np.zeros(len(mset))
    for k, (p, q) in enumerate(mset.indices):
        if p % 2 == 0 and q % 2 == 0:
            out[k] = h ** (p + q + 2) / (2 ** (p + q) * (p + 1) * (q + 1))
    return out


def _interval_moments(const_val, const_exp, lo, hi, var_exp):
    # integral over [lo, hi] of const_val^const_exp * t^var_exp dt
    return (const_val ** const_exp
            * (hi ** (var_exp + 1) - lo ** (var_exp + 1)) / (var_exp + 1))


@dataclass
class CutCellGeometry:
    """Per-phase geometric moments of one cut cell.

    Moments are centered at the full cell's center `center`.  `vol[p]`
    are the phase volume moments, `face[(axis, side)][p]` the 1D moments
    of the sub-segment of the grid face lying in phase p (plain, no
    normal sign), `eb` the interface area moments, and `eb_nx`/`eb_ny`
    the normal-weighted interface moments with the normal pointing from
    phase "-" into phase "+".
    """
    center: tuple
    h: float
    mset: MultiIndexSet
    vol: dict
    face: dict
    eb: np.ndarray
    eb_nx: np.ndarray
    eb_ny: np.ndarray
    converged: bool = True
    levels: int = 0
    final_delta: float = 0.0
    roots: tuple = field(default=())

    @property
    def order(self):
        return self.mset.order

    def volume(self, phase) -> float:
        return float(self.vol[phase][0])

    def volume_fraction(self, phase) -> float:
        return self.volume(phase) / self.h ** 2

    def centroid(self, phase):
        v = self.vol[phase]
        return (self.center[0] + v[self.mset.position((1, 0))] / v[0],
                self.center[1] + v[self.mset.position((0, 1))] / v[0])


def _curve_point(psi, va, vb, h, tol):
    """Point on the interface near the midpoint of chord [va, vb].

    Searches along the chord's perpendicular bisector for a sign change,
    then refines with the bracketing root finder.
    """
    va = np.asarray(va)
    vb = np.asarray(vb)
    mid = 0.5 * (va + vb)
    d = vb - va
    L = float(np.hypot(d[0], d[1]))
    if L == 0.0:
        return mid
    n = np.array([d[1], -d[0]]) / L
    f0 = float(psi(mid[0], mid[1]))
    if f0 == 0.0:
        return mid
    for step in (0.25 * L, 0.5 * L, L, 2.0 * L):
        for s in (step, -step):
            p = mid + s * n
            if f0 * float(psi(p[0], p[1])) <= 0.0:
                return find_face_root(psi, mid, p, tol=tol)
    raise UnderResolved(
        f"no interface crossing within 2 chord lengths of {tuple(mid)}")


def _romberg_step(rows, raw):
    """Append one refinement level to the Romberg table rows."""
    new = [raw]
    for j, prev in enumerate(rows[-1] if rows else []):
        extrap = new[j] + (new[j] - prev) / (4.0 ** (j + 1) - 1.0)
        new.append(extrap)
    rows.append(new)
    return new[-1]


def cut_cell_moments(psi, lo, h, order) -> CutCellGeometry:
    """Moments of both phase regions of a cut cell, exact to roundoff.

    Computed in cell-scaled coordinates, Richardson extrapolated over
    interface refinements of 2^k segments, and rescaled to physical
    units on return.
    """
    mset = order if isinstance(order, MultiIndexSet) else enumerate_indices(order)
    x0, y0 = lo
    center = (x0 + 0.5 * h, y0 + 0.5 * h)

    corners = [(x0, y0), (x0 + h, y0), (x0 + h, y0 + h), (x0, y0 + h)]
    vals = [float(psi(cx, cy)) for cx, cy in corners]
    signs = [_sign(v) for v in vals]
    if len(set(signs)) == 1:
        raise GeometryError("cell is not cut")

    # walk the cell boundary counterclockwise, inserting face roots
    roots = []          # (edge index, point)
    for k in range(4):
        ca, cb = corners[k], corners[(k + 1) % 4]
        sa, sb = signs[k], signs[(k + 1) % 4]
        if sa != sb:
            roots.append((k, find_face_root(psi, ca, cb, tol=1e-14 * h)))
        else:
            # same-signed endpoints: a midpoint sign flip means the face
            # is crossed twice
            mx, my = 0.5 * (ca[0] + cb[0]), 0.5 * (ca[1] + cb[1])
            if _sign(psi(mx, my)) != sa:
                raise UnderResolved(f"face {k} of cell at {lo} crossed twice")
    if len(roots) != 2:
        raise UnderResolved(
            f"{len(roots)} faces of cell at {lo} crossed by the interface")

    # chain of boundary points in walk order: corner, [root], corner, ...
    chain = []          # (point, kind) with kind "corner" sign or "root"
    for k in range(4):
        chain.append((np.array(corners[k], dtype=float), signs[k]))
        for ek, pt in roots:
            if ek == k:
                chain.append((np.array(pt, dtype=float), 0))
    npts = len(chain)

    # entry root: walking CCW, the sign after it is "+"
    def sign_after(idx):
        for step in range(1, npts):
            s = chain[(idx + step) % npts][1]
            if s != 0:
                return s
        raise GeometryError("no signed corners found")

    root_idx = [i for i, (_, kind) in enumerate(chain) if kind == 0]
    if sign_after(root_idx[0]) > 0:
        entry, exit_ = root_idx[0], root_idx[1]
    else:
        entry, exit_ = root_idx[1], root_idx[0]

    def arc(i0, i1):
        pts = [chain[i0][0]]
        k = i0
        while True:
            k = (k + 1) % npts
            pts.append(chain[k][0])
            if k == i1:
                return pts

    arc_plus = arc(entry, exit_)     # entry -> "+" corners -> exit
    arc_minus = arc(exit_, entry)    # exit -> "-" corners -> entry

    # scale to the unit cell centered at the origin
    cx, cy = center

    def scaled(pts):
        a = np.asarray(pts, dtype=float).reshape(-1, 2)
        return (a - [cx, cy]) / h

    p_entry = chain[entry][0]
    p_exit = chain[exit_][0]
    eb_len = float(np.hypot(*(p_exit - p_entry)))
    nq = len(mset)

    if eb_len < 1e-13 * h:
        # interface pinches through a corner: one phase is (numerically)
        # the whole cell; mesh-level demotion handles the rest
        plus = polygon_moments(scaled(arc_plus), mset) if len(arc_plus) >= 3 \
            else np.zeros(nq)
        minus = polygon_moments(scaled(arc_minus), mset) if len(arc_minus) >= 3 \
            else np.zeros(nq)
        zeros = np.zeros(nq)
        stacked = np.concatenate([plus, minus, zeros, zeros, zeros])
        converged, levels, delta = True, 0, 0.0
        polyline = [p_entry, p_exit]
    else:
        # refine the interface polyline: level k has 2^k segments from
        # entry to exit (the "-" region's counterclockwise orientation,
        # so stored normals point from "-" into "+")
        polyline = [p_entry, p_exit]
        tol = 1e-14 * h
        rows = []
        best = prev_best = None
        converged = False
        levels = 0
        delta = np.inf
        prev_delta = np.inf
        for level in range(MAX_REFINE + 1):
            if level > 0:
                refined = []
                for k in range(len(polyline) - 1):
                    refined.append(polyline[k])
                    refined.append(_curve_point(psi, polyline[k],
                                                polyline[k + 1], h, tol))
                refined.append(polyline[-1])
                polyline = refined
            sp = scaled(polyline)
            plus = polygon_moments(np.vstack([scaled(arc_plus), sp[::-1][1:-1]]),
                                   mset)
            minus = polygon_moments(np.vstack([scaled(arc_minus), sp[1:-1]]),
                                    mset)
            eb, ebx, eby = _chain_base_moments(sp, mset)
            raw = np.concatenate([plus, minus, eb, ebx, eby])
            extrap = _romberg_step(rows, raw)
            levels = level
            if best is not None:
                prev_best = best
            best = extrap
            if prev_best is not None:
                prev_delta = delta
                delta = float(np.max(np.abs(best - prev_best)))
                if delta <= STAGNATION_TOL:
                    converged = True
                    break
                # roundoff plateau: already at ~1e-13 and no longer shrinking
                if delta <= 1e-13 and delta >= 0.25 * prev_delta:
                    converged = True
                    break
        stacked = best

    plus, minus, eb, ebx, eby = np.split(stacked, 5)
    scale_v = h ** (mset.total + 2.0)
    scale_a = h ** (mset.total + 1.0)
    vol = {1: plus * scale_v, -1: minus * scale_v}

    # grid-face sub-segment moments: exact 1D integrals, split at roots
    face = {}
    edge_faces = {0: (1, -1), 1: (0, 1), 2: (1, 1), 3: (0, -1)}  # edge->(axis, side)
    for k in range(4):
        axis, side = edge_faces[k]
        ca = np.array(corners[k], dtype=float)
        cb = np.array(corners[(k + 1) % 4], dtype=float)
        pieces = []
        cut_here = [pt for ek, pt in roots if ek == k]
        if cut_here:
            r = np.asarray(cut_here[0], dtype=float)
            pieces.append((ca, r, signs[k]))
            pieces.append((r, cb, signs[(k + 1) % 4]))
        else:
            pieces.append((ca, cb, signs[k]))
        fm = {1: np.zeros(nq), -1: np.zeros(nq)}
        for pa, pb, ph in pieces:
            var = 1 - axis                      # coordinate varying along face
            t0 = (pa[var] - center[var])
            t1 = (pb[var] - center[var])
            lo_t, hi_t = min(t0, t1), max(t0, t1)
            if hi_t - lo_t <= 0.0:
                continue
            cval = pa[axis] - center[axis]      # +- h/2
            for kq, (p, q) in enumerate(mset.indices):
                ce, ve = (p, q) if axis == 0 else (q, p)
                fm[ph][kq] += _interval_moments(cval, ce, lo_t, hi_t, ve)
        face[(axis, side)] = fm

    return CutCellGeometry(
        center=center, h=h, mset=mset, vol=vol, face=face,
        eb=eb * scale_a, eb_nx=ebx * scale_a, eb_ny=eby * scale_a,
        converged=converged, levels=levels,
        final_delta=float(delta) if np.isfinite(delta) else 0.0,
        roots=(tuple(p_entry), tuple(p_exit)))


def dump_moments_csv(geometries, path):
    """Debug dump of per-cell cut moments: cell, phase, qx, qy, value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "phase", "qx", "qy", "value"])
        for (i, j), g in sorted(geometries.items()):
            for ph in (1, -1):
                for k, (qx, qy) in enumerate(g.mset.indices):
                    w.writerow([i, j, "+" if ph > 0 else "-", qx, qy,
                                repr(g.vol[ph][k])])
