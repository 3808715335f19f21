"""Bilinear stencils for the linear term and face flux integrals.

A stencil approximates a functional G(u) = g . c_u by s . d where d are
cell-averaged solution values in a neighborhood and s solves M^T s = g
through a (weighted) pseudoinverse of the moment matrix M.  Coefficient
fields enter through their own point-value interpolation matrices, so
every stencil is bilinear in (coefficient samples, solution data).

All matrices are built in cell-scaled coordinates (lengths in units of
h, centered at the owning cell or face); cell averages, point samples,
cell-averaged linear terms and face fluxes are all invariant under that
scaling, so the resulting weights apply directly to physical data.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import full_cell_moments
from .multiindex import (MultiIndexSet, enumerate_indices, reduced_regular,
                         translate_moments)


class StencilError(Exception):
    pass


class RankDeficient(StencilError):
    pass


class MissingMoment(StencilError):
    pass


class OrientationMismatch(StencilError):
    pass


# --------------------------------------------------------------------------
# pseudoinverse and coefficient fits
# --------------------------------------------------------------------------

def weighted_pseudoinverse(M, w=None):
    """Return (W M)^+ W, the weighted least-squares solve operator.

    Singular values below sigma_max * max(m, n) * eps are truncated; if
    that drops the rank below the column count the fit is unusable and
    RankDeficient is raised.
    """
    M = np.asarray(M, dtype=float)
    if w is not None:
        WM = M * np.asarray(w, dtype=float)[:, None]
    else:
        WM = M
    U, s, Vt = np.linalg.svd(WM, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise RankDeficient("zero moment matrix")
    cut = s[0] * max(M.shape) * np.finfo(float).eps
    keep = s > cut
    if np.count_nonzero(keep) < M.shape[1]:
        raise RankDeficient(
            f"rank {np.count_nonzero(keep)} < {M.shape[1]} columns "
            f"(sigma range {s[-1]:.3e}..{s[0]:.3e})")
    P = (Vt[keep].T / s[keep]) @ U[:, keep].T
    if w is not None:
        P = P * np.asarray(w, dtype=float)[None, :]
    return P


def coefficient_taylor(points, values, degree, weights=None, mset=None):
    """Least-squares Taylor coefficients of a point-sampled field.

    Rows of the interpolation matrix are monomials x^q evaluated at the
    sample points (relative to the expansion center).  Exact for
    polynomial fields of degree <= `degree`.
    """
    mset = mset or enumerate_indices(degree)
    pts = np.asarray(points, dtype=float)
    M = point_rows(pts, mset)
    return weighted_pseudoinverse(M, weights) @ np.asarray(values, dtype=float)


def point_rows(points, mset):
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return (pts[:, 0:1] ** mset.qx[None, :]) * (pts[:, 1:2] ** mset.qy[None, :])


# --------------------------------------------------------------------------
# cached index algebra for the g-vector contractions
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _contractions(pu: int, pc: int, q_avail: int):
    """Index maps between mset(pu) x mset(pc) products and mset(q_avail).

    SUM[iq, ir] is the position of q + r (or -1 if beyond q_avail), and
    DX/DY the positions of q + r - e_d.
    """
    mu, mc, mq = enumerate_indices(pu), enumerate_indices(pc), enumerate_indices(q_avail)
    SUM = -np.ones((len(mu), len(mc)), dtype=np.intp)
    DX = -np.ones_like(SUM)
    DY = -np.ones_like(SUM)
    for iq, (qx, qy) in enumerate(mu.indices):
        for ir, (rx, ry) in enumerate(mc.indices):
            if (qx + rx, qy + ry) in mq:
                SUM[iq, ir] = mq.position((qx + rx, qy + ry))
            if qx + rx >= 1 and (qx + rx - 1, qy + ry) in mq:
                DX[iq, ir] = mq.position((qx + rx - 1, qy + ry))
            if qy + ry >= 1 and (qx + rx, qy + ry - 1) in mq:
                DY[iq, ir] = mq.position((qx + rx, qy + ry - 1))
    return SUM, DX, DY


def _gather(vec, idx):
    out = vec[np.clip(idx, 0, None)]
    out[idx < 0] = 0.0
    return out


def linear_g_matrix(vol_moments, pu, pc):
    """G[q, r] = m^(q+r): contraction of volume moments for <alpha u>."""
    Q = _order_from_size(vol_moments.size)
    SUM, _, _ = _contractions(pu, pc, Q)
    return _gather(vol_moments, SUM)


def flux_g_matrix(face_moments, axis, pu, pc):
    """G[q, r] = q_d m^(q+r-e_d) for the flux through a grid-aligned face.

    `face_moments` are the plain 1D moments of the face; the flux is
    measured in the +d direction (no outward-normal sign).
    """
    Q = _order_from_size(face_moments.size)
    _, DX, DY = _contractions(pu, pc, Q)
    mu = enumerate_indices(pu)
    D = DX if axis == 0 else DY
    qd = (mu.qx if axis == 0 else mu.qy).astype(float)
    return qd[:, None] * _gather(face_moments, D)


def eb_g_matrix(eb_nx, eb_ny, pu, pc):
    """G[q, r] for the interface flux with normal-weighted moments."""
    Q = _order_from_size(eb_nx.size)
    mu = enumerate_indices(pu)
    _, DX, DY = _contractions(pu, pc, Q)
    return (mu.qx.astype(float)[:, None] * _gather(eb_nx, DX)
            + mu.qy.astype(float)[:, None] * _gather(eb_ny, DY))


def _order_from_size(size):
    order = int(round((8 * size + 1) ** 0.5 - 3) / 2)
    if (order + 1) * (order + 2) // 2 != size:
        raise ValueError(f"{size} is not a triangular moment-vector length")
    return order


# --------------------------------------------------------------------------
# spec-surface g-vector operations
# --------------------------------------------------------------------------

def g_alpha(moments, c_alpha, P, r_bound=None):
    """Functional coefficients of the cell-averaged linear term.

    g[q] = sum_{|r| <= r_bound(q)} c_alpha^r m^(q+r), with the
    truncation-analysis default r_bound(q) = P - |q| - 2 (entries with an
    empty sum are zero).  The caller divides by |V| for the cell average.
    """
    mu = enumerate_indices(P)
    moments = np.asarray(moments, dtype=float)
    c_alpha = np.asarray(c_alpha, dtype=float)
    Q = _order_from_size(moments.size)
    pc = _order_from_size(c_alpha.size)
    mc = enumerate_indices(pc)
    SUM, _, _ = _contractions(P, pc, Q)
    G = _gather(moments, SUM)
    for iq in range(len(mu)):
        lim = (P - mu.total[iq] - 2) if r_bound is None else r_bound
        active = mc.total <= lim
        if np.any(active & (SUM[iq] < 0)):
            raise MissingMoment(
                f"q={mu[iq]}: need moments beyond order {Q}")
        G[iq, ~active] = 0.0
    return G @ c_alpha


def g_beta_face(m_ax, m_ay, c_beta, P, r_bound=None):
    """Functional coefficients of a face flux integral.

    g[q] = sum_{|r| <= r_bound(q)} c_beta^r (qx m_Ax^(q+r-ex) +
    qy m_Ay^(q+r-ey)), default r_bound(q) = P - |q|.  m_Ax/m_Ay are the
    normal-weighted area moments of the face (for a grid-aligned face the
    tangential one vanishes and the normal one is the signed 1D moment).
    """
    mu = enumerate_indices(P)
    m_ax = np.asarray(m_ax, dtype=float)
    m_ay = np.asarray(m_ay, dtype=float)
    c_beta = np.asarray(c_beta, dtype=float)
    Q = _order_from_size(m_ax.size)
    pc = _order_from_size(c_beta.size)
    mc = enumerate_indices(pc)
    _, DX, DY = _contractions(P, pc, Q)
    G = eb_g_matrix(m_ax, m_ay, P, pc)
    for iq in range(len(mu)):
        lim = (P - mu.total[iq]) if r_bound is None else r_bound
        active = mc.total <= lim
        missing = active & (((DX[iq] < 0) & (mu.qx[iq] + mc.qx >= 1))
                            | ((DY[iq] < 0) & (mu.qy[iq] + mc.qy >= 1)))
        if np.any(missing):
            raise MissingMoment(
                f"q={mu[iq]}: need face moments beyond order {Q}")
        G[iq, ~active] = 0.0
    return G @ c_beta


# --------------------------------------------------------------------------
# regular-cell templates
# --------------------------------------------------------------------------

def _cellavg_1d(p, c):
    # average of t^p over [c - 1/2, c + 1/2]
    return ((c + 0.5) ** (p + 1) - (c - 0.5) ** (p + 1)) / (p + 1)


def cellavg_rows(offsets, mset):
    """Cell-averaged moment rows of unit cells at integer (or half-integer)
    center offsets."""
    off = np.asarray(offsets, dtype=float).reshape(-1, 2)
    rows = np.empty((off.shape[0], len(mset)))
    for k, (qx, qy) in enumerate(mset.indices):
        rows[:, k] = _cellavg_1d(qx, off[:, 0]) * _cellavg_1d(qy, off[:, 1])
    return rows


def _face_moments_1d(axis, xpos, order):
    """Plain moments of a unit grid face at signed position xpos along `axis`."""
    mset = enumerate_indices(order)
    out = np.zeros(len(mset))
    for k, (qx, qy) in enumerate(mset.indices):
        ce, ve = (qx, qy) if axis == 0 else (qy, qx)
        if ve % 2 == 0:
            out[k] = xpos ** ce / (2 ** ve * (ve + 1))
    return out


@dataclass
class FluxTemplate:
    """Face-attached bilinear flux map: flux = d_beta . B . d_u.

    `offsets` are cell offsets relative to the cell on the +d side of the
    face; fluxes are measured in the +d direction.
    """
    axis: int
    offsets: list
    B: np.ndarray
    u_mset: MultiIndexSet
    b_mset: MultiIndexSet


@dataclass
class LinearTemplate:
    offsets: list
    B: np.ndarray
    u_mset: MultiIndexSet
    a_mset: MultiIndexSet


@dataclass
class RegularTemplates:
    """Precomputed bilinear stencil templates shared by all regular cells."""
    P: int
    linear: LinearTemplate
    flux: dict          # axis -> FluxTemplate

    def face(self, side):
        """Flux map for one face of a cell: offsets relative to that cell.

        side in {"W","E","S","N"}; the flux is measured in +x (W/E) or
        +y (S/N).
        """
        ax = 0 if side in ("W", "E") else 1
        t = self.flux[ax]
        shift = 1 if side in ("E", "N") else 0
        if ax == 0:
            offs = [(i + shift, j) for (i, j) in t.offsets]
        else:
            offs = [(i, j + shift) for (i, j) in t.offsets]
        return offs, t.B


def _face_footprint(radius):
    out = []
    r = int(np.ceil(radius)) + 1
    for j in range(-r, r + 1):
        for i in range(-r, r + 1):
            if abs(i + 0.5) + abs(j) <= radius + 1e-12:
                out.append((i, j))
    return out


def _diamond(radius):
    return [(i, j) for j in range(-radius, radius + 1)
            for i in range(-radius, radius + 1) if abs(i) + abs(j) <= radius]


def template_reach(P: int) -> int:
    """Manhattan radius of cells a regular-cell row can touch."""
    return P // 2 if P == 2 else P // 2 + 1


@lru_cache(maxsize=None)
def regular_stencils(P: int, h: float = 1.0) -> RegularTemplates:
    """Build the shared regular-cell templates for even order P.

    P = 2 uses the minimal symmetric footprints (two cells per face flux,
    the five-point diamond for the linear term) with the reduced even
    basis; the assembled constant-coefficient divergence is exactly the
    five-point Laplacian.  P >= 4 widens each footprint by one ring and
    fits full bases so that the templates reproduce every polynomial
    flux/linear-term pairing (deg u <= P, deg beta <= P-1,
    deg alpha <= P-2) exactly.

    Templates are scale-invariant; h is accepted for interface symmetry
    but does not enter the weights.
    """
    if P < 2 or P % 2 != 0:
        raise ValueError(f"order must be even and >= 2, got {P}")
    if P == 2:
        flux_cells = _face_footprint((P - 1) / 2)
        u_cols = reduced_regular(P)
        b_cols = MultiIndexSet(P - 1, [r for r in enumerate_indices(P - 1)
                                       if not (r[0] + r[1] == P - 1 and r[1] % 2 == 1)])
        lin_cells = _diamond(P // 2)
        lu_cols = reduced_regular(P)
        a_cols = enumerate_indices(P - 2)
    else:
        flux_cells = _face_footprint(P / 2 + 0.5)
        u_cols = enumerate_indices(P)
        b_cols = enumerate_indices(P - 1)
        lin_cells = _diamond(P // 2 + 1)
        lu_cols = enumerate_indices(P)
        a_cols = enumerate_indices(P - 2)

    # flux template for an x-face at the origin (cells at (i + 1/2, j));
    # np.linalg.pinv here rather than the rank-guarded fit operator: the
    # P = 2 u-system is deliberately underdetermined (2 data sites, 5
    # reduced columns) and the least-norm solve is the intended stencil
    centers = np.array([(i + 0.5, j) for (i, j) in flux_cells])
    Mu = cellavg_rows(centers, u_cols)
    Mb = point_rows(centers, b_cols)
    fm = _face_moments_1d(0, 0.0, 2 * P)
    _, DXF, _ = _contractions(P, P - 1, 2 * P)
    Gf = np.zeros((len(u_cols), len(b_cols)))
    mu_full, mb_full = enumerate_indices(P), enumerate_indices(P - 1)
    for iq, q in enumerate(u_cols.indices):
        qi = mu_full.position(q)
        for ir, r in enumerate(b_cols.indices):
            ri = mb_full.position(r)
            if DXF[qi, ri] >= 0:
                Gf[iq, ir] = q[0] * fm[DXF[qi, ri]]
    Bf = np.linalg.pinv(Mb).T @ Gf.T @ np.linalg.pinv(Mu)
    fx = FluxTemplate(0, flux_cells, Bf, u_cols, b_cols)
    fy = FluxTemplate(1, [(j, i) for (i, j) in flux_cells], Bf, u_cols, b_cols)

    # linear-term template, centered on the cell (|V| = 1 in scaled units)
    offs = np.array(lin_cells, dtype=float)
    Mu_l = cellavg_rows(offs, lu_cols)
    Ma = point_rows(offs, a_cols)
    vm = full_cell_moments(1.0, 2 * P)
    SUM, _, _ = _contractions(P, P - 2, 2 * P)
    Gl = np.zeros((len(lu_cols), len(a_cols)))
    for iq, q in enumerate(lu_cols.indices):
        qi = mu_full.position(q)
        for ir, r in enumerate(a_cols.indices):
            ri = enumerate_indices(P - 2).position(r)
            Gl[iq, ir] = vm[SUM[qi, ri]]
    Bl = np.linalg.pinv(Ma).T @ Gl.T @ np.linalg.pinv(Mu_l)
    # re-route the constant part of alpha through the cell's own average:
    # alpha == const then contributes exactly const * <u>_center, which
    # keeps L = alpha I when the flux term vanishes
    csite = lin_cells.index((0, 0))
    Bl[csite, :] += (np.eye(len(lin_cells))[csite] - Bl.sum(axis=0))
    lin = LinearTemplate(lin_cells, Bl, lu_cols, a_cols)
    return RegularTemplates(P=P, linear=lin, flux={0: fx, 1: fy})


# --------------------------------------------------------------------------
# general (irregular / cut) stencils
# --------------------------------------------------------------------------

@dataclass
class Stencil:
    """Sparse weights over global dofs plus a jump-data scalar."""
    dofs: np.ndarray
    weights: np.ndarray
    rhs_shift: float = 0.0

    def apply(self, u):
        """Evaluate on a value vector covering interior and ghost dofs."""
        return float(self.weights @ u[self.dofs]) + self.rhs_shift

    def scaled(self, factor):
        return Stencil(self.dofs, self.weights * factor, self.rhs_shift * factor)


@dataclass
class PhaseStencils:
    linear: Stencil | None
    faces: dict                      # (axis, side) -> Stencil | None
    eb: Stencil | None
    volume: float                    # physical sub-volume


@dataclass
class CellStencils:
    cell: tuple
    kind: str                        # "irregular" | "cut"
    phases: dict                     # phase -> PhaseStencils


def distance_weights(deltas, P):
    """w_j = 1 / (1 + delta_j)^(P+1) with delta in cell units."""
    return 1.0 / (1.0 + np.asarray(deltas, dtype=float)) ** (P + 1)


class StencilFactory:
    """Builds least-squares stencils for the irregular and cut cells of a
    mesh, given per-phase coefficient fields.

    alpha/beta are mappings phase -> field with a vectorized
    ``value(x, y)``; alpha may be None when the linear term vanishes.
    """

    def __init__(self, mesh, alpha, beta, P=None):
        self.mesh = mesh
        self.P = P or mesh.P
        self.alpha = alpha
        self.beta = beta
        self.mset = enumerate_indices(self.P)
        self.Q = 2 * self.P
        self.qset = enumerate_indices(self.Q)
        self._full_rows = {}
        self._unit_face = {}
        self._unit_vol = full_cell_moments(1.0, self.qset)
        for axis in (0, 1):
            for side in (-1, 1):
                self._unit_face[(axis, side)] = _face_moments_1d(
                    axis, 0.5 * side, self.Q)

    # -- data-site plumbing -------------------------------------------------

    def _member_row(self, mem):
        """Scaled cell-average moment row of a member volume, centered on
        the stencil's center cell."""
        if mem.cut_geometry is None:
            key = mem.offset
            row = self._full_rows.get(key)
            if row is None:
                row = cellavg_rows([key], self.mset)[0]
                self._full_rows[key] = row
            return row
        g = mem.cut_geometry
        scaled = g.vol[mem.phase] / g.h ** (g.mset.total + 2.0)
        shifted = translate_moments(scaled, mem.offset, g.mset)
        sub = np.array([shifted[g.mset.position(q)] for q in self.mset.indices])
        return sub / scaled[0]

    def _member_centroid(self, mem):
        if mem.cut_geometry is None:
            return np.array(mem.offset, dtype=float)
        g = mem.cut_geometry
        v = g.vol[mem.phase]
        i10 = g.mset.position((1, 0))
        i01 = g.mset.position((0, 1))
        return np.array(mem.offset, dtype=float) + [v[i10] / v[0] / g.h,
                                                    v[i01] / v[0] / g.h]

    def _coef_values(self, field_obj, centroids, center):
        x = center[0] + centroids[:, 0] * self.mesh.h
        y = center[1] + centroids[:, 1] * self.mesh.h
        return np.asarray(field_obj.value(x, y), dtype=float)

    def _phase_system(self, cell, phase):
        nb = self.mesh.neighborhood(cell, phase, self.P)
        M = np.vstack([self._member_row(m) for m in nb.members])
        w = distance_weights(nb.deltas, self.P)
        cents = np.vstack([self._member_centroid(m) for m in nb.members])
        Mpt = point_rows(cents, self.mset)
        PWpt = weighted_pseudoinverse(Mpt, w)
        center = self.mesh.center(*cell)
        c_beta = PWpt @ self._coef_values(self.beta[phase], cents, center)
        c_alpha = None
        if self.alpha is not None:
            c_alpha = PWpt @ self._coef_values(self.alpha[phase], cents, center)
        dofs = np.array([m.dof for m in nb.members], dtype=np.intp)
        return nb, M, w, dofs, c_alpha, c_beta

    # -- functional g-vectors -----------------------------------------------

    def _g_linear(self, vol_scaled, c_alpha):
        G = linear_g_matrix(vol_scaled, self.P, self.P)
        return G @ c_alpha

    def _g_face(self, face_scaled, axis, c_beta):
        G = flux_g_matrix(face_scaled, axis, self.P, self.P)
        return G @ c_beta

    def _g_eb(self, ebx, eby, c_beta):
        return eb_g_matrix(ebx, eby, self.P, self.P) @ c_beta

    def _scaled_geometry(self, cell):
        g = self.mesh.cut[cell]
        sv = g.mset.total + 2.0
        sa = g.mset.total + 1.0
        vol = {p: g.vol[p] / g.h ** sv for p in (1, -1)}
        face = {k: {p: g.face[k][p] / g.h ** sa for p in (1, -1)}
                for k in g.face}
        eb = g.eb / g.h ** sa
        ebx = g.eb_nx / g.h ** sa
        eby = g.eb_ny / g.h ** sa
        return vol, face, eb, ebx, eby

    # -- public builders ------------------------------------------------------

    def irregular(self, cell) -> CellStencils:
        """Stencils for a full (irregular) cell: one linear-term stencil
        and one flux stencil per face, all from the same weighted fit."""
        phase = self.mesh.cell_phase(cell)
        nb, M, w, dofs, c_alpha, c_beta = self._phase_system(cell, phase)
        PW = weighted_pseudoinverse(M, w)
        lin = None
        if c_alpha is not None:
            s = PW.T @ self._g_linear(self._unit_vol, c_alpha)
            lin = Stencil(dofs, s)      # |V| = 1 in scaled units
        faces = {}
        for key, fmom in self._unit_face.items():
            s = PW.T @ self._g_face(fmom, key[0], c_beta)
            faces[key] = Stencil(dofs, s)
        ps = PhaseStencils(linear=lin, faces=faces, eb=None,
                           volume=self.mesh.h ** 2)
        return CellStencils(cell=cell, kind="irregular", phases={phase: ps})

    def cut(self, cell, jump_data=None) -> CellStencils:
        """Coupled two-phase stencils for a cut cell.

        Jump rows for every cut cell in the union of the two phase
        neighborhoods tie the Taylor coefficients of both phases
        together; nonzero jump data lands in each stencil's rhs_shift.
        """
        sysp = self._phase_system(cell, 1)
        sysm = self._phase_system(cell, -1)
        nbp, Mp, wp, dofp, c_alpha_p, c_beta_p = sysp
        nbm, Mm, wm, dofm, c_alpha_m, c_beta_m = sysm
        nq = len(self.mset)

        # every cut cell in the union of the two neighborhoods contributes
        # a value-jump row and a flux-jump row; offsets are the geometric
        # ones (periodic wrap already unwound by the neighborhood)
        jump_offsets = {}
        for m in nbp.members + nbm.members:
            if m.cut_geometry is not None:
                jump_offsets.setdefault(m.cell, m.offset)
        jump_cells = sorted(jump_offsets)
        rows_p, rows_m, wj, dJ = [], [], [], []
        for jc in jump_cells:
            g = self.mesh.cut[jc]
            t = jump_offsets[jc]
            sa = g.h ** (g.mset.total + 1.0)
            eb = translate_moments(g.eb / sa, t, g.mset)
            ebx = translate_moments(g.eb_nx / sa, t, g.mset)
            eby = translate_moments(g.eb_ny / sa, t, g.mset)
            wjump = distance_weights([np.hypot(*map(float, t))], self.P)[0]
            # integral of [u] over the EB of cell jc
            val_row = np.array([eb[self.qset.position(q)]
                                for q in self.mset.indices])
            rows_p.append(val_row)
            rows_m.append(-val_row)
            wj.append(wjump)
            # integral of [beta du/dn] over the same EB
            G = eb_g_matrix(ebx, eby, self.P, self.P)
            rows_p.append(G @ c_beta_p)
            rows_m.append(-(G @ c_beta_m))
            wj.append(wjump)
            if jump_data is not None and jc in jump_data:
                wv, vv = jump_data[jc]
            else:
                wv, vv = 0.0, 0.0
            dJ.extend([wv / self.mesh.h, vv])

        nJ = len(rows_p)
        Mblk = np.zeros((len(dofp) + len(dofm) + nJ, 2 * nq))
        Mblk[:len(dofp), :nq] = Mp
        Mblk[len(dofp):len(dofp) + len(dofm), nq:] = Mm
        if nJ:
            Mblk[len(dofp) + len(dofm):, :nq] = np.vstack(rows_p)
            Mblk[len(dofp) + len(dofm):, nq:] = np.vstack(rows_m)
        wblk = np.concatenate([wp, wm, np.array(wj)])
        PW = weighted_pseudoinverse(Mblk, wblk)
        dJ = np.asarray(dJ, dtype=float)
        alldofs = np.concatenate([dofp, dofm])
        nu = len(alldofs)

        vol, face, eb0, ebx0, eby0 = self._scaled_geometry(cell)

        def make(gvec, phase, scale=1.0):
            ghat = np.zeros(2 * nq)
            if phase > 0:
                ghat[:nq] = gvec
            else:
                ghat[nq:] = gvec
            s = PW.T @ ghat
            shift = float(s[nu:] @ dJ) if nJ else 0.0
            return Stencil(alldofs, s[:nu] * scale, shift * scale)

        phases = {}
        for phase, c_alpha, c_beta in ((1, c_alpha_p, c_beta_p),
                                       (-1, c_alpha_m, c_beta_m)):
            vfrac = vol[phase][0]
            lin = None
            if c_alpha is not None:
                lin = make(self._g_linear(vol[phase], c_alpha), phase,
                           scale=1.0 / vfrac)
            faces = {}
            for key in face:
                fmom = face[key][phase]
                if fmom[0] <= 1e-14:
                    faces[key] = None
                    continue
                faces[key] = make(self._g_face(fmom, key[0], c_beta), phase)
            ebst = make(self._g_eb(ebx0, eby0, c_beta), phase)
            phases[phase] = PhaseStencils(
                linear=lin, faces=faces, eb=ebst,
                volume=vfrac * self.mesh.h ** 2)
        return CellStencils(cell=cell, kind="cut", phases=phases)


def average_stencils(a: Stencil, b: Stencil) -> Stencil:
    combined = {}
    for st, f in ((a, 0.5), (b, 0.5)):
        for d, w in zip(st.dofs, st.weights):
            combined[int(d)] = combined.get(int(d), 0.0) + f * w
    dofs = np.array(sorted(combined), dtype=np.intp)
    weights = np.array([combined[d] for d in dofs])
    return Stencil(dofs, weights, 0.5 * (a.rhs_shift + b.rhs_shift))


def conservative_flux_merge(mesh, cell_stencils):
    """One flux stencil per unique (face, phase).

    cut/irregular pairs average the two per-cell stencils.  Faces with a
    regular partner are skipped: those use the shared regular template,
    which is already symmetric about the face.  Faces whose only partner
    is a ghost cell keep the interior side's stencil.
    """
    merged = {}
    by_cell = {cs.cell: cs for cs in cell_stencils}
    for cs in cell_stencils:
        for phase, ps in cs.phases.items():
            for (axis, side), st in ps.faces.items():
                if st is None:
                    continue
                fid = mesh.face_id(cs.cell, axis, side)
                key = (fid, phase)
                if key in merged:
                    continue
                other = mesh.face_neighbor(cs.cell, axis, side)
                if other is not None and mesh.is_regular(other):
                    continue            # template-owned face
                ocs = by_cell.get(other)
                if ocs is None:
                    merged[key] = st    # domain boundary: single-sided
                    continue
                ops = ocs.phases.get(phase)
                ost = None if ops is None else ops.faces.get((axis, -side))
                if ost is None:
                    raise OrientationMismatch(
                        f"face {fid} phase {phase}: only one side produced "
                        f"a stencil")
                merged[key] = average_stencils(st, ost)
    return merged


def dump_stencils_json(cell_stencils, path):
    """Debug dump of per-cell stencils (dof weights and rhs shifts)."""
    out = []
    for cs in cell_stencils:
        rec = {"cell": list(cs.cell), "kind": cs.kind, "phases": {}}
        for phase, ps in cs.phases.items():
            entry = {"volume": ps.volume, "faces": {}}
            if ps.linear is not None:
                entry["linear"] = {"dofs": ps.linear.dofs.tolist(),
                                   "weights": ps.linear.weights.tolist(),
                                   "rhs_shift": ps.linear.rhs_shift}
            if ps.eb is not None:
                entry["eb"] = {"dofs": ps.eb.dofs.tolist(),
                               "weights": ps.eb.weights.tolist(),
                               "rhs_shift": ps.eb.rhs_shift}
            for key, st in ps.faces.items():
                if st is None:
                    continue
                entry["faces"][f"{'xy'[key[0]]}{'-+'[key[1] > 0]}"] = {
                    "dofs": st.dofs.tolist(), "weights": st.weights.tolist(),
                    "rhs_shift": st.rhs_shift}
            rec["phases"]["+" if phase > 0 else "-"] = entry
        out.append(rec)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=1)
