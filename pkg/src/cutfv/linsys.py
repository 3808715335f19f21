"""Global operator assembly, volume-fraction preconditioning, Krylov solve.

Each degree of freedom (cell, phase) gets one row of

    <alpha u> - (1/|V|) [sum of signed face fluxes + interface flux]

with one shared flux stencil per face so that interior fluxes telescope.
Nonzero jump data and Dirichlet ghost values are eliminated into the
right-hand side contribution r, giving the discrete system L u = f + r.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import CUT_CELL, IRREGULAR, REGULAR
from .stencils import (StencilFactory, Stencil, conservative_flux_merge,
                       regular_stencils)


class SolveError(Exception):
    pass


class SingularSystem(SolveError):
    pass


class NoConvergence(SolveError):
    pass


DIRECT_SIZE_CAP = 20_000


def _field_pair(f):
    if f is None:
        return None
    if isinstance(f, dict):
        return {1: f[1], -1: f[-1]}
    if isinstance(f, (tuple, list)):
        return {1: f[0], -1: f[1]}
    return {1: f, -1: f}


@dataclass
class SolveReport:
    method: str
    iterations: int
    residual: float
    fallback: bool
    tolerance: float
    n_dofs: int

    HEADER = ["method", "iterations", "residual", "fallback", "tolerance",
              "n_dofs"]

    def csv_row(self):
        return [self.method, self.iterations, repr(self.residual),
                int(self.fallback), repr(self.tolerance), self.n_dofs]


@dataclass
class LinearSystem:
    """Sparse operator L with L u = f + r over interior dofs."""
    L: sp.csr_matrix
    r: np.ndarray
    f: np.ndarray
    mesh: object
    singular_compatible: bool = False
    null_weight: np.ndarray | None = None
    preconditioned: bool = False
    face_stencils: dict | None = None

    def rhs(self):
        return self.f + self.r

    def apply(self, u):
        return self.L @ u

    def export_coo(self, path):
        """Matrix in (row, col, value) text format."""
        coo = self.L.tocoo()
        with open(path, "w") as fh:
            for i, j, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{i} {j} {v!r}\n")


class _Accumulator:
    def __init__(self, n_interior):
        self.rows = []
        self.cols = []
        self.vals = []
        self.shift = np.zeros(n_interior)
        self.n_interior = n_interior

    def add_arrays(self, rows, cols, vals):
        self.rows.append(np.asarray(rows, dtype=np.int64).ravel())
        self.cols.append(np.asarray(cols, dtype=np.int64).ravel())
        self.vals.append(np.asarray(vals, dtype=float).ravel())

    def add_stencil(self, row, st: Stencil, factor):
        if row < 0 or row >= self.n_interior:
            return
        self.add_arrays(np.full(st.dofs.shape, row), st.dofs,
                        st.weights * factor)
        self.shift[row] += st.rhs_shift * factor


def assemble(mesh, alpha, beta, jump_data=None, f=None, ghost_values=None,
             collect_face_stencils=False) -> LinearSystem:
    """Assemble the discrete operator for per-phase coefficient fields.

    alpha may be None (no linear term); alpha/beta accept a single field,
    a (plus, minus) pair, or a {1: ..., -1: ...} mapping.  jump_data maps
    cut cells to their (value-jump, flux-jump) integrals.  ghost_values
    holds exact cell averages for Dirichlet ghost dofs (zeros if omitted).
    """
    alpha = _field_pair(alpha)
    beta = _field_pair(beta)
    P, n, h = mesh.P, mesh.n, mesh.h
    pad = P
    N = mesh.n_interior
    tmpl = regular_stencils(P)

    # padded per-cell grids: classification, single-phase dof, coefficients
    size = n + 2 * pad
    CLS = -np.ones((size, size), dtype=np.int8)     # -1 outside
    DOF = -np.ones((size, size), dtype=np.int64)
    idx = np.arange(-pad, n + pad)
    XC = mesh.lo[0] + (idx + 0.5) * h
    YC = mesh.lo[1] + (idx + 0.5) * h
    XX, YY = np.meshgrid(XC, YC, indexing="ij")
    PH = np.zeros((size, size), dtype=np.int8)

    inter = slice(pad, pad + n)
    CLS[inter, inter] = mesh.cls
    PH[inter, inter] = mesh.phase
    DOF[inter, inter] = np.where(mesh.cls == CUT_CELL, -7,
                                 np.where(mesh.phase > 0, mesh.dof_plus,
                                          mesh.dof_minus))
    if mesh.periodic_x:
        for arr in (CLS, PH, DOF):
            arr[:pad, inter] = arr[n:n + pad, inter]
            arr[n + pad:, inter] = arr[pad:2 * pad, inter]
    if mesh.periodic_y:
        for arr in (CLS, PH, DOF):
            arr[:, :pad] = arr[:, n:n + pad]
            arr[:, n + pad:] = arr[:, pad:2 * pad]
    for (gi, gj), ph in mesh.ghost_phase.items():
        CLS[gi + pad, gj + pad] = 3
        PH[gi + pad, gj + pad] = ph
        DOF[gi + pad, gj + pad] = mesh.ghost_dof[(gi, gj)]

    CB = np.where(PH >= 0, beta[1].value(XX, YY), beta[-1].value(XX, YY))
    CA = None
    if alpha is not None:
        CA = np.where(PH >= 0, alpha[1].value(XX, YY), alpha[-1].value(XX, YY))

    acc = _Accumulator(N)
    face_debug = {} if collect_face_stencils else None

    # ---- regular linear-term template (vectorized over regular cells) ----
    if alpha is not None:
        ri, rj = np.nonzero(mesh.cls == REGULAR)
        if ri.size:
            offs = tmpl.linear.offsets
            nsite = len(offs)
            sites_i = ri[:, None] + np.array([o[0] for o in offs])[None, :] + pad
            sites_j = rj[:, None] + np.array([o[1] for o in offs])[None, :] + pad
            asamp = CA[sites_i, sites_j]
            W = asamp @ tmpl.linear.B
            rows = DOF[ri + pad, rj + pad]
            cols = DOF[sites_i, sites_j]
            if np.any(cols < 0):
                raise AssertionError("regular linear template hit a cut/absent cell")
            acc.add_arrays(np.repeat(rows, nsite), cols, W)

    # ---- template faces: any face with a regular side ----
    for axis in (0, 1):
        ft = tmpl.flux[axis]
        periodic = mesh.periodic_x if axis == 0 else mesh.periodic_y
        nf = n if periodic else n + 1
        fi, fj = np.meshgrid(np.arange(nf), np.arange(n), indexing="ij")
        fi, fj = fi.ravel(), fj.ravel()
        if axis == 0:
            Li, Lj, Ri, Rj = fi - 1, fj, fi, fj
        else:
            Li, Lj, Ri, Rj = fj, fi - 1, fj, fi
        catL = CLS[Li + pad, Lj + pad]
        catR = CLS[Ri + pad, Rj + pad]
        use = (catL == REGULAR) | (catR == REGULAR)
        if not np.any(use):
            continue
        Li, Lj, Ri, Rj = Li[use], Lj[use], Ri[use], Rj[use]
        catL, catR = catL[use], catR[use]
        offs = ft.offsets
        nsite = len(offs)
        sites_i = Ri[:, None] + np.array([o[0] for o in offs])[None, :] + pad
        sites_j = Rj[:, None] + np.array([o[1] for o in offs])[None, :] + pad
        bsamp = CB[sites_i, sites_j]
        W = bsamp @ ft.B                       # flux in +axis direction
        cols = DOF[sites_i, sites_j]
        if np.any(cols < 0):
            raise AssertionError("regular flux template hit a cut/absent cell")
        scale = 1.0 / h ** 2
        rowsL = DOF[Li + pad, Lj + pad]
        rowsR = DOF[Ri + pad, Rj + pad]
        okL = (rowsL >= 0) & (rowsL < N) & (catL != 3)
        okR = (rowsR >= 0) & (rowsR < N) & (catR != 3)
        if np.any(okL):
            acc.add_arrays(np.repeat(rowsL[okL], nsite), cols[okL],
                           -scale * W[okL])
        if np.any(okR):
            acc.add_arrays(np.repeat(rowsR[okR], nsite), cols[okR],
                           scale * W[okR])
        if face_debug is not None:
            for k in range(len(Li)):
                fid = (axis, int(Ri[k] % n if periodic else Ri[k]), int(Rj[k]))
                ph = int(PH[Ri[k] + pad, Rj[k] + pad]
                         or PH[Li[k] + pad, Lj[k] + pad])
                face_debug[(fid, ph)] = Stencil(cols[k].copy(), W[k].copy())

    # ---- per-cell stencils for cut and irregular cells ----
    factory = StencilFactory(mesh, alpha, beta)
    cell_stencils = []
    special = sorted(map(tuple, zip(*np.nonzero(mesh.cls == IRREGULAR)))) \
        + sorted(mesh.cut)
    for cell in special:
        if mesh.cls[cell] == IRREGULAR:
            cell_stencils.append(factory.irregular(cell))
        else:
            cell_stencils.append(factory.cut(cell, jump_data))

    for cs in cell_stencils:
        for phase, ps in cs.phases.items():
            row = mesh.dof(cs.cell, phase)
            if ps.linear is not None:
                acc.add_stencil(row, ps.linear, 1.0)
            if ps.eb is not None:
                # stored interface normal points from "-" into "+"
                sigma = -1.0 if phase > 0 else 1.0
                acc.add_stencil(row, ps.eb, -sigma / ps.volume)

    merged = conservative_flux_merge(mesh, cell_stencils)
    for (fid, phase), st in sorted(merged.items()):
        axis, fi2, fj2 = fid
        Rcell = (fi2, fj2)
        Lcell = (fi2 - 1, fj2) if axis == 0 else (fi2, fj2 - 1)
        # the face is L's outflow (east/north) and R's inflow (west/south)
        for cell, sgn in ((Lcell, -1.0), (Rcell, 1.0)):
            row = mesh.dof(cell, phase)
            if row < 0 or row >= N:
                continue
            acc.add_stencil(row, st, sgn / mesh.volume(cell, phase))
        if face_debug is not None:
            face_debug[(fid, phase)] = st

    # ---- gather, eliminate ghosts, finalize ----
    rows = np.concatenate(acc.rows) if acc.rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(acc.cols) if acc.cols else np.zeros(0, dtype=np.int64)
    vals = np.concatenate(acc.vals) if acc.vals else np.zeros(0)
    r = -acc.shift
    gmask = cols >= N
    if np.any(gmask):
        gvals = np.zeros(mesh.n_dofs - N) if ghost_values is None \
            else np.asarray(ghost_values, dtype=float)
        np.add.at(r, rows[gmask], -vals[gmask] * gvals[cols[gmask] - N])
        rows, cols, vals = rows[~gmask], cols[~gmask], vals[~gmask]
    L = sp.coo_matrix((vals, (rows, cols)), shape=(N, N)).tocsr()
    L.sum_duplicates()

    fvec = np.zeros(N) if f is None else np.asarray(f, dtype=float)
    singular = (alpha is None and mesh.periodic_x and mesh.periodic_y)
    return LinearSystem(
        L=L, r=r, f=fvec, mesh=mesh,
        singular_compatible=singular,
        null_weight=mesh.dof_volumes.copy() if singular else None,
        face_stencils=face_debug)


def precondition(system: LinearSystem) -> LinearSystem:
    """Scale each row by its volume fraction |V_i| / h^2."""
    mesh = system.mesh
    d = mesh.dof_volumes / mesh.h ** 2
    D = sp.diags(d)
    nw = None
    if system.null_weight is not None:
        nw = system.null_weight / d
    return LinearSystem(
        L=(D @ system.L).tocsr(), r=d * system.r, f=d * system.f,
        mesh=mesh, singular_compatible=system.singular_compatible,
        null_weight=nw, preconditioned=True,
        face_stencils=system.face_stencils)


def _lu_preconditioner(L):
    # complete sparse LU when affordable (the Krylov methods then converge
    # in a handful of iterations); incomplete LU beyond that
    try:
        if L.shape[0] <= 70_000:
            lu = spla.splu(L.tocsc())
        else:
            lu = spla.spilu(L.tocsc(), drop_tol=1e-6, fill_factor=10)
        return spla.LinearOperator(L.shape, lu.solve)
    except Exception:
        return None


def solve(system: LinearSystem, method="bicgstab", tol=1e-11, max_iter=None):
    """Solve L u = f + r; returns (u, SolveReport).

    Falls back bicgstab -> gmres -> sparse direct (SuperLU, only for
    systems up to 20k dofs).  Fully periodic pure-flux systems are
    singular: compatibility of the right-hand side is checked and the
    solution mean is pinned to zero through a bordered direct solve.
    """
    L, b = system.L, system.rhs()
    N = L.shape[0]
    if max_iter is None:
        max_iter = 10 * N
    bnorm = float(np.linalg.norm(b))

    if system.singular_compatible:
        w = system.null_weight
        mismatch = abs(float(w @ b))
        if mismatch > 1e-10 * max(np.linalg.norm(w) * bnorm, 1e-300):
            raise SingularSystem(
                f"incompatible right-hand side: |w.b| = {mismatch:.3e}")
        if N + 1 > DIRECT_SIZE_CAP:
            raise SingularSystem(
                "singular system too large for the bordered direct solve")
        ones = np.ones(N)
        B = sp.bmat([[L, w[:, None]], [ones[None, :], None]]).tocsc()
        x = spla.spsolve(B, np.concatenate([b, [0.0]]))
        u = x[:N]
        res = float(np.linalg.norm(L @ u - b) / max(bnorm, 1e-300))
        return u, SolveReport("bordered-direct", 0, res, False, tol, N)

    if bnorm == 0.0:
        return np.zeros(N), SolveReport(method, 0, 0.0, False, tol, N)

    M = _lu_preconditioner(L)
    tried = []

    def _residual(u):
        return float(np.linalg.norm(L @ u - b) / bnorm)

    order = {"bicgstab": ["bicgstab", "gmres", "direct"],
             "gmres": ["gmres", "direct"],
             "direct": ["direct"]}[method]
    for attempt in order:
        if attempt == "bicgstab":
            it = [0]

            def cb(xk):
                it[0] += 1
            u, info = spla.bicgstab(L, b, rtol=tol, atol=0.0, M=M,
                                    maxiter=max_iter, callback=cb)
            res = _residual(u)
            tried.append(("bicgstab", it[0], res))
            if info == 0 and res <= 10 * tol:
                return u, SolveReport("bicgstab", it[0], res,
                                      len(tried) > 1, tol, N)
        elif attempt == "gmres":
            it = [0]

            def cb(xk):
                it[0] += 1
            u, info = spla.gmres(L, b, rtol=tol, atol=0.0, M=M, restart=50,
                                 maxiter=max(1, max_iter // 50), callback=cb,
                                 callback_type="pr_norm")
            res = _residual(u)
            tried.append(("gmres", it[0], res))
            if info == 0 and res <= 10 * tol:
                return u, SolveReport("gmres", it[0], res,
                                      len(tried) > 1, tol, N)
        else:
            if N > DIRECT_SIZE_CAP:
                break
            u = spla.spsolve(L.tocsc(), b)
            res = _residual(u)
            tried.append(("direct", 1, res))
            if res <= 1e-8:
                return u, SolveReport("direct", 1, res, len(tried) > 1, tol, N)
    raise NoConvergence(f"all solvers failed: {tried}")


def apply_operator(system: LinearSystem, u):
    return system.L @ u


def write_solve_reports(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n"] + SolveReport.HEADER)
        for n, rep in reports:
            w.writerow([n] + rep.csv_row())
