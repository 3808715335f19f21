"""Cartesian mesh: cell classification, cut-cell geometry, degrees of freedom.

Cells are squares indexed (i, j) with centers lo + (i + 1/2) h.  Cells
crossed by the interface are "cut" and carry two degrees of freedom (one
per phase); full cells whose regular-template footprint touches a cut
cell are "irregular"; everything else is "regular".  Dirichlet sides get
P layers of ghost cells (extra dofs eliminated at assembly); periodic
sides wrap by index arithmetic so face fluxes telescope exactly.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .geometry import (CUT, GeometryError, UnderResolved, classify_corners,
                       cut_cell_moments)
from .multiindex import enumerate_indices
from .stencils import template_reach


class MeshError(Exception):
    pass


class DomainTooSmall(MeshError):
    pass


class InsufficientNeighbors(MeshError):
    pass


REGULAR, IRREGULAR, CUT_CELL = 0, 1, 2

_SIDES = ("left", "right", "bottom", "top")
DEGENERATE_FRACTION = 1e-13


def _normalize_bc(bc):
    if isinstance(bc, str):
        bc = {s: bc for s in _SIDES}
    bc = dict(bc)
    for s in _SIDES:
        if bc.get(s) not in ("periodic", "dirichlet-ghost", "dirichlet"):
            raise MeshError(f"bad boundary condition for {s!r}: {bc.get(s)}")
        if bc[s] == "dirichlet-ghost":
            bc[s] = "dirichlet"
    if (bc["left"] == "periodic") != (bc["right"] == "periodic"):
        raise MeshError("periodic x boundaries must come in pairs")
    if (bc["bottom"] == "periodic") != (bc["top"] == "periodic"):
        raise MeshError("periodic y boundaries must come in pairs")
    return bc


@dataclass
class Member:
    """One same-phase volume inside a stencil neighborhood."""
    cell: tuple
    phase: int
    dof: int
    offset: tuple           # geometric cell offset from the center (unwrapped)
    cut_geometry: object    # CutCellGeometry or None for full cells
    ghost: bool = False


@dataclass
class Neighborhood:
    cell: tuple
    phase: int
    members: list
    deltas: np.ndarray      # distances between full-cell centers, units of h


def regular_footprint(P: int):
    """Offsets with Manhattan norm <= P/2: the classic regular footprint."""
    if P % 2 != 0:
        raise MeshError(f"order must be even, got {P}")
    r = P // 2
    return [(i, j) for j in range(-r, r + 1) for i in range(-r, r + 1)
            if abs(i) + abs(j) <= r]


class Mesh:
    """Classified Cartesian mesh over a square domain."""

    def __init__(self, psi, domain, n, P, bc="periodic", order_geom=None):
        (x0, x1), (y0, y1) = domain
        if abs((x1 - x0) - (y1 - y0)) > 1e-12 * abs(x1 - x0):
            raise MeshError("domain must be square")
        if n < 4 * P:
            raise DomainTooSmall(f"n = {n} < 4 P = {4 * P}")
        self.psi = psi
        self.lo = (x0, y0)
        self.n = int(n)
        self.h = (x1 - x0) / n
        self.P = int(P)
        self.bc = _normalize_bc(bc)
        self.order_geom = order_geom or 2 * P
        self.reach = template_reach(P)
        self.periodic_x = self.bc["left"] == "periodic"
        self.periodic_y = self.bc["bottom"] == "periodic"
        self.gx = 0 if self.periodic_x else P
        self.gy = 0 if self.periodic_y else P
        self._build()

    # -- construction -------------------------------------------------------

    def _build(self):
        n, h, gx, gy = self.n, self.h, self.gx, self.gy
        xs = self.lo[0] + h * np.arange(-gx, n + gx + 1)
        ys = self.lo[1] + h * np.arange(-gy, n + gy + 1)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        S = np.where(np.asarray(self.psi(X, Y), dtype=float) >= 0.0, 1, -1)
        same = ((S[:-1, :-1] == S[1:, :-1]) & (S[:-1, :-1] == S[1:, 1:])
                & (S[:-1, :-1] == S[:-1, 1:]))

        self.cut = {}
        self.cls = np.zeros((n, n), dtype=np.int8)
        self.phase = np.zeros((n, n), dtype=np.int8)
        self.ghost_phase = {}

        mset = enumerate_indices(self.order_geom)
        for ii in range(n + 2 * gx):
            for jj in range(n + 2 * gy):
                i, j = ii - gx, jj - gy
                interior = 0 <= i < n and 0 <= j < n
                if same[ii, jj]:
                    ph = int(S[ii, jj])
                    if interior:
                        self.phase[i, j] = ph
                    else:
                        self.ghost_phase[(i, j)] = ph
                    continue
                if not interior:
                    raise UnderResolved(
                        f"ghost cell ({i},{j}) is crossed by the interface")
                lo = (self.lo[0] + i * h, self.lo[1] + j * h)
                g = cut_cell_moments(self.psi, lo, h, mset)
                fplus = g.volume_fraction(1)
                if fplus < DEGENERATE_FRACTION or 1.0 - fplus < DEGENERATE_FRACTION:
                    # degenerate sliver: demote to a full cell of the
                    # majority phase
                    self.phase[i, j] = 1 if fplus >= 0.5 else -1
                    continue
                self.cls[i, j] = CUT_CELL
                self.cut[(i, j)] = g

        # irregular = full cells with a cut cell within the template reach
        cutmask = (self.cls == CUT_CELL)
        pad = self.reach
        padded = np.pad(cutmask, pad,
                        mode="wrap") if (self.periodic_x and self.periodic_y) \
            else self._pad_mixed(cutmask, pad)
        near = np.zeros_like(cutmask)
        for di in range(-pad, pad + 1):
            for dj in range(-pad, pad + 1):
                if abs(di) + abs(dj) <= pad:
                    near |= padded[pad + di: pad + di + self.n,
                                   pad + dj: pad + dj + self.n]
        self.cls[near & ~cutmask] = IRREGULAR

        self._number_dofs()

    def _pad_mixed(self, mask, pad):
        mode_x = "wrap" if self.periodic_x else "constant"
        out = np.pad(mask, ((pad, pad), (0, 0)), mode=mode_x)
        mode_y = "wrap" if self.periodic_y else "constant"
        return np.pad(out, ((0, 0), (pad, pad)), mode=mode_y)

    def _number_dofs(self):
        n = self.n
        self.dof_plus = -np.ones((n, n), dtype=np.int64)
        self.dof_minus = -np.ones((n, n), dtype=np.int64)
        info = []
        k = 0
        for j in range(n):
            for i in range(n):
                if self.cls[i, j] == CUT_CELL:
                    self.dof_plus[i, j] = k
                    info.append(((i, j), 1))
                    self.dof_minus[i, j] = k + 1
                    info.append(((i, j), -1))
                    k += 2
                elif self.phase[i, j] > 0:
                    self.dof_plus[i, j] = k
                    info.append(((i, j), 1))
                    k += 1
                else:
                    self.dof_minus[i, j] = k
                    info.append(((i, j), -1))
                    k += 1
        self.n_interior = k
        self.ghost_dof = {}
        self.ghost_list = []
        for cell in sorted(self.ghost_phase):
            self.ghost_dof[cell] = k
            self.ghost_list.append((cell, self.ghost_phase[cell], k))
            info.append((cell, self.ghost_phase[cell]))
            k += 1
        self.n_dofs = k
        self.dof_info = info

        vols = np.empty(self.n_interior)
        for d, (cell, phase) in enumerate(info[:self.n_interior]):
            vols[d] = self.volume(cell, phase)
        self.dof_volumes = vols

    # -- lookups --------------------------------------------------------------

    def center(self, i, j):
        return (self.lo[0] + (i + 0.5) * self.h,
                self.lo[1] + (j + 0.5) * self.h)

    def wrap(self, i, j):
        if self.periodic_x:
            i %= self.n
        if self.periodic_y:
            j %= self.n
        return i, j

    def cell_phase(self, cell) -> int:
        i, j = self.wrap(*cell)
        if self.cls[i, j] == CUT_CELL:
            raise MeshError(f"cell {cell} is cut; phase is ambiguous")
        return int(self.phase[i, j])

    def is_regular(self, cell) -> bool:
        i, j = self.wrap(*cell)
        if 0 <= i < self.n and 0 <= j < self.n:
            return self.cls[i, j] == REGULAR
        return False

    def classification(self, cell):
        i, j = self.wrap(*cell)
        if 0 <= i < self.n and 0 <= j < self.n:
            return int(self.cls[i, j])
        return None

    def volume(self, cell, phase) -> float:
        i, j = self.wrap(*cell)
        if (i, j) in self.cut:
            return self.cut[(i, j)].volume(phase)
        return self.h ** 2

    def dof(self, cell, phase) -> int:
        """Dof id of (cell, phase); -1 when that phase is absent there."""
        i, j = self.wrap(*cell)
        if 0 <= i < self.n and 0 <= j < self.n:
            d = self.dof_plus[i, j] if phase > 0 else self.dof_minus[i, j]
            return int(d)
        g = self.ghost_dof.get((i, j))
        if g is None or self.ghost_phase[(i, j)] != phase:
            return -1
        return g

    def face_id(self, cell, axis, side):
        """Canonical id of a face of `cell`: (axis, i, j) of the face whose
        +axis neighbor is (i, j)."""
        i, j = cell
        if axis == 0:
            fi, fj = (i if side < 0 else i + 1), j
            if self.periodic_x:
                fi %= self.n
        else:
            fi, fj = i, (j if side < 0 else j + 1)
            if self.periodic_y:
                fj %= self.n
        return (axis, fi, fj)

    def face_neighbor(self, cell, axis, side):
        """Interior cell across a face, or None if it is a ghost."""
        i, j = cell
        ni, nj = (i + side, j) if axis == 0 else (i, j + side)
        ni, nj = self.wrap(ni, nj)
        if 0 <= ni < self.n and 0 <= nj < self.n:
            return (ni, nj)
        return None

    # -- neighborhoods --------------------------------------------------------

    def neighborhood(self, cell, phase, P=None) -> Neighborhood:
        """Same-phase volumes in the (2P+1) x (2P+1) square around `cell`."""
        P = P or self.P
        ci, cj = cell
        members = []
        for dj in range(-P, P + 1):
            for di in range(-P, P + 1):
                ri, rj = self.wrap(ci + di, cj + dj)
                interior = 0 <= ri < self.n and 0 <= rj < self.n
                if interior:
                    if self.cls[ri, rj] == CUT_CELL:
                        members.append(Member(
                            cell=(ri, rj), phase=phase,
                            dof=self.dof((ri, rj), phase),
                            offset=(di, dj),
                            cut_geometry=self.cut[(ri, rj)]))
                    elif self.phase[ri, rj] == phase:
                        members.append(Member(
                            cell=(ri, rj), phase=phase,
                            dof=self.dof((ri, rj), phase),
                            offset=(di, dj), cut_geometry=None))
                else:
                    if self.ghost_phase.get((ri, rj)) == phase:
                        members.append(Member(
                            cell=(ri, rj), phase=phase,
                            dof=self.ghost_dof[(ri, rj)],
                            offset=(di, dj), cut_geometry=None, ghost=True))
        ncols = len(enumerate_indices(P))
        if len(members) < ncols:
            raise InsufficientNeighbors(
                f"cell {cell} phase {phase}: {len(members)} members "
                f"< {ncols} columns")
        deltas = np.array([np.hypot(*m.offset) for m in members])
        return Neighborhood(cell=cell, phase=phase, members=members,
                            deltas=deltas)

    # -- reporting --------------------------------------------------------------

    def summary(self) -> dict:
        return {
            "n": self.n,
            "h": self.h,
            "order": self.P,
            "regular": int(np.sum(self.cls == REGULAR)),
            "irregular": int(np.sum(self.cls == IRREGULAR)),
            "cut": int(np.sum(self.cls == CUT_CELL)),
            "interior_dofs": self.n_interior,
            "ghost_dofs": len(self.ghost_dof),
        }

    def write_summary(self, path):
        s = self.summary()
        path = str(path)
        if path.endswith(".json"):
            with open(path, "w") as fh:
                json.dump(s, fh, indent=1)
        else:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(list(s))
                w.writerow([s[k] for k in s])


def build_mesh(psi, domain, n, P, bc="periodic") -> Mesh:
    """Build and classify the mesh; geometry generated to order 2P."""
    return Mesh(psi, domain, n, P, bc=bc)
