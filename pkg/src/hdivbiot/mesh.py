"""Uniform Cartesian meshes of the unit square and boundary classification.

Cells are numbered row-major, ``cell = j * n + i`` with ``(i, j)`` the lattice
position of the lower-left corner. Faces come in two groups: vertical faces
(normal ``+x``) first, then horizontal faces (normal ``+y``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

MAX_LEVEL = 12

SIDES = ("left", "right", "bottom", "top")
# outward normal per side
SIDE_NORMALS = {
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "bottom": (0.0, -1.0),
    "top": (0.0, 1.0),
}

INTERIOR = -1


class PressureBC(enum.IntEnum):
    DIRICHLET = 0
    NEUMANN = 1


class DisplacementBC(enum.IntEnum):
    DIRICHLET = 0
    NEUMANN = 1
    SLIP = 2


@dataclass(frozen=True)
class BoundarySpec:
    """Pressure and displacement condition for each side of the square.

    ``sides`` maps a side name to a ``(PressureBC, DisplacementBC)`` pair.
    """

    sides: Mapping[str, tuple[PressureBC, DisplacementBC]]

    @classmethod
    def uniform(cls, pressure: PressureBC, displacement: DisplacementBC) -> "BoundarySpec":
        return cls({s: (pressure, displacement) for s in SIDES})

    def validate(self) -> None:
        missing = [s for s in SIDES if s not in self.sides]
        if missing:
            raise ValueError(f"boundary spec leaves sides untagged: {missing}")
        unknown = [s for s in self.sides if s not in SIDES]
        if unknown:
            raise ValueError(f"unknown sides in boundary spec: {unknown}")
        for s, (pt, dt) in self.sides.items():
            PressureBC(pt)
            DisplacementBC(dt)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Structured ``n x n`` subdivision of ``(0, 1)^2``.

    Attributes
    ----------
    level : int
        Refinement level; ``n = 2**level``.
    cell_origin : ndarray, shape (n_cells, 2)
        Lower-left corner of every cell.
    face_axis : ndarray, shape (n_faces,)
        0 for faces with normal ``+x``, 1 for normal ``+y``.
    face_cells : ndarray, shape (n_faces, 2)
        ``(T-, T+)`` for interior faces; for boundary faces the single
        adjacent cell sits in column 0 and column 1 holds ``-1``.
    face_side : ndarray, shape (n_faces,)
        Index into ``SIDES`` for boundary faces, ``-1`` for interior faces.
    face_origin : ndarray, shape (n_faces, 2)
        Start point of the face; the face extends by ``h`` along the
        tangential axis.
    """

    level: int
    n: int
    h: float
    cell_origin: np.ndarray
    face_axis: np.ndarray
    face_cells: np.ndarray
    face_side: np.ndarray
    face_origin: np.ndarray
    cell_faces: np.ndarray
    pressure_tag: np.ndarray = field(default=None)
    displacement_tag: np.ndarray = field(default=None)
    boundary: BoundarySpec | None = None

    @property
    def n_cells(self) -> int:
        return self.n * self.n

    @property
    def n_faces(self) -> int:
        return len(self.face_axis)

    @property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_side == INTERIOR)

    @property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_side != INTERIOR)

    def faces_on_side(self, side: str) -> np.ndarray:
        return np.flatnonzero(self.face_side == SIDES.index(side))

    def outward_normal(self, face: int) -> np.ndarray:
        s = self.face_side[face]
        if s == INTERIOR:
            raise ValueError(f"face {face} is interior")
        return np.array(SIDE_NORMALS[SIDES[s]])

    def face_normal(self, face: int) -> np.ndarray:
        n = np.zeros(2)
        n[self.face_axis[face]] = 1.0
        return n

    def locate(self, points: np.ndarray) -> np.ndarray:
        """Index of the cell containing each point (closed on the upper side)."""
        ij = np.clip(np.floor(np.asarray(points) * self.n).astype(int), 0, self.n - 1)
        return ij[..., 1] * self.n + ij[..., 0]


def build_cartesian_mesh(level: int) -> Mesh:
    """Mesh with ``4**level`` congruent square cells of side ``2**-level``."""
    if not isinstance(level, (int, np.integer)) or isinstance(level, bool):
        raise TypeError(f"level must be an integer, got {level!r}")
    if level < 0 or level > MAX_LEVEL:
        raise ValueError(f"level must lie in [0, {MAX_LEVEL}], got {level}")
    n = 2**level
    h = 1.0 / n

    jj, ii = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    cell_origin = np.stack([ii.ravel() * h, jj.ravel() * h], axis=1)

    n_vert = n * (n + 1)
    # vertical faces: position i = 0..n along x, row j = 0..n-1
    vj, vi = np.meshgrid(np.arange(n), np.arange(n + 1), indexing="ij")
    vi, vj = vi.ravel(), vj.ravel()
    # horizontal faces: column i = 0..n-1, position j = 0..n along y
    hj, hi = np.meshgrid(np.arange(n + 1), np.arange(n), indexing="ij")
    hi, hj = hi.ravel(), hj.ravel()

    face_axis = np.concatenate([np.zeros(n_vert, int), np.ones(n_vert, int)])
    face_origin = np.concatenate(
        [np.stack([vi * h, vj * h], 1), np.stack([hi * h, hj * h], 1)]
    )

    def vcells(i, j):
        minus = np.where(i > 0, j * n + i - 1, -1)
        plus = np.where(i < n, j * n + i, -1)
        return minus, plus

    def hcells(i, j):
        minus = np.where(j > 0, (j - 1) * n + i, -1)
        plus = np.where(j < n, j * n + i, -1)
        return minus, plus

    vm, vp = vcells(vi, vj)
    hm, hp = hcells(hi, hj)
    minus = np.concatenate([vm, hm])
    plus = np.concatenate([vp, hp])

    side = np.full(2 * n_vert, INTERIOR)
    side[:n_vert][vi == 0] = SIDES.index("left")
    side[:n_vert][vi == n] = SIDES.index("right")
    side[n_vert:][hj == 0] = SIDES.index("bottom")
    side[n_vert:][hj == n] = SIDES.index("top")

    # boundary faces keep their only cell in column 0
    only_plus = minus < 0
    face_cells = np.stack([np.where(only_plus, plus, minus), np.where(only_plus, -1, plus)], 1)

    ci = np.arange(n * n) % n
    cj = np.arange(n * n) // n
    cell_faces = np.stack(
        [
            cj * (n + 1) + ci,  # left
            cj * (n + 1) + ci + 1,  # right
            n_vert + cj * n + ci,  # bottom
            n_vert + (cj + 1) * n + ci,  # top
        ],
        axis=1,
    )

    for arr in (cell_origin, face_axis, face_cells, side, face_origin, cell_faces):
        arr.setflags(write=False)

    return Mesh(
        level=int(level),
        n=n,
        h=h,
        cell_origin=cell_origin,
        face_axis=face_axis,
        face_cells=face_cells,
        face_side=side,
        face_origin=face_origin,
        cell_faces=cell_faces,
    )


def classify_boundary(mesh: Mesh, spec: BoundarySpec) -> Mesh:
    """Return a copy of ``mesh`` whose boundary faces carry both BC tags."""
    spec.validate()
    ptag = np.full(mesh.n_faces, INTERIOR)
    dtag = np.full(mesh.n_faces, INTERIOR)
    for s, (pt, dt) in spec.sides.items():
        faces = mesh.faces_on_side(s)
        ptag[faces] = int(pt)
        dtag[faces] = int(dt)
    ptag.setflags(write=False)
    dtag.setflags(write=False)
    return replace(mesh, pressure_tag=ptag, displacement_tag=dtag, boundary=spec)
