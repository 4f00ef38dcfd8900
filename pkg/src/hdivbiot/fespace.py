"""Finite element spaces on uniform Cartesian meshes.

Two families are provided:

``RT``
    Raviart-Thomas space of index ``k`` on squares, local shape space
    ``Q_{k+1,k} x Q_{k,k+1}`` (dimension ``2(k+1)(k+2)``). The basis is nodal:
    the x-component is a tensor product of degree ``k+1`` Lagrange polynomials
    on Gauss-Lobatto nodes in ``x`` with degree ``k`` Lagrange polynomials on
    Gauss nodes in ``y`` (and the y-component the other way round). The nodes
    on ``x = 0, 1`` carry the normal trace, so sharing those values across a
    face gives normal continuity.
``DQ``
    Discontinuous tensor-product polynomials of degree ``k`` with Lagrange
    basis on the ``(k+1)^2`` Gauss points of each cell.

Since all cells are congruent squares of side ``h`` the map from the reference
square is ``x = x0 + h * xhat`` and fields are pulled back by composition.
For RT this is the contravariant Piola transform up to the constant factor
``1/h``, which only rescales the basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Literal

import numpy as np
from numpy.polynomial import legendre

from .mesh import INTERIOR, DisplacementBC, Mesh, PressureBC

Family = Literal["RT", "DQ"]
Constraint = Literal["pN", "uD"] | None

MAX_DEGREE = 3


# -- quadrature ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Tensor Gauss rule on ``[0, 1]^2`` plus the matching rule on ``[0, 1]``."""

    order: int
    points: np.ndarray
    weights: np.ndarray
    face_points: np.ndarray
    face_weights: np.ndarray


@lru_cache(maxsize=None)
def gauss_rule(order: int) -> QuadratureRule:
    """Gauss-Legendre rule exact for polynomials of degree ``order`` per variable."""
    if order < 0:
        raise ValueError("quadrature order must be non-negative")
    npts = order // 2 + 1
    x, w = legendre.leggauss(npts)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    X, Y = np.meshgrid(x, x, indexing="xy")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    wts = np.outer(w, w).ravel()
    for a in (x, w, pts, wts):
        a.setflags(write=False)
    return QuadratureRule(order, pts, wts, x, w)


def default_rule(k: int) -> QuadratureRule:
    return gauss_rule(2 * k + 3)


# -- 1D Lagrange bases --------------------------------------------------------


def gauss_nodes(n: int) -> np.ndarray:
    return 0.5 * (legendre.leggauss(n)[0] + 1.0)


def lobatto_nodes(n: int) -> np.ndarray:
    """``n >= 2`` Gauss-Lobatto nodes on [0, 1]."""
    inner = legendre.Legendre.basis(n - 1).deriv().roots() if n > 2 else np.array([])
    return np.concatenate([[0.0], 0.5 * (np.sort(inner.real) + 1.0), [1.0]])


def lagrange_1d(nodes: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values and derivatives of the Lagrange basis on ``nodes`` at ``x``.

    Both arrays have shape ``(len(x), len(nodes))``.
    """
    x = np.asarray(x, dtype=float)
    m = len(nodes)
    val = np.ones((len(x), m))
    der = np.zeros((len(x), m))
    for i in range(m):
        others = [j for j in range(m) if j != i]
        denom = np.prod([nodes[i] - nodes[j] for j in others]) if others else 1.0
        factors = np.stack([x - nodes[j] for j in others], axis=1) if others else np.ones((len(x), 0))
        val[:, i] = np.prod(factors, axis=1) / denom
        for a in range(len(others)):
            rest = np.delete(factors, a, axis=1)
            der[:, i] += np.prod(rest, axis=1) / denom
    return val, der


# -- reference elements -------------------------------------------------------


@dataclass(frozen=True)
class ReferenceElement:
    family: Family
    degree: int

    @property
    def n_local(self) -> int:
        k = self.degree
        if self.family == "RT":
            return 2 * (k + 1) * (k + 2)
        return (k + 1) ** 2

    @property
    def dofs_per_face(self) -> int:
        return self.degree + 1 if self.family == "RT" else 0

    @property
    def n_interior(self) -> int:
        return self.n_local - 4 * self.dofs_per_face

    @cached_property
    def lobatto(self) -> np.ndarray:
        return lobatto_nodes(self.degree + 2)

    @cached_property
    def gauss(self) -> np.ndarray:
        return gauss_nodes(self.degree + 1)

    @cached_property
    def _rt_layout(self) -> list[tuple[int, int, int]]:
        """(component, lobatto index, gauss index) for each local RT dof."""
        k = self.degree
        lay = []
        lay += [(0, 0, j) for j in range(k + 1)]  # left face
        lay += [(0, k + 1, j) for j in range(k + 1)]  # right face
        lay += [(1, 0, i) for i in range(k + 1)]  # bottom face
        lay += [(1, k + 1, i) for i in range(k + 1)]  # top face
        lay += [(0, a, j) for a in range(1, k + 1) for j in range(k + 1)]
        lay += [(1, b, i) for b in range(1, k + 1) for i in range(k + 1)]
        return lay

    def nodes(self) -> np.ndarray:
        """Reference node of every local dof; for RT also the component."""
        if self.family == "DQ":
            g = self.gauss
            X, Y = np.meshgrid(g, g, indexing="xy")
            return np.stack([X.ravel(), Y.ravel()], 1)
        out = np.zeros((self.n_local, 3))
        for d, (c, a, b) in enumerate(self._rt_layout):
            if c == 0:
                out[d] = (self.lobatto[a], self.gauss[b], 0)
            else:
                out[d] = (self.gauss[b], self.lobatto[a], 1)
        return out

    def evaluate(self, pts: np.ndarray):
        """Reference tabulation at points of ``[0, 1]^2``.

        RT returns ``(values, grads, divs)`` with shapes ``(np, nloc, 2)``,
        ``(np, nloc, 2, 2)`` (``grads[..., c, d] = d v_c / d x_d``) and
        ``(np, nloc)``. DQ returns ``(values, grads)`` with shapes
        ``(np, nloc)`` and ``(np, nloc, 2)``.
        """
        pts = np.atleast_2d(pts)
        x, y = pts[:, 0], pts[:, 1]
        if self.family == "DQ":
            vx, dx = lagrange_1d(self.gauss, x)
            vy, dy = lagrange_1d(self.gauss, y)
            # local index = b * (k+1) + a  (x fastest)
            val = np.einsum("pb,pa->pba", vy, vx).reshape(len(x), -1)
            gx = np.einsum("pb,pa->pba", vy, dx).reshape(len(x), -1)
            gy = np.einsum("pb,pa->pba", dy, vx).reshape(len(x), -1)
            return val, np.stack([gx, gy], axis=-1)

        Lx, dLx = lagrange_1d(self.lobatto, x)
        Ly, dLy = lagrange_1d(self.lobatto, y)
        Mx, dMx = lagrange_1d(self.gauss, x)
        My, dMy = lagrange_1d(self.gauss, y)
        npnt = len(x)
        val = np.zeros((npnt, self.n_local, 2))
        grad = np.zeros((npnt, self.n_local, 2, 2))
        for d, (c, a, b) in enumerate(self._rt_layout):
            if c == 0:
                val[:, d, 0] = Lx[:, a] * My[:, b]
                grad[:, d, 0, 0] = dLx[:, a] * My[:, b]
                grad[:, d, 0, 1] = Lx[:, a] * dMy[:, b]
            else:
                val[:, d, 1] = Mx[:, b] * Ly[:, a]
                grad[:, d, 1, 0] = dMx[:, b] * Ly[:, a]
                grad[:, d, 1, 1] = Mx[:, b] * dLy[:, a]
        div = grad[:, :, 0, 0] + grad[:, :, 1, 1]
        return val, grad, div


# local face numbering: 0 left, 1 right, 2 bottom, 3 top
LOCAL_FACE_AXIS = (0, 0, 1, 1)


def local_face_points(lf: int, s: np.ndarray) -> np.ndarray:
    """Map a face parameter ``s`` in [0, 1] to the reference square."""
    s = np.asarray(s, dtype=float)
    const = 0.0 if lf in (0, 2) else 1.0
    if LOCAL_FACE_AXIS[lf] == 0:
        return np.stack([np.full_like(s, const), s], 1)
    return np.stack([s, np.full_like(s, const)], 1)


# -- global spaces ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FESpace:
    """Global space on a mesh.

    ``cell_dofs[c]`` lists the global dofs of cell ``c`` in local order.
    ``face_dofs[f]`` (RT only) lists the ``k+1`` dofs of face ``f`` ordered by
    the tangential coordinate. ``constrained`` marks normal-trace dofs that
    are forced to a prescribed value.
    """

    mesh: Mesh
    element: ReferenceElement
    n_dofs: int
    cell_dofs: np.ndarray
    face_dofs: np.ndarray | None
    constrained: np.ndarray
    constraint: Constraint = None

    @property
    def family(self) -> Family:
        return self.element.family

    @property
    def degree(self) -> int:
        return self.element.degree

    @property
    def free_dofs(self) -> np.ndarray:
        return np.flatnonzero(~self.constrained)


def rt_dof_count(n: int, k: int) -> int:
    return (k + 1) * 2 * n * (n + 1) + 2 * k * (k + 1) * n * n


def dq_dof_count(n: int, k: int) -> int:
    return (k + 1) ** 2 * n * n


def make_dq_space(mesh: Mesh, degree: int) -> FESpace:
    """DQ space without degree validation; ``build_space`` is the checked entry."""
    el = ReferenceElement("DQ", degree)
    nloc = el.n_local
    cell_dofs = np.arange(mesh.n_cells * nloc).reshape(mesh.n_cells, nloc)
    return FESpace(mesh, el, mesh.n_cells * nloc, cell_dofs, None, np.zeros(mesh.n_cells * nloc, bool))


def _make_rt_space(mesh: Mesh, degree: int, constraint: Constraint) -> FESpace:
    el = ReferenceElement("RT", degree)
    nf = el.dofs_per_face
    face_dofs = np.arange(mesh.n_faces * nf).reshape(mesh.n_faces, nf)
    n_face_total = mesh.n_faces * nf
    ni = el.n_interior
    interior = n_face_total + np.arange(mesh.n_cells * ni).reshape(mesh.n_cells, ni)
    cell_dofs = np.concatenate([face_dofs[mesh.cell_faces].reshape(mesh.n_cells, 4 * nf), interior], 1)
    n_dofs = n_face_total + mesh.n_cells * ni

    constrained = np.zeros(n_dofs, bool)
    if constraint is not None:
        if mesh.pressure_tag is None:
            raise ValueError("constraint requested on a mesh without boundary tags")
        bnd = mesh.face_side != INTERIOR
        if constraint == "pN":
            sel = bnd & (mesh.pressure_tag == PressureBC.NEUMANN)
        elif constraint == "uD":
            sel = bnd & (mesh.displacement_tag == DisplacementBC.DIRICHLET)
        else:
            raise ValueError(f"unknown constraint {constraint!r}")
        constrained[face_dofs[sel].ravel()] = True
    for a in (face_dofs, cell_dofs, constrained):
        a.setflags(write=False)
    return FESpace(mesh, el, n_dofs, cell_dofs, face_dofs, constrained, constraint)


def build_space(mesh: Mesh, family: Family, degree: int, constraint: Constraint = None) -> FESpace:
    """Build an ``RT_k`` or ``DQ_k`` space, ``1 <= k <= 3``.

    ``constraint`` applies to RT only: ``"pN"`` zeroes the normal trace on
    pressure-Neumann faces (the seepage space), ``"uD"`` on displacement
    Dirichlet faces.
    """
    if family not in ("RT", "DQ"):
        raise ValueError(f"unknown element family {family!r}")
    if not 1 <= degree <= MAX_DEGREE:
        raise ValueError(f"degree must lie in [1, {MAX_DEGREE}], got {degree}")
    if family == "DQ":
        if constraint is not None:
            raise ValueError("DQ spaces carry no boundary constraint")
        return make_dq_space(mesh, degree)
    return _make_rt_space(mesh, degree, constraint)


# -- tabulation ---------------------------------------------------------------


@dataclass(frozen=True)
class CellTables:
    """Physical tabulation on one cell (or on all cells when broadcast)."""

    points: np.ndarray
    JxW: np.ndarray
    values: np.ndarray
    grads: np.ndarray
    divs: np.ndarray | None
    dofs: np.ndarray


@dataclass(frozen=True)
class FaceTables:
    points: np.ndarray
    JxW: np.ndarray
    values: np.ndarray
    normal: np.ndarray
    sym_grad_n: np.ndarray
    grads: np.ndarray
    dofs: np.ndarray


@lru_cache(maxsize=64)
def _reference_cell_tables(element: ReferenceElement, rule: QuadratureRule):
    return element.evaluate(rule.points)


@lru_cache(maxsize=64)
def _reference_face_tables(element: ReferenceElement, rule: QuadratureRule, lf: int):
    return element.evaluate(local_face_points(lf, rule.face_points))


def reference_cell_tables(space: FESpace, rule: QuadratureRule):
    """Physical tables shared by every cell: values, grads and (RT) divs."""
    h = space.mesh.h
    tab = _reference_cell_tables(space.element, rule)
    if space.family == "RT":
        val, grad, div = tab
        return val, grad / h, div / h
    val, grad = tab
    return val, grad / h, None


def reference_face_tables(space: FESpace, rule: QuadratureRule, lf: int):
    h = space.mesh.h
    tab = _reference_face_tables(space.element, rule, lf)
    if space.family == "RT":
        val, grad, _ = tab
        return val, grad / h
    val, grad = tab
    return val, grad / h


def cell_quadrature_points(mesh: Mesh, rule: QuadratureRule) -> np.ndarray:
    """Physical quadrature points, shape ``(n_cells, nq, 2)``."""
    return mesh.cell_origin[:, None, :] + mesh.h * rule.points[None, :, :]


def face_quadrature_points(mesh: Mesh, rule: QuadratureRule, faces: np.ndarray | None = None) -> np.ndarray:
    """Physical face quadrature points, shape ``(n_sel, nqf, 2)``."""
    faces = np.arange(mesh.n_faces) if faces is None else np.asarray(faces)
    origin = mesh.face_origin[faces]
    tang = np.zeros((len(faces), 2))
    tang[np.arange(len(faces)), 1 - mesh.face_axis[faces]] = 1.0
    return origin[:, None, :] + mesh.h * rule.face_points[None, :, None] * tang[:, None, :]


def tabulate(space: FESpace, cell: int, rule: QuadratureRule | None = None) -> CellTables:
    """Basis values, gradients and divergences on one cell."""
    mesh = space.mesh
    if not 0 <= cell < mesh.n_cells:
        raise IndexError(f"cell {cell} out of range")
    rule = rule or default_rule(space.degree)
    val, grad, div = reference_cell_tables(space, rule)
    pts = mesh.cell_origin[cell] + mesh.h * rule.points
    return CellTables(pts, rule.weights * mesh.h**2, val, grad, div, space.cell_dofs[cell])


def local_face_index(mesh: Mesh, cell: int, face: int) -> int:
    hit = np.flatnonzero(mesh.cell_faces[cell] == face)
    if len(hit) != 1:
        raise ValueError(f"face {face} does not belong to cell {cell}")
    return int(hit[0])


def trace_eval(space: FESpace, face: int, side: int, rule: QuadratureRule | None = None) -> FaceTables:
    """One-sided traces on ``face`` from ``T-`` (``side=0``) or ``T+`` (``side=1``).

    Normal quantities use the lattice normal ``n_F`` (``+x`` or ``+y``).
    """
    mesh = space.mesh
    if not 0 <= face < mesh.n_faces:
        raise IndexError(f"face {face} out of range")
    if side not in (0, 1):
        raise ValueError("side must be 0 (T-) or 1 (T+)")
    cell = mesh.face_cells[face, side]
    if cell < 0:
        raise ValueError(f"face {face} is on the boundary and has no T+ side")
    rule = rule or default_rule(space.degree)
    lf = local_face_index(mesh, cell, face)
    val, grad = reference_face_tables(space, rule, lf)
    nF = mesh.face_normal(face)
    pts = face_quadrature_points(mesh, rule, [face])[0]
    if space.family == "RT":
        normal = val @ nF
        sym = 0.5 * (grad + np.swapaxes(grad, -1, -2))
        sym_n = sym @ nF
    else:
        normal = val
        sym_n = grad @ nF
    return FaceTables(pts, rule.face_weights * mesh.h, val, normal, sym_n, grad, space.cell_dofs[cell])


# -- evaluation, interpolation, projection -----------------------------------


def evaluate(space: FESpace, coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Point values of a discrete field; on cell boundaries the lower cell wins."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    mesh = space.mesh
    cells = mesh.locate(points)
    ref = (points - mesh.cell_origin[cells]) / mesh.h
    tab = space.element.evaluate(ref)
    c = np.asarray(coeffs)[space.cell_dofs[cells]]
    if space.family == "RT":
        return np.einsum("pi,pic->pc", c, tab[0])
    return np.einsum("pi,pi->p", c, tab[0])


def values_at_quadrature(space: FESpace, coeffs: np.ndarray, rule: QuadratureRule, what: str = "value") -> np.ndarray:
    """Field values (``what`` in value/grad/div) at all cell quadrature points."""
    val, grad, div = reference_cell_tables(space, rule)
    c = np.asarray(coeffs)[space.cell_dofs]
    table = {"value": val, "grad": grad, "div": div}[what]
    if table is None:
        raise ValueError(f"{what} not available for {space.family}")
    return np.tensordot(c, table, axes=([1], [1]))


def interpolate(space: FESpace, fn: Callable, t: float = 0.0) -> np.ndarray:
    """Nodal interpolant; exact for members of the space.

    ``fn(x, y, t)`` returns a scalar array for DQ and an array with trailing
    dimension 2 for RT.
    """
    mesh = space.mesh
    nodes = space.element.nodes()
    out = np.zeros(space.n_dofs)
    pts = mesh.cell_origin[:, None, :] + mesh.h * nodes[None, :, :2]
    vals = np.asarray(fn(pts[..., 0], pts[..., 1], t), dtype=float)
    if space.family == "RT":
        comp = nodes[:, 2].astype(int)
        vals = np.take_along_axis(vals, comp[None, :, None], axis=2)[..., 0]
    else:
        vals = np.broadcast_to(vals, pts.shape[:2])
    out[space.cell_dofs] = vals
    return out


@lru_cache(maxsize=32)
def _dq_local_mass_inverse(element: ReferenceElement, rule: QuadratureRule) -> np.ndarray:
    val, _ = element.evaluate(rule.points)
    m = np.einsum("q,qi,qj->ij", rule.weights, val, val)
    return np.linalg.inv(m)


def project_l2(space: FESpace, fn: Callable, t: float = 0.0, rule: QuadratureRule | None = None) -> np.ndarray:
    """Cellwise L2 projection of a scalar function onto a DQ space."""
    if space.family != "DQ":
        raise ValueError("project_l2 expects a DQ space")
    rule = rule or default_rule(space.degree)
    pts = cell_quadrature_points(space.mesh, rule)
    f = np.broadcast_to(np.asarray(fn(pts[..., 0], pts[..., 1], t), dtype=float), pts.shape[:2])
    val, _ = _reference_cell_tables(space.element, rule)
    load = np.einsum("cq,q,qi->ci", f, rule.weights, val)
    minv = _dq_local_mass_inverse(space.element, rule)
    out = np.zeros(space.n_dofs)
    out[space.cell_dofs] = load @ minv.T
    return out


def l2_norm_at_quadrature(mesh: Mesh, rule: QuadratureRule, values: np.ndarray) -> float:
    """L2 norm of a field given at all cell quadrature points.

    ``values`` has shape ``(n_cells, nq, ...)``; trailing axes are summed
    as squares.
    """
    sq = np.asarray(values) ** 2
    sq = sq.reshape(sq.shape[0], sq.shape[1], -1).sum(-1)
    return float(np.sqrt(np.sum(sq * rule.weights[None, :]) * mesh.h**2))


# -- div-compatibility --------------------------------------------------------


@dataclass(frozen=True)
class DivCompatReport:
    max_residual: float
    residuals: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_residual <= 1e-13


def check_div_compat(W: FESpace, Q: FESpace, rule: QuadratureRule | None = None) -> DivCompatReport:
    """Relative L2 residual of ``div phi - P_Q div phi`` for every RT basis function.

    Every global basis function restricted to a cell is a scaled local basis
    function of that cell, so the residual is computed cellwise for all
    cells and the worst value per local function is reported.
    """
    if W.mesh is not Q.mesh and W.mesh.level != Q.mesh.level:
        raise ValueError("spaces live on different meshes")
    rule = rule or default_rule(max(W.degree, Q.degree))
    _, _, div = reference_cell_tables(W, rule)
    qval, _, _ = reference_cell_tables(Q, rule)
    JxW = rule.weights * W.mesh.h**2
    mass = np.einsum("q,qi,qj->ij", JxW, qval, qval)
    load = np.einsum("q,qi,qd->di", JxW, qval, div)
    coeffs = np.linalg.solve(mass, load.T).T
    resid = div - qval @ coeffs.T
    num = np.sqrt(np.einsum("q,qd->d", JxW, resid**2))
    den = np.sqrt(np.einsum("q,qd->d", JxW, div**2))
    rel = np.where(den > 0, num / np.where(den > 0, den, 1.0), num)
    # identical on all cells: spread to the global basis count
    per_cell = np.broadcast_to(rel, (W.mesh.n_cells, len(rel)))
    return DivCompatReport(float(per_cell.max()), rel)
