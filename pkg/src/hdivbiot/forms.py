"""Bilinear forms and load functionals of the H(div) Biot discretisation.

All cells are congruent, so every volume form is one local matrix scattered
over all cells, and every face form is one local matrix per face orientation
(interior vertical, interior horizontal, and one per boundary side).

Data functions follow the signature ``f(x, y, t)`` with ``x, y`` arrays of
equal shape; vector data return an array with a trailing axis of length 2.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .fespace import (
    FESpace,
    QuadratureRule,
    cell_quadrature_points,
    default_rule,
    face_quadrature_points,
    reference_cell_tables,
    reference_face_tables,
)
from .mesh import INTERIOR, SIDE_NORMALS, SIDES, BoundarySpec, DisplacementBC, Mesh, PressureBC

DataFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]

# boundary side -> local face index of the adjacent cell
SIDE_LOCAL_FACE = {"left": 0, "right": 1, "bottom": 2, "top": 3}


def default_penalty(k: int) -> float:
    return 4.0 * (k + 1) * (k + 2)


def minimum_penalty(k: int) -> float:
    """Guard value below which coercivity is not trusted (measured, see tests)."""
    return 1.0 * (k + 1) * (k + 2)


@dataclass
class BiotProblem:
    """Material parameters, boundary assignment and data of one Biot run.

    Missing data functions are treated as zero. ``u0``/``grad_u0`` describe
    the initial displacement, ``p0`` the initial pressure.
    """

    boundary: BoundarySpec
    c_s: float = 0.0
    alpha: float = 1.0
    lam: float = 1.0
    mu: float = 1.0
    K: np.ndarray = field(default_factory=lambda: np.eye(2))
    gamma: float | None = None
    f1: DataFn | None = None
    f2: DataFn | None = None
    p_D: DataFn | None = None
    u_D: DataFn | None = None
    sigma_N: DataFn | None = None
    p0: DataFn | None = None
    u0: DataFn | None = None
    grad_u0: DataFn | None = None

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        if self.K.shape != (2, 2) or not np.allclose(self.K, self.K.T):
            raise ValueError("permeability K must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(self.K).min() <= 0:
            raise ValueError("permeability K must be positive definite")
        if self.c_s < 0:
            raise ValueError(f"storage coefficient c_s must be >= 0, got {self.c_s}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"Biot-Willis constant must lie in (0, 1], got {self.alpha}")
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError(f"penalty must be positive, got {self.gamma}")
        if (self.u0 is None) != (self.grad_u0 is None):
            raise ValueError("u0 and grad_u0 must be given together")
        self.boundary.validate()

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    def penalty(self, k: int) -> float:
        return default_penalty(k) if self.gamma is None else float(self.gamma)


@dataclass
class SystemBlocks:
    """Assembled blocks; ``B_u`` is stored without the factor alpha."""

    Q: FESpace
    W: FESpace
    V: FESpace
    M_p: sp.csr_matrix
    M_w: sp.csr_matrix
    B_w: sp.csr_matrix
    B_u: sp.csr_matrix
    A_u: sp.csr_matrix


# -- scatter helpers ----------------------------------------------------------


def _scatter(local: np.ndarray, row_dofs: np.ndarray, col_dofs: np.ndarray, shape) -> sp.csr_matrix:
    """Sum local matrices into a global CSR matrix.

    ``local`` is ``(nr, nc)`` (shared by all entities) or ``(ne, nr, nc)``.
    """
    ne = row_dofs.shape[0]
    local = np.broadcast_to(local, (ne,) + local.shape[-2:])
    rows = np.broadcast_to(row_dofs[:, :, None], local.shape)
    cols = np.broadcast_to(col_dofs[:, None, :], local.shape)
    m = sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=shape)
    m = m.tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def _scatter_vector(local: np.ndarray, dofs: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(dofs.ravel(), weights=local.ravel(), minlength=n)


def _sym(grad: np.ndarray) -> np.ndarray:
    return 0.5 * (grad + np.swapaxes(grad, -1, -2))


def _eval(fn: DataFn | None, pts: np.ndarray, t: float, vector: bool) -> np.ndarray:
    shape = pts.shape[:-1] + ((2,) if vector else ())
    if fn is None:
        return np.zeros(shape)
    return np.broadcast_to(np.asarray(fn(pts[..., 0], pts[..., 1], t), dtype=float), shape)


def _tangent(normal) -> np.ndarray:
    return np.array([-normal[1], normal[0]], dtype=float)


def _side_faces(mesh: Mesh, side: str) -> tuple[np.ndarray, np.ndarray]:
    faces = mesh.faces_on_side(side)
    return faces, mesh.face_cells[faces, 0]


def _require_tags(mesh: Mesh):
    if mesh.pressure_tag is None:
        raise ValueError("mesh has no boundary tags; call classify_boundary first")


# -- volume forms -------------------------------------------------------------


def assemble_darcy_mass(problem: BiotProblem, W: FESpace, rule: QuadratureRule | None = None) -> sp.csr_matrix:
    """Matrix of ``(K^{-1} w, z)``."""
    rule = rule or default_rule(W.degree)
    val, _, _ = reference_cell_tables(W, rule)
    JxW = rule.weights * W.mesh.h**2
    local = np.einsum("q,qic,cd,qjd->ij", JxW, val, problem.K_inv, val)
    return _scatter(local, W.cell_dofs, W.cell_dofs, (W.n_dofs, W.n_dofs))


def assemble_pressure_mass(Q: FESpace, rule: QuadratureRule | None = None) -> sp.csr_matrix:
    rule = rule or default_rule(Q.degree)
    val, _, _ = reference_cell_tables(Q, rule)
    JxW = rule.weights * Q.mesh.h**2
    local = np.einsum("q,qi,qj->ij", JxW, val, val)
    return _scatter(local, Q.cell_dofs, Q.cell_dofs, (Q.n_dofs, Q.n_dofs))


def assemble_div(V: FESpace, Q: FESpace, rule: QuadratureRule | None = None) -> sp.csr_matrix:
    """Matrix of ``(div v, q)`` with rows indexed by ``Q`` and columns by ``V``."""
    if V.mesh.level != Q.mesh.level:
        raise ValueError("spaces live on different meshes")
    rule = rule or default_rule(max(V.degree, Q.degree))
    _, _, div = reference_cell_tables(V, rule)
    qval, _, _ = reference_cell_tables(Q, rule)
    JxW = rule.weights * V.mesh.h**2
    local = np.einsum("q,qi,qj->ij", JxW, qval, div)
    return _scatter(local, Q.cell_dofs, V.cell_dofs, (Q.n_dofs, V.n_dofs))


def assemble_divdiv(V: FESpace, rule: QuadratureRule | None = None) -> sp.csr_matrix:
    rule = rule or default_rule(V.degree)
    _, _, div = reference_cell_tables(V, rule)
    JxW = rule.weights * V.mesh.h**2
    local = np.einsum("q,qi,qj->ij", JxW, div, div)
    return _scatter(local, V.cell_dofs, V.cell_dofs, (V.n_dofs, V.n_dofs))


# -- interior penalty elasticity ----------------------------------------------


def _interior_face_tables(V: FESpace, rule: QuadratureRule, axis: int):
    """Jump and average-of-``D(v) n_F`` tables on interior faces of one orientation.

    Returns ``(faces, dofs, jump, avg)`` where ``jump``/``avg`` have shape
    ``(nqf, 2 * nloc, 2)`` over the concatenated ``[T-, T+]`` local dofs.
    """
    mesh = V.mesh
    faces = np.flatnonzero((mesh.face_side == INTERIOR) & (mesh.face_axis == axis))
    lf_minus, lf_plus = (1, 0) if axis == 0 else (3, 2)
    nF = np.zeros(2)
    nF[axis] = 1.0
    vm, gm = reference_face_tables(V, rule, lf_minus)
    vp, gp = reference_face_tables(V, rule, lf_plus)
    jump = np.concatenate([vm, -vp], axis=1)
    avg = 0.5 * np.concatenate([_sym(gm) @ nF, _sym(gp) @ nF], axis=1)
    dofs = np.concatenate([V.cell_dofs[mesh.face_cells[faces, 0]], V.cell_dofs[mesh.face_cells[faces, 1]]], axis=1)
    return faces, dofs, jump, avg


def _boundary_tables(V: FESpace, rule: QuadratureRule, side: str):
    lf = SIDE_LOCAL_FACE[side]
    n = np.array(SIDE_NORMALS[side])
    val, grad = reference_face_tables(V, rule, lf)
    return val, _sym(grad) @ n, n


def _nitsche_local(val, symn, n, wF, pen, slip: bool) -> np.ndarray:
    """Local boundary matrix of the symmetric Nitsche terms."""
    if slip:
        t = _tangent(n)
        v = val @ t
        s = symn @ t
        return pen * np.einsum("q,qi,qj->ij", wF, v, v) - 2 * (
            np.einsum("q,qi,qj->ij", wF, v, s) + np.einsum("q,qi,qj->ij", wF, s, v)
        )
    return pen * np.einsum("q,qic,qjc->ij", wF, val, val) - 2 * (
        np.einsum("q,qic,qjc->ij", wF, val, symn) + np.einsum("q,qic,qjc->ij", wF, symn, val)
    )


def assemble_dh(problem: BiotProblem, V: FESpace, rule: QuadratureRule | None = None) -> sp.csr_matrix:
    """Symmetric interior penalty form for ``-2 div D(u)``.

    Dirichlet faces get the full Nitsche terms, slip faces the tangential
    part only, traction faces nothing.
    """
    mesh = V.mesh
    _require_tags(mesh)
    k = V.degree
    gamma = problem.penalty(k)
    if gamma < minimum_penalty(k):
        warnings.warn(
            f"penalty {gamma} below the coercivity guard {minimum_penalty(k)} for k={k}", stacklevel=2
        )
    rule = rule or default_rule(k)
    h = mesh.h
    pen = gamma / h
    shape = (V.n_dofs, V.n_dofs)

    _, grad, _ = reference_cell_tables(V, rule)
    sym = _sym(grad)
    JxW = rule.weights * h**2
    D = _scatter(2.0 * np.einsum("q,qicd,qjcd->ij", JxW, sym, sym), V.cell_dofs, V.cell_dofs, shape)

    wF = rule.face_weights * h
    for axis in (0, 1):
        faces, dofs, jump, avg = _interior_face_tables(V, rule, axis)
        if len(faces) == 0:
            continue
        local = pen * np.einsum("q,qic,qjc->ij", wF, jump, jump) - 2 * (
            np.einsum("q,qic,qjc->ij", wF, jump, avg) + np.einsum("q,qic,qjc->ij", wF, avg, jump)
        )
        D = D + _scatter(local, dofs, dofs, shape)

    for side in SIDES:
        faces, cells = _side_faces(mesh, side)
        tag = mesh.displacement_tag[faces[0]]
        if tag == DisplacementBC.NEUMANN:
            continue
        val, symn, n = _boundary_tables(V, rule, side)
        local = _nitsche_local(val, symn, n, wF, pen, slip=tag == DisplacementBC.SLIP)
        D = D + _scatter(local, V.cell_dofs[cells], V.cell_dofs[cells], shape)
    return D.tocsr()


def assemble_ah(problem: BiotProblem, V: FESpace, rule: QuadratureRule | None = None) -> sp.csr_matrix:
    """``mu * d_h + lambda * (div, div)``."""
    return (problem.mu * assemble_dh(problem, V, rule) + problem.lam * assemble_divdiv(V, rule)).tocsr()


def assemble_broken_h1_gram(problem: BiotProblem, V: FESpace, rule: QuadratureRule | None = None) -> sp.csr_matrix:
    """Gram matrix of the broken energy norm.

    Cellwise ``(grad u, grad v)`` plus ``gamma/h``-weighted jumps on interior
    faces, full traces on Dirichlet faces and tangential traces on slip faces.
    """
    mesh = V.mesh
    _require_tags(mesh)
    k = V.degree
    rule = rule or default_rule(k)
    h = mesh.h
    pen = problem.penalty(k) / h
    shape = (V.n_dofs, V.n_dofs)
    _, grad, _ = reference_cell_tables(V, rule)
    JxW = rule.weights * h**2
    G = _scatter(np.einsum("q,qicd,qjcd->ij", JxW, grad, grad), V.cell_dofs, V.cell_dofs, shape)
    wF = rule.face_weights * h
    for axis in (0, 1):
        faces, dofs, jump, _ = _interior_face_tables(V, rule, axis)
        if len(faces):
            G = G + _scatter(pen * np.einsum("q,qic,qjc->ij", wF, jump, jump), dofs, dofs, shape)
    for side in SIDES:
        faces, cells = _side_faces(mesh, side)
        tag = mesh.displacement_tag[faces[0]]
        if tag == DisplacementBC.NEUMANN:
            continue
        val, _, n = _boundary_tables(V, rule, side)
        if tag == DisplacementBC.SLIP:
            v = val @ _tangent(n)
            local = pen * np.einsum("q,qi,qj->ij", wF, v, v)
        else:
            local = pen * np.einsum("q,qic,qjc->ij", wF, val, val)
        G = G + _scatter(local, V.cell_dofs[cells], V.cell_dofs[cells], shape)
    return G.tocsr()


def assemble_blocks(problem: BiotProblem, Q: FESpace, W: FESpace, V: FESpace) -> SystemBlocks:
    return SystemBlocks(
        Q=Q,
        W=W,
        V=V,
        M_p=assemble_pressure_mass(Q),
        M_w=assemble_darcy_mass(problem, W),
        B_w=assemble_div(W, Q),
        B_u=assemble_div(V, Q),
        A_u=assemble_ah(problem, V),
    )


# -- load functionals ---------------------------------------------------------


def assemble_scalar_load(Q: FESpace, fn: DataFn | None, t: float, rule: QuadratureRule | None = None) -> np.ndarray:
    """``(f, q)`` for every basis function of a DQ space."""
    rule = rule or default_rule(Q.degree)
    val, _, _ = reference_cell_tables(Q, rule)
    pts = cell_quadrature_points(Q.mesh, rule)
    f = _eval(fn, pts, t, vector=False)
    local = np.einsum("cq,q,qi->ci", f, rule.weights * Q.mesh.h**2, val)
    return _scatter_vector(local, Q.cell_dofs, Q.n_dofs)


def assemble_darcy_load(problem: BiotProblem, W: FESpace, t: float, rule: QuadratureRule | None = None) -> np.ndarray:
    """``-(p_D, z . n)`` over pressure-Dirichlet faces."""
    mesh = W.mesh
    _require_tags(mesh)
    rule = rule or default_rule(W.degree)
    out = np.zeros(W.n_dofs)
    if problem.p_D is None:
        return out
    wF = rule.face_weights * mesh.h
    for side in SIDES:
        faces, cells = _side_faces(mesh, side)
        if mesh.pressure_tag[faces[0]] != PressureBC.DIRICHLET:
            continue
        val, _ = reference_face_tables(W, rule, SIDE_LOCAL_FACE[side])
        vn = val @ np.array(SIDE_NORMALS[side])
        pD = _eval(problem.p_D, face_quadrature_points(mesh, rule, faces), t, vector=False)
        local = -np.einsum("fq,q,qi->fi", pD, wF, vn)
        out += _scatter_vector(local, W.cell_dofs[cells], W.n_dofs)
    return out


def assemble_momentum_load(problem: BiotProblem, V: FESpace, t: float, rule: QuadratureRule | None = None) -> np.ndarray:
    """Body force, traction and Nitsche data terms of the momentum equation."""
    mesh = V.mesh
    _require_tags(mesh)
    k = V.degree
    rule = rule or default_rule(k)
    h = mesh.h
    pen = problem.penalty(k) / h
    mu = problem.mu

    out = np.zeros(V.n_dofs)
    if problem.f2 is not None:
        val, _, _ = reference_cell_tables(V, rule)
        f = _eval(problem.f2, cell_quadrature_points(mesh, rule), t, vector=True)
        local = np.einsum("cqd,q,qid->ci", f, rule.weights * h**2, val)
        out += _scatter_vector(local, V.cell_dofs, V.n_dofs)

    wF = rule.face_weights * h
    for side in SIDES:
        faces, cells = _side_faces(mesh, side)
        tag = mesh.displacement_tag[faces[0]]
        pts = face_quadrature_points(mesh, rule, faces)
        val, symn, n = _boundary_tables(V, rule, side)
        if tag == DisplacementBC.NEUMANN:
            if problem.sigma_N is None:
                continue
            g = _eval(problem.sigma_N, pts, t, vector=True)
            local = np.einsum("fqc,q,qic->fi", g, wF, val)
        else:
            if problem.u_D is None:
                continue
            g = _eval(problem.u_D, pts, t, vector=True)
            if tag == DisplacementBC.SLIP:
                tv = _tangent(n)
                gt = g @ tv
                local = mu * (
                    pen * np.einsum("fq,q,qi->fi", gt, wF, val @ tv)
                    - 2 * np.einsum("fq,q,qi->fi", gt, wF, symn @ tv)
                )
            else:
                local = mu * (
                    pen * np.einsum("fqc,q,qic->fi", g, wF, val) - 2 * np.einsum("fqc,q,qic->fi", g, wF, symn)
                )
        out += _scatter_vector(local, V.cell_dofs[cells], V.n_dofs)
    return out


@dataclass
class LoadVectors:
    mass: np.ndarray
    darcy: np.ndarray
    momentum: np.ndarray


def assemble_rhs(problem: BiotProblem, t: float, Q: FESpace, W: FESpace, V: FESpace) -> LoadVectors:
    return LoadVectors(
        mass=assemble_scalar_load(Q, problem.f1, t),
        darcy=assemble_darcy_load(problem, W, t),
        momentum=assemble_momentum_load(problem, V, t),
    )


def elasticity_of_field(
    problem: BiotProblem,
    V: FESpace,
    u: DataFn,
    grad_u: DataFn,
    t: float = 0.0,
    rule: QuadratureRule | None = None,
) -> np.ndarray:
    """``a_h(u, v)`` for a smooth field ``u`` and every basis function ``v``.

    ``grad_u(x, y, t)`` returns ``d u_c / d x_d`` in the trailing ``(2, 2)``
    axes. A smooth field has no jumps, so only the consistency term survives
    on interior faces.
    """
    mesh = V.mesh
    _require_tags(mesh)
    k = V.degree
    rule = rule or default_rule(k)
    h = mesh.h
    pen = problem.penalty(k) / h
    mu, lam = problem.mu, problem.lam

    def tensor(pts):
        shape = pts.shape[:-1] + (2, 2)
        return np.broadcast_to(np.asarray(grad_u(pts[..., 0], pts[..., 1], t), dtype=float), shape)

    _, grad, div = reference_cell_tables(V, rule)
    pts = cell_quadrature_points(mesh, rule)
    G = tensor(pts)
    DU = _sym(G)
    divu = G[..., 0, 0] + G[..., 1, 1]
    JxW = rule.weights * h**2
    local = 2 * mu * np.einsum("cqab,q,qiab->ci", DU, JxW, _sym(grad)) + lam * np.einsum(
        "cq,q,qi->ci", divu, JxW, div
    )
    out = _scatter_vector(local, V.cell_dofs, V.n_dofs)

    wF = rule.face_weights * h
    for axis in (0, 1):
        faces, dofs, jump, _ = _interior_face_tables(V, rule, axis)
        if len(faces) == 0:
            continue
        nF = np.zeros(2)
        nF[axis] = 1.0
        DUn = _sym(tensor(face_quadrature_points(mesh, rule, faces))) @ nF
        local = -2 * mu * np.einsum("fqc,q,qic->fi", DUn, wF, jump)
        out += _scatter_vector(local, dofs, V.n_dofs)

    for side in SIDES:
        faces, cells = _side_faces(mesh, side)
        tag = mesh.displacement_tag[faces[0]]
        if tag == DisplacementBC.NEUMANN:
            continue
        fpts = face_quadrature_points(mesh, rule, faces)
        val, symn, n = _boundary_tables(V, rule, side)
        uval = _eval(u, fpts, t, vector=True)
        DUn = _sym(tensor(fpts)) @ n
        if tag == DisplacementBC.SLIP:
            tv = _tangent(n)
            ut, Dt = uval @ tv, DUn @ tv
            vt, st = val @ tv, symn @ tv
            local = mu * (
                pen * np.einsum("fq,q,qi->fi", ut, wF, vt)
                - 2 * np.einsum("fq,q,qi->fi", Dt, wF, vt)
                - 2 * np.einsum("fq,q,qi->fi", ut, wF, st)
            )
        else:
            local = mu * (
                pen * np.einsum("fqc,q,qic->fi", uval, wF, val)
                - 2 * np.einsum("fqc,q,qic->fi", DUn, wF, val)
                - 2 * np.einsum("fqc,q,qic->fi", uval, wF, symn)
            )
        out += _scatter_vector(local, V.cell_dofs[cells], V.n_dofs)
    return out
