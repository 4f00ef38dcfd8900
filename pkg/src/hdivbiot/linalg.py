"""Monolithic block system ``(p | w | u)`` and its sparse direct solve."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import BiotProblem, SystemBlocks
from .mesh import SIDES, PressureBC

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-11
# 1-norm condition estimates above this are treated as singular
SINGULAR_COND = 1e15

BLOCK_NAMES = ("p", "w", "u")


class SingularSystemError(RuntimeError):
    """Factorisation failed; ``index`` is the dof where the null mode peaks."""

    def __init__(self, message: str, index: int | None = None, block: str | None = None):
        super().__init__(message)
        self.index = index
        self.block = block


class SolveError(RuntimeError):
    pass


def all_pressure_neumann(problem: BiotProblem) -> bool:
    return all(problem.boundary.sides[s][0] == PressureBC.NEUMANN for s in SIDES)


@dataclass
class Factorization:
    """SuperLU factors of a square sparse matrix."""

    matrix: sp.csc_matrix
    lu: object
    cond_estimate: float = float("nan")

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.lu.solve(np.asarray(b, dtype=float))


def factorize(A: sp.spmatrix, offsets: tuple[int, ...] | None = None, check_condition: bool = True) -> Factorization:
    """LU with partial pivoting; singular matrices raise ``SingularSystemError``.

    Exact zero pivots are caught by SuperLU. Numerically singular systems
    (for instance rigid modes left by the boundary conditions) are caught by
    a 1-norm condition estimate, whose maximising vector locates the mode.
    """
    A = sp.csc_matrix(A)
    n = A.shape[0]

    def locate(idx):
        if offsets is None or idx is None:
            return None
        for name, lo, hi in zip(BLOCK_NAMES, offsets[:-1], offsets[1:]):
            if lo <= idx < hi:
                return f"{name}[{idx - lo}]"
        return None

    try:
        lu = spla.splu(A, permc_spec="COLAMD")
    except RuntimeError as exc:
        structural = np.flatnonzero(np.diff(A.tocsr().indptr) == 0)
        idx = int(structural[0]) if len(structural) else None
        where = locate(idx)
        raise SingularSystemError(
            f"sparse LU failed ({exc}); first empty row: {idx} ({where})", idx, where
        ) from exc
    fac = Factorization(A, lu)
    if check_condition:
        op = spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda x: lu.solve(x, trans="T"), dtype=float)
        # the estimator draws from numpy's global generator; pin it for reproducibility
        saved = np.random.get_state()
        np.random.seed(0)
        try:
            est, _, w = spla.onenormest(op, compute_v=True, compute_w=True)
        finally:
            np.random.set_state(saved)
        fac.cond_estimate = float(est * spla.norm(A, 1))
        if not np.isfinite(fac.cond_estimate) or fac.cond_estimate > SINGULAR_COND:
            idx = int(np.argmax(np.abs(w)))
            where = locate(idx)
            raise SingularSystemError(
                f"matrix is numerically singular (cond ~ {fac.cond_estimate:.2e}); "
                f"null mode peaks at dof {idx} ({where}); check the boundary conditions",
                idx,
                where,
            )
    return fac


@dataclass
class BlockSystem:
    """Composed one-step matrix with essential constraints eliminated.

    Constrained dofs keep their rows and columns with a unit diagonal; their
    coupling to the free unknowns is moved to the right-hand side by
    ``apply_constraints``.
    """

    matrix: sp.csr_matrix
    offsets: tuple[int, int, int, int]
    constrained: np.ndarray
    coupling: sp.csr_matrix
    dt: float
    theta: float
    factorization: Factorization | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a, b, c, d = self.offsets
        return x[a:b], x[b:c], x[c:d]

    def join(self, p, w, u) -> np.ndarray:
        return np.concatenate([p, w, u])

    def apply_constraints(self, rhs: np.ndarray, values: np.ndarray | None = None) -> np.ndarray:
        """Lift prescribed constrained values into ``rhs`` (a new array)."""
        rhs = np.array(rhs, dtype=float)
        g = np.zeros(self.size) if values is None else np.asarray(values, dtype=float)
        gc = np.where(self.constrained, g, 0.0)
        if np.any(gc):
            rhs -= self.coupling @ gc
        rhs[self.constrained] = g[self.constrained]
        return rhs

    def factorize(self) -> Factorization:
        if self.factorization is None:
            self.factorization = factorize(self.matrix, self.offsets)
        return self.factorization


def _constrain(A: sp.csr_matrix, mask: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    free = sp.diags((~mask).astype(float))
    fixed = sp.diags(mask.astype(float))
    coupling = (free @ A @ fixed).tocsr()
    out = (free @ A @ free + fixed).tocsr()
    out.eliminate_zeros()
    out.sort_indices()
    return out, coupling


def compose(blocks: SystemBlocks, problem: BiotProblem, dt: float, theta: float = 1.0) -> BlockSystem:
    """One-step matrix of the theta scheme.

    The mass equation is weighted with ``theta`` in the flux term; Darcy and
    momentum rows are enforced at the new time level::

        [ c_s/dt M_p    theta B_w    alpha/dt B_u ]
        [ -B_w^T        M_w          0            ]
        [ -alpha B_u^T  0            A_u          ]

    ``theta = 1`` gives backward Euler.
    """
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    if all_pressure_neumann(problem):
        raise ValueError("pressure Neumann condition on the whole boundary leaves the system singular")
    a = problem.alpha
    A = sp.bmat(
        [
            [(problem.c_s / dt) * blocks.M_p if problem.c_s else None, theta * blocks.B_w, (a / dt) * blocks.B_u],
            [-blocks.B_w.T, blocks.M_w, None],
            [-a * blocks.B_u.T, None, blocks.A_u],
        ],
        format="csr",
    )
    nq, nw, nv = blocks.Q.n_dofs, blocks.W.n_dofs, blocks.V.n_dofs
    offsets = (0, nq, nq + nw, nq + nw + nv)
    if A.shape != (offsets[-1], offsets[-1]):
        raise ValueError("block shapes do not match the spaces")
    mask = np.concatenate([np.zeros(nq, bool), blocks.W.constrained, blocks.V.constrained])
    matrix, coupling = _constrain(A, mask)
    return BlockSystem(matrix, offsets, mask, coupling, float(dt), float(theta))


def solve(system: BlockSystem, rhs: np.ndarray, tol: float = RESIDUAL_TOL) -> np.ndarray:
    """Direct solve; raises if the relative residual exceeds ``tol``."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (system.size,):
        raise ValueError(f"rhs has shape {rhs.shape}, expected ({system.size},)")
    fac = system.factorize()
    x = fac.solve(rhs)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return x
    res = np.linalg.norm(system.matrix @ x - rhs) / bnorm
    log.debug("relative residual %.3e", res)
    if not res <= tol:
        raise SolveError(f"relative residual {res:.3e} exceeds {tol:.1e}")
    return x


def relative_residual(A: sp.spmatrix, x: np.ndarray, b: np.ndarray) -> float:
    bn = np.linalg.norm(b)
    r = np.linalg.norm(A @ x - b)
    return r / bn if bn else r


def write_matrix_market(path: str | Path, matrix: sp.spmatrix, comment: str = "") -> Path:
    path = Path(path)
    if path.suffix != ".mtx":
        path = path.with_name(path.name + ".mtx")
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment)
    return path
