"""Time stepping of the semi-discrete DAE and the mass-balance audits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fespace import (
    FESpace,
    build_space,
    default_rule,
    interpolate,
    project_l2,
    values_at_quadrature,
)
from .forms import (
    BiotProblem,
    SystemBlocks,
    assemble_blocks,
    assemble_darcy_load,
    assemble_momentum_load,
    assemble_scalar_load,
    elasticity_of_field,
)
from .linalg import BlockSystem, compose, factorize, solve
from .mesh import Mesh, classify_boundary

log = logging.getLogger(__name__)

CONSERVATION_TOL = 1e-12


@dataclass(frozen=True)
class BiotSpaces:
    Q: FESpace
    W: FESpace
    V: FESpace

    @property
    def n_dofs(self) -> int:
        return self.Q.n_dofs + self.W.n_dofs + self.V.n_dofs

    @property
    def mesh(self) -> Mesh:
        return self.Q.mesh

    @property
    def degree(self) -> int:
        return self.Q.degree


def build_spaces(mesh: Mesh, k: int, problem: BiotProblem | None = None) -> BiotSpaces:
    """``(Q_h, W_h, V_h)`` with the constraints implied by the boundary tags."""
    if problem is not None:
        mesh = classify_boundary(mesh, problem.boundary)
    if mesh.pressure_tag is None:
        raise ValueError("mesh needs boundary tags (pass the problem or classify first)")
    return BiotSpaces(
        Q=build_space(mesh, "DQ", k),
        W=build_space(mesh, "RT", k, "pN"),
        V=build_space(mesh, "RT", k, "uD"),
    )


@dataclass
class BiotState:
    t: float
    p: np.ndarray
    w: np.ndarray
    u: np.ndarray

    def copy(self) -> "BiotState":
        return BiotState(self.t, self.p.copy(), self.w.copy(), self.u.copy())


def divergence_to_dq(V: FESpace, Q: FESpace) -> sp.csr_matrix:
    """Exact map from RT coefficients to DQ coefficients of the divergence.

    The DQ basis is nodal at the Gauss points and ``div RT_k = DQ_k`` per
    cell, so evaluating the divergence at those points gives the
    coefficients without any projection.
    """
    if V.degree != Q.degree:
        raise ValueError("divergence map needs matching degrees")
    _, _, div = V.element.evaluate(Q.element.nodes())
    local = div / V.mesh.h
    rows = np.broadcast_to(Q.cell_dofs[:, :, None], (V.mesh.n_cells,) + local.shape)
    cols = np.broadcast_to(V.cell_dofs[:, None, :], rows.shape)
    data = np.broadcast_to(local, rows.shape)
    m = sp.csr_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=(Q.n_dofs, V.n_dofs))
    # face dofs are shared, but each row belongs to one cell: no duplicates
    return m


def _prescribed_values(problem: BiotProblem, spaces: BiotSpaces, t: float) -> np.ndarray:
    """Values of constrained dofs in the monolithic ordering."""
    nq, nw = spaces.Q.n_dofs, spaces.W.n_dofs
    g = np.zeros(spaces.n_dofs)
    V = spaces.V
    if problem.u_D is not None and V.constrained.any():
        g[nq + nw :] = np.where(V.constrained, interpolate(V, problem.u_D, t), 0.0)
    return g


def initial_state(problem: BiotProblem, spaces: BiotSpaces, blocks: SystemBlocks | None = None) -> BiotState:
    """Discrete initial data.

    ``p`` is the L2 projection of ``p0`` and ``u`` the elastic projection of
    ``u0`` (``a_h(u_h, v) = a_h(u0, v)``). The seepage velocity has no initial
    condition of its own; it is taken from the Darcy equation with the
    projected pressure so that the theta scheme starts from a consistent
    state.
    """
    Q, W, V = spaces.Q, spaces.W, spaces.V
    blocks = blocks or assemble_blocks(problem, Q, W, V)
    p = project_l2(Q, problem.p0, 0.0) if problem.p0 is not None else np.zeros(Q.n_dofs)

    if problem.u0 is not None:
        rhs = elasticity_of_field(problem, V, problem.u0, problem.grad_u0, 0.0)
        A, mask = blocks.A_u, V.constrained
        g = np.where(mask, interpolate(V, problem.u0, 0.0), 0.0)
        u = _solve_constrained(A, rhs, mask, g)
    else:
        u = np.zeros(V.n_dofs)

    rhs_w = blocks.B_w.T @ p + assemble_darcy_load(problem, W, 0.0)
    w = _solve_constrained(blocks.M_w, rhs_w, W.constrained, np.zeros(W.n_dofs))
    return BiotState(0.0, p, w, u)


def _solve_constrained(A: sp.spmatrix, rhs: np.ndarray, mask: np.ndarray, g: np.ndarray) -> np.ndarray:
    A = sp.csr_matrix(A)
    free = np.flatnonzero(~mask)
    fixed = np.flatnonzero(mask)
    x = g.astype(float).copy()
    b = rhs[free] - A[free][:, fixed] @ g[fixed] if len(fixed) else rhs[free]
    fac = factorize(A[free][:, free])
    x[free] = fac.solve(b)
    return x


@dataclass
class ConservationRecord:
    t: float
    max_residual: float
    scale: float

    @property
    def relative(self) -> float:
        return self.max_residual / self.scale if self.scale > 0 else self.max_residual


class TimeStepper:
    """Theta scheme with one cached factorisation per ``(dt, theta)``.

    The flux and source terms of the mass equation are weighted with
    ``(1 - theta, theta)``; Darcy and momentum equations hold at the new time.
    Every step checks the pointwise discrete mass balance.
    """

    def __init__(self, problem: BiotProblem, spaces: BiotSpaces, dt: float, theta: float = 1.0,
                 check_conservation: bool = True):
        self.problem = problem
        self.spaces = spaces
        self.blocks = assemble_blocks(problem, spaces.Q, spaces.W, spaces.V)
        self.system: BlockSystem = compose(self.blocks, problem, dt, theta)
        self.system.factorize()
        self.dt = float(dt)
        self.theta = float(theta)
        self.check_conservation = check_conservation
        self.G_u = divergence_to_dq(spaces.V, spaces.Q)
        self.G_w = divergence_to_dq(spaces.W, spaces.Q)
        self._mp_lu = spla.splu(sp.csc_matrix(self.blocks.M_p))
        self._rule = default_rule(spaces.degree)
        self.conservation: list[ConservationRecord] = []
        self._load_cache: dict[float, np.ndarray] = {}

    def mass_load(self, t: float) -> np.ndarray:
        if t not in self._load_cache:
            self._load_cache = {k: v for k, v in self._load_cache.items() if abs(k - t) <= 2 * self.dt}
            self._load_cache[t] = assemble_scalar_load(self.spaces.Q, self.problem.f1, t)
        return self._load_cache[t]

    def projected_source(self, t: float) -> np.ndarray:
        """Coefficients of the L2 projection of ``f1(t)`` onto ``Q_h``."""
        return self._mp_lu.solve(self.mass_load(t))

    def initial_state(self) -> BiotState:
        return initial_state(self.problem, self.spaces, self.blocks)

    def rhs(self, state: BiotState) -> np.ndarray:
        pr, bl, th, dt = self.problem, self.blocks, self.theta, self.dt
        t1 = state.t + dt
        b_p = (pr.alpha / dt) * (bl.B_u @ state.u) + th * self.mass_load(t1)
        if pr.c_s:
            b_p += (pr.c_s / dt) * (bl.M_p @ state.p)
        if th < 1.0:
            b_p += (1.0 - th) * (self.mass_load(state.t) - bl.B_w @ state.w)
        b_w = assemble_darcy_load(pr, self.spaces.W, t1)
        b_u = assemble_momentum_load(pr, self.spaces.V, t1)
        rhs = np.concatenate([b_p, b_w, b_u])
        return self.system.apply_constraints(rhs, _prescribed_values(pr, self.spaces, t1))

    def step(self, state: BiotState) -> BiotState:
        x = solve(self.system, self.rhs(state))
        p, w, u = self.system.split(x)
        new = BiotState(state.t + self.dt, p.copy(), w.copy(), u.copy())
        if self.check_conservation:
            rec = self.conservation_residual(state, new)
            self.conservation.append(rec)
            if rec.relative > CONSERVATION_TOL:
                log.warning("pointwise mass balance violated at t=%.4g: %.3e", new.t, rec.relative)
        return new

    def conservation_residual(self, old: BiotState, new: BiotState) -> ConservationRecord:
        """Pointwise residual of the discrete mass balance over one step.

        ``r = (c_s dp + alpha div du) / dt + theta (div w1 - f1~) + (1 - theta) (div w0 - f0~)``
        is a ``Q_h`` function; its maximum over all quadrature points is
        compared with the largest of the individual terms.
        """
        pr, th, dt = self.problem, self.theta, self.dt
        storage = (pr.c_s * (new.p - old.p) + pr.alpha * (self.G_u @ (new.u - old.u))) / dt
        flux1 = self.G_w @ new.w - self.projected_source(new.t)
        flux0 = self.G_w @ old.w - self.projected_source(old.t)
        r = storage + th * flux1 + (1 - th) * flux0
        Q = self.spaces.Q
        at = lambda c: values_at_quadrature(Q, c, self._rule)  # noqa: E731
        scale = max(
            np.abs(at(storage)).max(),
            np.abs(at(self.G_w @ new.w)).max(),
            np.abs(at(self.projected_source(new.t))).max(),
        )
        return ConservationRecord(new.t, float(np.abs(at(r)).max()), float(scale))

    def run(self, T: float, state: BiotState | None = None) -> list[BiotState]:
        """States at ``0, dt, ..., T``; ``T`` must be a multiple of ``dt``."""
        nsteps = int(round(T / self.dt))
        if not math.isclose(nsteps * self.dt, T, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"T={T} is not a multiple of dt={self.dt}")
        state = state or self.initial_state()
        history = [state]
        for _ in range(nsteps):
            state = self.step(state)
            history.append(state)
        return history


def step(problem: BiotProblem, state: BiotState, dt: float, theta: float = 1.0,
         spaces: BiotSpaces | None = None, stepper: TimeStepper | None = None) -> BiotState:
    """Advance one step; pass ``stepper`` to reuse its factorisation."""
    if stepper is None:
        if spaces is None:
            raise ValueError("need spaces or a stepper")
        stepper = TimeStepper(problem, spaces, dt, theta)
    elif not (math.isclose(stepper.dt, dt) and math.isclose(stepper.theta, theta)):
        raise ValueError("stepper was factorised for a different (dt, theta)")
    return stepper.step(state)


def steps_for(T: float, dt_max: float) -> tuple[int, float]:
    """Smallest step count reaching ``T`` with steps no larger than ``dt_max``."""
    n = max(1, math.ceil(T / dt_max - 1e-9))
    return n, T / n


# -- mass audit ---------------------------------------------------------------


@dataclass
class MassLedger:
    times: np.ndarray
    norms: np.ndarray
    fields: list[np.ndarray] = field(repr=False)
    step_residuals: np.ndarray | None = None

    def at(self, t: float) -> float:
        i = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[i], t, rel_tol=1e-9, abs_tol=1e-12):
            raise KeyError(f"no ledger entry at t={t}")
        return float(self.norms[i])


def mass_audit(history: list[BiotState], stepper: TimeStepper) -> MassLedger:
    """Accumulated mass defect ``Delta m(t)`` in ``Q_h``.

    ``Delta m(t_n) = c_s (p_n - p_0) + alpha div(u_n - u_0)
    + sum_m dt [theta (div w_m - f~_m) + (1 - theta) (div w_{m-1} - f~_{m-1})]``,
    i.e. the time integral of the flux is taken with the same weights as the
    stepping scheme.
    """
    if len(history) < 2:
        raise ValueError("need at least one step")
    times = np.array([s.t for s in history])
    steps = np.diff(times)
    if np.any(steps <= 0):
        raise ValueError("ledger times must increase strictly")
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-14):
        raise ValueError("mass audit needs a uniform step history")
    dt, th = steps[0], stepper.theta
    if not math.isclose(dt, stepper.dt, rel_tol=1e-9):
        raise ValueError("history step does not match the stepper")
    pr = stepper.problem
    Gu, Gw = stepper.G_u, stepper.G_w
    first = history[0]
    flux = [Gw @ s.w - stepper.projected_source(s.t) for s in history]
    integral = np.zeros_like(first.p)
    fields = [np.zeros_like(first.p)]
    for n in range(1, len(history)):
        integral = integral + dt * (th * flux[n] + (1 - th) * flux[n - 1])
        s = history[n]
        dm = pr.c_s * (s.p - first.p) + pr.alpha * (Gu @ (s.u - first.u)) + integral
        fields.append(dm)
    Q = stepper.spaces.Q
    rule = stepper._rule
    norms = []
    for dm in fields:
        vals = values_at_quadrature(Q, dm, rule)
        norms.append(float(np.sqrt(np.sum(vals**2 * rule.weights) * Q.mesh.h**2)))
    res = np.array([r.relative for r in stepper.conservation]) if stepper.conservation else None
    return MassLedger(times, np.array(norms), fields, res)


def export_state(state: BiotState, path: str | Path, fmt: str = "txt") -> Path:
    """Coefficient dump keyed by ``(time, field)``.

    ``txt`` writes ``time,field,index,value`` rows; ``npz`` a binary archive.
    """
    path = Path(path)
    if fmt == "npz":
        np.savez(path, t=state.t, p=state.p, w=state.w, u=state.u)
        return path if path.suffix == ".npz" else path.with_name(path.name + ".npz")
    if fmt != "txt":
        raise ValueError(f"unknown format {fmt!r}")
    with open(path, "w") as fh:
        fh.write("time,field,index,value\n")
        for name in ("p", "w", "u"):
            for i, v in enumerate(getattr(state, name)):
                fh.write(f"{state.t:.17e},{name},{i},{v:.17e}\n")
    return path
