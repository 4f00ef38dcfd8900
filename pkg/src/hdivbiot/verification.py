"""Manufactured solution, error norms and convergence/mass-balance studies."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fespace import (
    cell_quadrature_points,
    default_rule,
    face_quadrature_points,
    project_l2,
    reference_face_tables,
    values_at_quadrature,
)
from .forms import SIDE_LOCAL_FACE, BiotProblem, _interior_face_tables
from .mesh import SIDE_NORMALS, SIDES, BoundarySpec, DisplacementBC, PressureBC, build_cartesian_mesh
from .stepper import BiotSpaces, BiotState, TimeStepper, build_spaces, mass_audit, steps_for

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
EIGHT_PI2 = 8.0 * math.pi**2

# time steps per level (k -> level -> dt)
TABLE1_DT = {
    1: {2: 0.08, 3: 0.04, 4: 0.02, 5: 0.01, 6: 0.005, 7: 0.002},
    2: {2: 0.02, 3: 0.006, 4: 0.002, 5: 0.0007, 6: 0.0003, 7: 0.0001},
}
TABLE1_DOFS = {
    1: {2: 352, 3: 1344, 4: 5248, 5: 20736, 6: 82432, 7: 328704},
    2: {2: 768, 3: 2976, 4: 11712, 5: 46464, 6: 185088, 7: 738816},
}
# (c_s, alpha, lambda) -> reported mass defect at t = 0.5
TABLE3 = {
    (0.0, 1.0, 1.0): 8.55e-17,
    (0.0, 0.9, 1.0): 7.36e-17,
    (0.1, 0.9, 1.0): 7.66e-17,
    (0.1, 0.9, 1000.0): 3.19e-14,
}

SLIP_BOUNDARY = BoundarySpec.uniform(PressureBC.DIRICHLET, DisplacementBC.SLIP)


# -- manufactured solution ----------------------------------------------------


def phi(x, y):
    return np.sin(TWO_PI * x) * np.sin(TWO_PI * y)


def grad_phi(x, y):
    return TWO_PI * np.stack(
        [np.cos(TWO_PI * x) * np.sin(TWO_PI * y), np.sin(TWO_PI * x) * np.cos(TWO_PI * y)], axis=-1
    )


def hess_phi(x, y):
    f = phi(x, y)
    cc = np.cos(TWO_PI * x) * np.cos(TWO_PI * y)
    return TWO_PI**2 * np.stack([np.stack([-f, cc], -1), np.stack([cc, -f], -1)], -2)


_PSI_DEN = 64 * math.pi**4 + 4 * math.pi**2


def psi(t):
    t = np.asarray(t, dtype=float)
    return (EIGHT_PI2 * np.sin(TWO_PI * t) - TWO_PI * np.cos(TWO_PI * t) + TWO_PI * np.exp(-EIGHT_PI2 * t)) / _PSI_DEN


def dpsi(t):
    t = np.asarray(t, dtype=float)
    return (
        16 * math.pi**3 * np.cos(TWO_PI * t)
        + 4 * math.pi**2 * np.sin(TWO_PI * t)
        - 16 * math.pi**3 * np.exp(-EIGHT_PI2 * t)
    ) / _PSI_DEN


@dataclass(frozen=True)
class ExactSolution:
    """Smooth solution on the unit square driven by ``f1 = phi sin(2 pi t)``.

    ``p = psi phi``, ``w = -psi grad phi`` and ``u = -psi/(8 pi^2) grad phi``,
    valid for ``c_s = 0``, ``alpha = 1`` and ``K = I`` with any ``lambda``
    and ``mu``. The body force is ``f2 = (alpha - lambda - 2 mu) psi grad phi``.
    """

    lam: float = 1.0
    mu: float = 1.0
    alpha: float = 1.0
    c_s: float = 0.0

    def __post_init__(self):
        if self.c_s != 0.0 or self.alpha != 1.0:
            raise ValueError("the manufactured solution requires c_s = 0 and alpha = 1")
        if self.mu <= 0 or self.lam < 0:
            raise ValueError("need mu > 0 and lambda >= 0")

    def p(self, x, y, t):
        return psi(t) * phi(x, y)

    def grad_p(self, x, y, t):
        return _scal(psi(t)) * grad_phi(x, y)

    def dp_dt(self, x, y, t):
        return dpsi(t) * phi(x, y)

    def w(self, x, y, t):
        return -_scal(psi(t)) * grad_phi(x, y)

    def div_w(self, x, y, t):
        return EIGHT_PI2 * psi(t) * phi(x, y)

    def u(self, x, y, t):
        return -_scal(psi(t) / EIGHT_PI2) * grad_phi(x, y)

    def grad_u(self, x, y, t):
        return -_scal(psi(t) / EIGHT_PI2, 2) * hess_phi(x, y)

    def div_u(self, x, y, t):
        return psi(t) * phi(x, y)

    def f1(self, x, y, t):
        return phi(x, y) * np.sin(TWO_PI * np.asarray(t, dtype=float))

    def f2(self, x, y, t):
        return _scal((self.alpha - self.lam - 2 * self.mu) * psi(t)) * grad_phi(x, y)

    def total_stress(self, x, y, t):
        """``lambda div u I + 2 mu D(u) - alpha p I``."""
        G = self.grad_u(x, y, t)
        D = 0.5 * (G + np.swapaxes(G, -1, -2))
        iso = self.lam * self.div_u(x, y, t) - self.alpha * self.p(x, y, t)
        return 2 * self.mu * D + np.asarray(iso)[..., None, None] * np.eye(2)

    def problem(self, gamma: float | None = None, boundary: BoundarySpec = SLIP_BOUNDARY) -> BiotProblem:
        """Biot problem whose solution is this field (slip + ``p = 0`` walls)."""
        return BiotProblem(
            boundary=boundary,
            c_s=self.c_s,
            alpha=self.alpha,
            lam=self.lam,
            mu=self.mu,
            gamma=gamma,
            f1=self.f1,
            f2=self.f2,
            p_D=self.p,
            u_D=self.u,
            sigma_N=lambda x, y, t: np.einsum("...ab,...b->...a", self.total_stress(x, y, t), _outward(x, y)),
            p0=lambda x, y, t: self.p(x, y, 0.0),
            u0=lambda x, y, t: self.u(x, y, 0.0),
            grad_u0=lambda x, y, t: self.grad_u(x, y, 0.0),
        )


def _scal(s, extra: int = 1):
    s = np.asarray(s, dtype=float)
    return s.reshape(s.shape + (1,) * extra) if s.ndim else s


def _outward(x, y):
    """Outward unit normal of the unit square at boundary points."""
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    n = np.zeros(x.shape + (2,))
    n[..., 0] = np.where(np.isclose(x, 0), -1.0, np.where(np.isclose(x, 1), 1.0, 0.0))
    n[..., 1] = np.where(np.isclose(y, 0), -1.0, np.where(np.isclose(y, 1), 1.0, 0.0))
    return n


def exact_solution(lam: float = 1.0, mu: float = 1.0, alpha: float = 1.0, c_s: float = 0.0) -> ExactSolution:
    return ExactSolution(lam=lam, mu=mu, alpha=alpha, c_s=c_s)


def mass_balance_problem(c_s: float, alpha: float, lam: float, mu: float = 1.0) -> BiotProblem:
    """Source ``f1 = phi sin(2 pi t)`` with zero initial data and slip walls."""
    return BiotProblem(
        boundary=SLIP_BOUNDARY,
        c_s=c_s,
        alpha=alpha,
        lam=lam,
        mu=mu,
        f1=lambda x, y, t: phi(x, y) * np.sin(TWO_PI * t),
        f2=lambda x, y, t: _scal((alpha - lam - 2 * mu) * psi(t)) * grad_phi(x, y),
    )


# -- error norms ----------------------------------------------------------------


NORMS = ("p", "w", "u", "div_u", "u_1h")


@dataclass
class ErrorReport:
    t: float
    p: float
    w: float
    w_K: float
    u: float
    u_1h: float
    div_u: float
    p_proj: float
    exact: dict = field(default_factory=dict)

    def relative(self, name: str) -> float:
        ref = self.exact.get(name, 0.0)
        return getattr(self, name) / ref if ref > 0 else getattr(self, name)


def _l2(values, weights, h):
    sq = np.asarray(values) ** 2
    sq = sq.reshape(sq.shape[0], sq.shape[1], -1).sum(-1)
    return float(np.sqrt(np.sum(sq * weights) * h * h))


def compute_errors(state: BiotState, exact: ExactSolution, spaces: BiotSpaces, problem: BiotProblem) -> ErrorReport:
    """Error norms of a discrete state against the exact fields at ``state.t``."""
    Q, W, V = spaces.Q, spaces.W, spaces.V
    mesh = spaces.mesh
    k = spaces.degree
    rule = default_rule(k)
    t = state.t
    pts = cell_quadrature_points(mesh, rule)
    X, Y = pts[..., 0], pts[..., 1]
    wq, h = rule.weights, mesh.h

    ep = values_at_quadrature(Q, state.p, rule) - exact.p(X, Y, t)
    ew = values_at_quadrature(W, state.w, rule) - exact.w(X, Y, t)
    ewK = np.einsum("cqa,ab,cqb->cq", ew, problem.K_inv, ew)
    eu = values_at_quadrature(V, state.u, rule) - exact.u(X, Y, t)
    eg = values_at_quadrature(V, state.u, rule, "grad") - exact.grad_u(X, Y, t)
    ed = values_at_quadrature(V, state.u, rule, "div") - exact.div_u(X, Y, t)
    p_tilde = project_l2(Q, exact.p, t)
    epp = values_at_quadrature(Q, state.p - p_tilde, rule)

    pen = problem.penalty(k) / h
    wF = rule.face_weights * h
    sq = float(np.sum(np.sum(eg**2, axis=(-1, -2)) * wq) * h * h)
    for axis in (0, 1):
        faces, dofs, jump, _ = _interior_face_tables(V, rule, axis)
        if len(faces):
            j = np.einsum("fi,qic->fqc", state.u[dofs], jump)
            sq += pen * float(np.sum(np.sum(j**2, -1) * wF))
    for side in SIDES:
        faces = mesh.faces_on_side(side)
        tag = mesh.displacement_tag[faces[0]]
        if tag == DisplacementBC.NEUMANN:
            continue
        cells = mesh.face_cells[faces, 0]
        val, _ = reference_face_tables(V, rule, SIDE_LOCAL_FACE[side])
        fp = face_quadrature_points(mesh, rule, faces)
        e = np.einsum("fi,qic->fqc", state.u[V.cell_dofs[cells]], val) - exact.u(fp[..., 0], fp[..., 1], t)
        if tag == DisplacementBC.SLIP:
            n = SIDE_NORMALS[side]
            e = (e @ np.array([-n[1], n[0]]))[..., None]
        sq += pen * float(np.sum(np.sum(e**2, -1) * wF))

    ref = {
        "p": _l2(exact.p(X, Y, t), wq, h),
        "w": _l2(exact.w(X, Y, t), wq, h),
        "u": _l2(exact.u(X, Y, t), wq, h),
        "div_u": _l2(exact.div_u(X, Y, t), wq, h),
        "u_1h": _l2(exact.grad_u(X, Y, t), wq, h),
    }
    return ErrorReport(
        t=t,
        p=_l2(ep, wq, h),
        w=_l2(ew, wq, h),
        w_K=float(np.sqrt(np.sum(ewK * wq) * h * h)),
        u=_l2(eu, wq, h),
        u_1h=math.sqrt(sq),
        div_u=_l2(ed, wq, h),
        p_proj=_l2(epp, wq, h),
        exact=ref,
    )


# -- convergence studies --------------------------------------------------------


@dataclass
class ConvergenceRow:
    level: int
    h: float
    dt: float
    steps: int
    dofs: int
    errors: ErrorReport
    seconds: float = 0.0


@dataclass
class ConvergenceTable:
    k: int
    theta: float
    lam: float
    rows: list[ConvergenceRow] = field(default_factory=list)

    def errors(self, name: str) -> np.ndarray:
        return np.array([getattr(r.errors, name) for r in self.rows])

    def rates(self, name: str) -> np.ndarray:
        """Pairwise ``log2(e_{l-1} / e_l)``; empty for a single level."""
        e = self.errors(name)
        lv = np.array([r.level for r in self.rows])
        return np.log2(e[:-1] / e[1:]) / np.diff(lv)

    def to_csv(self, path: str | Path | None = None) -> str:
        cols = ["level", "h", "dt", "steps", "dofs"] + [f"err_{n}" for n in NORMS + ("w_K", "p_proj")]
        cols += [f"rel_{n}" for n in NORMS] + [f"rate_{n}" for n in NORMS]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        rates = {n: self.rates(n) for n in NORMS}
        for i, r in enumerate(self.rows):
            e = r.errors
            row = [r.level, _f(r.h), _f(r.dt), r.steps, r.dofs]
            row += [_f(getattr(e, n)) for n in NORMS + ("w_K", "p_proj")]
            row += [_f(e.relative(n)) for n in NORMS]
            row += ["" if i == 0 else _f(rates[n][i - 1]) for n in NORMS]
            wr.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _f(x: float) -> str:
    return f"{x:.16e}"


def convergence_study(
    k: int,
    levels: Iterable[int],
    dts: dict[int, float] | None = None,
    theta: float = 0.501,
    lam: float = 1.0,
    T: float = 0.5,
    gamma: float | None = None,
) -> ConvergenceTable:
    """Errors at ``T`` on a sequence of uniformly refined meshes.

    Time steps default to the per-level values of the discretisation table;
    the step is shortened if needed so that ``T`` is hit exactly.
    """
    levels = list(levels)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must increase strictly")
    if not levels or levels[0] < 2 or levels[-1] > 7:
        raise ValueError("levels must lie within 2..7")
    exact = exact_solution(lam=lam)
    problem = exact.problem(gamma=gamma)
    table = ConvergenceTable(k, theta, lam)
    for level in levels:
        dt_max = (dts or {}).get(level) or TABLE1_DT.get(k, {}).get(level)
        if dt_max is None:
            raise ValueError(f"no default time step for k={k}, level={level}")
        nsteps, dt = steps_for(T, dt_max)
        t0 = time.perf_counter()
        spaces = build_spaces(build_cartesian_mesh(level), k, problem)
        stepper = TimeStepper(problem, spaces, dt, theta)
        state = stepper.initial_state()
        for _ in range(nsteps):
            state = stepper.step(state)
        errs = compute_errors(state, exact, spaces, problem)
        row = ConvergenceRow(level, spaces.mesh.h, dt, nsteps, spaces.n_dofs, errs, time.perf_counter() - t0)
        log.info("k=%d level=%d dofs=%d err_p=%.3e (%.1fs)", k, level, row.dofs, errs.p, row.seconds)
        table.rows.append(row)
    if len(table.rows) >= 2:
        for n in ("p", "w", "u", "div_u"):
            r = table.rates(n)[-1]
            if r < k + 0.5:
                warnings.warn(f"rate of {n} is {r:.2f} < {k + 0.5}; time step may dominate", stacklevel=2)
    return table


# -- mass balance --------------------------------------------------------------


@dataclass
class MassBalanceRow:
    c_s: float
    alpha: float
    lam: float
    defect: float
    max_step_residual: float
    reported: float | None = None


def mass_balance_study(
    params: Sequence[tuple[float, float, float]] = tuple(TABLE3),
    level: int = 3,
    dt: float = 0.1,
    theta: float = 0.501,
    T: float = 0.5,
    k: int = 1,
) -> list[MassBalanceRow]:
    rows = []
    for c_s, alpha, lam in params:
        problem = mass_balance_problem(c_s, alpha, lam)
        spaces = build_spaces(build_cartesian_mesh(level), k, problem)
        stepper = TimeStepper(problem, spaces, dt, theta)
        history = stepper.run(T)
        ledger = mass_audit(history, stepper)
        rows.append(
            MassBalanceRow(
                c_s,
                alpha,
                lam,
                ledger.at(T),
                float(ledger.step_residuals.max()),
                TABLE3.get((c_s, alpha, lam)),
            )
        )
    return rows


def mass_balance_csv(rows: list[MassBalanceRow], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["c_s", "alpha", "lambda", "mass_defect", "max_step_residual", "reported"])
    for r in rows:
        wr.writerow([r.c_s, r.alpha, r.lam, _f(r.defect), _f(r.max_step_residual),
                     "" if r.reported is None else f"{r.reported:.2e}"])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# -- plots ---------------------------------------------------------------------


def plot_convergence(table: ConvergenceTable, path: str | Path) -> Path:
    """Log-log plot of relative errors with reference slope triangles."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "hdivbiot"
    h = np.array([r.h for r in table.rows])
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    groups = (("p", "w", "u", "div_u"), ("u_1h",))
    labels = {"p": "p", "w": "w", "u": "u", "div_u": "div u", "u_1h": "u (1,h)"}
    slopes = (table.k + 1, table.k)
    for ax, names, slope in zip(axes, groups, slopes):
        for n in names:
            rel = np.array([r.errors.relative(n) for r in table.rows])
            ax.loglog(h, rel, "o-", label=labels[n])
        if len(h) >= 2:
            ref = np.array([r.errors.relative(names[0]) for r in table.rows])
            x0, x1 = h[-1], h[-2]
            y0 = ref[-1] * 0.5
            y1 = y0 * (x1 / x0) ** slope
            ax.loglog([x0, x1, x1, x0], [y0, y0, y1, y0], "k-", lw=0.8)
            ax.text(x1 * 1.05, math.sqrt(y0 * y1), str(slope))
        ax.set_xlabel("h")
        ax.legend()
    axes[0].set_ylabel("relative error")
    fig.suptitle(f"RT{table.k}/Q{table.k}, theta={table.theta}, lambda={table.lam}")
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def rows_as_dicts(table: ConvergenceTable) -> list[dict]:
    return [dict(level=r.level, dofs=r.dofs, dt=r.dt, **{k: v for k, v in asdict(r.errors).items() if k != "exact"})
            for r in table.rows]
