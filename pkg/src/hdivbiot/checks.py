"""Property checks shared by the ``check`` command and the test suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl
import scipy.sparse.linalg as spla

from .fespace import build_space, check_div_compat
from .forms import BiotProblem, assemble_blocks, assemble_broken_h1_gram, assemble_dh
from .linalg import compose, factorize, solve
from .mesh import BoundarySpec, DisplacementBC, PressureBC, build_cartesian_mesh
from .stepper import BiotState, TimeStepper, build_spaces
from .verification import SLIP_BOUNDARY, ExactSolution, exact_solution, psi

# oracle tolerances
PDE_TOL = 1e-10
FD_TOL = 1e-6
KAPPA_SPREAD = 0.2
ZERO_STEP_TOL = 1e-12

DIRICHLET_BOUNDARY = BoundarySpec.uniform(PressureBC.DIRICHLET, DisplacementBC.DIRICHLET)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


# -- manufactured solution oracle ----------------------------------------------


def _symbolic_fields(exact: ExactSolution):
    """Independent symbolic construction of the exact triple and its sources."""
    import sympy as s

    x, y, t = s.symbols("x y t", real=True)
    pi = s.pi
    ph = s.sin(2 * pi * x) * s.sin(2 * pi * y)
    # psi' + 8 pi^2 psi = sin(2 pi t), psi(0) = 0
    f = s.Function("f")
    ode = s.dsolve(s.Eq(f(t).diff(t) + 8 * pi**2 * f(t), s.sin(2 * pi * t)), f(t), ics={f(0): 0})
    ps = s.simplify(ode.rhs)
    p = ps * ph
    u = [-ps / (8 * pi**2) * ph.diff(v) for v in (x, y)]
    w = [-p.diff(v) for v in (x, y)]  # K = I
    lam, mu, alpha = s.Float(exact.lam), s.Float(exact.mu), s.Float(exact.alpha)
    div_u = u[0].diff(x) + u[1].diff(y)
    grad = [[u[i].diff(v) for v in (x, y)] for i in range(2)]
    sig = [
        [mu * (grad[i][j] + grad[j][i]) + (lam * div_u - alpha * p) * (1 if i == j else 0) for j in range(2)]
        for i in range(2)
    ]
    div_sig = [sig[i][0].diff(x) + sig[i][1].diff(y) for i in range(2)]
    mass_lhs = exact.c_s * p.diff(t) + alpha * div_u.diff(t) + w[0].diff(x) + w[1].diff(y)
    lamb = lambda e: s.lambdify((x, y, t), e, "numpy")  # noqa: E731
    return {
        "psi": lamb(ps),
        "p": lamb(p),
        "u": [lamb(c) for c in u],
        "w": [lamb(c) for c in w],
        "mass_lhs": lamb(mass_lhs),
        "neg_div_sigma": [lamb(-c) for c in div_sig],
        "darcy": [lamb(w[i] + p.diff(v)) for i, v in enumerate((x, y))],
    }


def pde_residuals(exact: ExactSolution | None = None, samples: int = 1000, seed: int = 0) -> dict[str, float]:
    """Maximum absolute residuals of the coded exact fields at random space-time points.

    The coded fields are compared with an independent symbolic derivation,
    and the coded sources are substituted into the symbolic PDE operators.
    """
    exact = exact or exact_solution()
    sym = _symbolic_fields(exact)
    rng = np.random.default_rng(seed)
    X, Y, T = rng.random(samples), rng.random(samples), 0.5 * rng.random(samples)
    full = lambda fn: np.broadcast_to(fn(X, Y, T), X.shape)  # noqa: E731
    vec = lambda fns: np.stack([full(f) for f in fns], -1)  # noqa: E731
    out = {
        "psi": float(np.max(np.abs(psi(T) - np.broadcast_to(sym["psi"](X, Y, T), X.shape)))),
        "p": float(np.max(np.abs(exact.p(X, Y, T) - full(sym["p"])))),
        "u": float(np.max(np.abs(exact.u(X, Y, T) - vec(sym["u"])))),
        "w": float(np.max(np.abs(exact.w(X, Y, T) - vec(sym["w"])))),
        "mass": float(np.max(np.abs(full(sym["mass_lhs"]) - exact.f1(X, Y, T)))),
        "momentum": float(np.max(np.abs(vec(sym["neg_div_sigma"]) - exact.f2(X, Y, T)))),
        "darcy": float(np.max(np.abs(vec(sym["darcy"])))),
    }
    return out


def f2_finite_difference(exact: ExactSolution | None = None, samples: int = 200, seed: int = 1,
                         step: float = 1e-4) -> float:
    """Max deviation of ``f2`` from a central-difference ``-div`` of the total stress."""
    exact = exact or exact_solution()
    rng = np.random.default_rng(seed)
    X = 0.05 + 0.9 * rng.random(samples)
    Y = 0.05 + 0.9 * rng.random(samples)
    T = 0.5 * rng.random(samples)
    S = exact.total_stress
    dsx = (S(X + step, Y, T) - S(X - step, Y, T)) / (2 * step)
    dsy = (S(X, Y + step, T) - S(X, Y - step, T)) / (2 * step)
    div = dsx[..., :, 0] + dsy[..., :, 1]
    return float(np.max(np.abs(-div - exact.f2(X, Y, T))))


def check_manufactured(samples: int = 1000, seed: int = 0) -> CheckResult:
    res = pde_residuals(samples=samples, seed=seed)
    fd = f2_finite_difference()
    worst = max(res.values())
    ok = worst <= PDE_TOL and fd <= FD_TOL
    return CheckResult("manufactured solution", ok,
                       f"max PDE residual {worst:.2e} (tol {PDE_TOL:g}), f2 FD deviation {fd:.2e} (tol {FD_TOL:g})",
                       {**res, "f2_fd": fd})


# -- coercivity ------------------------------------------------------------------


def coercivity_constant(problem: BiotProblem, level: int, k: int, dense_limit: int = 2500) -> float:
    """Smallest generalised eigenvalue of ``d_h`` against the broken-norm Gram matrix.

    Dense for small systems; otherwise shift-invert Lanczos around zero,
    which returns the eigenvalue of smallest magnitude (the minimum whenever
    ``d_h`` is positive definite, a negative value otherwise).
    """
    spaces = build_spaces(build_cartesian_mesh(level), k, problem)
    V = spaces.V
    free = V.free_dofs
    D = assemble_dh(problem, V)[free][:, free]
    G = assemble_broken_h1_gram(problem, V)[free][:, free]
    if len(free) <= dense_limit:
        return float(sl.eigh(D.toarray(), G.toarray(), eigvals_only=True)[0])
    vals = spla.eigsh(D.tocsc(), k=1, M=G.tocsc(), sigma=0.0, which="LM", return_eigenvectors=False)
    return float(vals[0])


def check_coercivity(levels=(2, 3, 4), degrees=(1, 2), boundary: BoundarySpec = SLIP_BOUNDARY,
                     gamma: float | None = None) -> CheckResult:
    values = {}
    ok = True
    parts = []
    for k in degrees:
        problem = BiotProblem(boundary=boundary, gamma=gamma)
        kap = np.array([coercivity_constant(problem, lv, k) for lv in levels])
        spread = float((kap.max() - kap.min()) / kap.max()) if kap.max() > 0 else math.inf
        good = bool(np.all(kap > 0) and spread < KAPPA_SPREAD)
        ok &= good
        values[k] = kap.tolist()
        parts.append(f"k={k} kappa={np.array2string(kap, precision=4)} spread={spread:.1%}")
    return CheckResult("coercivity", ok, "; ".join(parts), values)


# -- div compatibility -------------------------------------------------------------


def check_div_compatibility(levels=(2, 3, 4), degrees=(1, 2)) -> CheckResult:
    worst = 0.0
    for k in degrees:
        for lv in levels:
            mesh = build_cartesian_mesh(lv)
            rep = check_div_compat(build_space(mesh, "RT", k), build_space(mesh, "DQ", k))
            worst = max(worst, rep.max_residual)
    return CheckResult("div compatibility", worst <= 1e-13, f"max relative residual {worst:.2e} (tol 1e-13)",
                       {"max_residual": worst})


# -- solvability pencil ---------------------------------------------------------


def check_pencil(sigmas=(1.0, 10.0, 1000.0), level: int = 3, k: int = 1, theta: float = 1.0) -> CheckResult:
    """Factorisation with ``c_s = 0`` for ``sigma = 1/dt`` and zero-data steps."""
    problem = BiotProblem(boundary=SLIP_BOUNDARY, c_s=0.0)
    spaces = build_spaces(build_cartesian_mesh(level), k, problem)
    blocks = assemble_blocks(problem, spaces.Q, spaces.W, spaces.V)
    conds, zeros = {}, {}
    ok = True
    for sigma in sigmas:
        system = compose(blocks, problem, 1.0 / sigma, theta)
        fac = factorize(system.matrix, system.offsets)
        conds[sigma] = fac.cond_estimate
        system.factorization = fac
        x = solve(system, np.zeros(system.size))
        stepper = TimeStepper(problem, spaces, 1.0 / sigma, theta)
        z = BiotState(0.0, np.zeros(spaces.Q.n_dofs), np.zeros(spaces.W.n_dofs), np.zeros(spaces.V.n_dofs))
        s1 = stepper.step(z)
        zeros[sigma] = float(max(np.abs(x).max(), np.abs(s1.p).max(), np.abs(s1.w).max(), np.abs(s1.u).max()))
        ok &= zeros[sigma] <= ZERO_STEP_TOL
    detail = ", ".join(f"sigma={s:g}: cond~{conds[s]:.1e}, zero step {zeros[s]:.1e}" for s in sigmas)
    return CheckResult("solvability pencil", bool(ok), detail, {"cond": conds, "zero": zeros})


def run_all(quick: bool = False) -> list[CheckResult]:
    levels = (2, 3) if quick else (2, 3, 4)
    return [
        check_div_compatibility(levels),
        check_coercivity(levels),
        check_manufactured(),
        check_pencil(),
    ]
