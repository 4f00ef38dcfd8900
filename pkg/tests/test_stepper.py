import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given, settings
from hypothesis import strategies as st

from hdivbiot.fespace import interpolate
from hdivbiot.forms import BiotProblem, assemble_darcy_load, assemble_momentum_load, assemble_scalar_load
from hdivbiot.mesh import build_cartesian_mesh
from hdivbiot.stepper import (
    CONSERVATION_TOL,
    BiotState,
    TimeStepper,
    build_spaces,
    divergence_to_dq,
    export_state,
    initial_state,
    mass_audit,
    step,
    steps_for,
)
from hdivbiot.verification import exact_solution, mass_balance_problem

from conftest import SLIP


def setup(problem, level=2, k=1, dt=0.1, theta=1.0):
    spaces = build_spaces(build_cartesian_mesh(level), k, problem)
    return spaces, TimeStepper(problem, spaces, dt, theta)


def test_zero_data_initial_state_is_zero():
    pr = BiotProblem(boundary=SLIP)
    spaces, st_ = setup(pr)
    s = st_.initial_state()
    assert s.t == 0.0
    assert not (np.any(s.p) or np.any(s.w) or np.any(s.u))


def test_zero_data_step_is_zero():
    pr = BiotProblem(boundary=SLIP)
    spaces, st_ = setup(pr, theta=0.501)
    s = st_.step(st_.initial_state())
    assert s.t == pytest.approx(0.1)
    assert max(np.abs(s.p).max(), np.abs(s.w).max(), np.abs(s.u).max()) <= 1e-12


def test_discrete_initial_pressure_reproduced():
    p0 = lambda x, y, t: 1 + 2 * x - y + 0.5 * x * y  # noqa: E731
    pr = BiotProblem(boundary=SLIP, p0=p0)
    spaces = build_spaces(build_cartesian_mesh(2), 1, pr)
    s = initial_state(pr, spaces)
    assert np.allclose(s.p, interpolate(spaces.Q, p0))


def test_discrete_initial_displacement_reproduced():
    u0 = lambda x, y, t: np.stack([x * (1 - x) + y, 0.3 * x * y], -1)  # noqa: E731
    gu0 = lambda x, y, t: np.stack(  # noqa: E731
        [np.stack([1 - 2 * x, np.ones_like(x)], -1), np.stack([0.3 * y, 0.3 * x], -1)], -2
    )
    pr = BiotProblem(boundary=SLIP, u0=u0, grad_u0=gu0, lam=5.0)
    spaces = build_spaces(build_cartesian_mesh(2), 2, pr)
    s = initial_state(pr, spaces)
    assert np.allclose(s.u, interpolate(spaces.V, u0), atol=1e-11)


def test_initial_seepage_satisfies_darcy():
    pr = BiotProblem(boundary=SLIP, p0=lambda x, y, t: np.sin(3 * x) * y)
    spaces, st_ = setup(pr)
    s = st_.initial_state()
    bl = st_.blocks
    r = bl.M_w @ s.w - bl.B_w.T @ s.p - assemble_darcy_load(pr, spaces.W, 0.0)
    assert np.abs(r).max() < 1e-12


def test_divergence_map_matches_projection():
    pr = BiotProblem(boundary=SLIP)
    spaces, st_ = setup(pr, k=2)
    u = np.random.default_rng(2).standard_normal(spaces.V.n_dofs)
    G = divergence_to_dq(spaces.V, spaces.Q)
    # (div u, q) = (G u, q) for all q
    assert np.allclose(st_.blocks.M_p @ (G @ u), st_.blocks.B_u @ u, atol=1e-11)


@settings(max_examples=12)
@given(
    c_s=st.sampled_from([0.0, 0.1, 1.0]),
    alpha=st.floats(0.3, 1.0),
    lam=st.sampled_from([0.0, 1.0, 1000.0]),
    theta=st.floats(0.5, 1.0),
    dt=st.sampled_from([0.01, 0.1, 0.25]),
    k=st.sampled_from([1, 2]),
)
def test_pointwise_conservation(c_s, alpha, lam, theta, dt, k):
    pr = mass_balance_problem(c_s, alpha, lam)
    spaces, st_ = setup(pr, level=2, k=k, dt=dt, theta=theta)
    s = st_.initial_state()
    for _ in range(3):
        s = st_.step(s)
    assert len(st_.conservation) == 3
    assert max(r.relative for r in st_.conservation) <= CONSERVATION_TOL


def _manual_backward_euler(pr, spaces, state, dt):
    st_ = TimeStepper(pr, spaces, dt, 1.0)
    bl = st_.blocks
    A = sp.bmat(
        [
            [(pr.c_s / dt) * bl.M_p, bl.B_w, (pr.alpha / dt) * bl.B_u],
            [-bl.B_w.T, bl.M_w, None],
            [-pr.alpha * bl.B_u.T, None, bl.A_u],
        ],
        format="csc",
    )
    t1 = state.t + dt
    b = np.concatenate(
        [
            (pr.c_s / dt) * (bl.M_p @ state.p) + (pr.alpha / dt) * (bl.B_u @ state.u)
            + assemble_scalar_load(spaces.Q, pr.f1, t1),
            assemble_darcy_load(pr, spaces.W, t1),
            assemble_momentum_load(pr, spaces.V, t1),
        ]
    )
    return spla.spsolve(A, b)


def test_theta_one_is_backward_euler():
    pr = mass_balance_problem(0.1, 0.9, 1.0)
    spaces, st_ = setup(pr, dt=0.05, theta=1.0)
    s0 = st_.initial_state()
    s1 = st_.step(s0)
    ref = _manual_backward_euler(pr, spaces, s0, 0.05)
    assert np.allclose(np.concatenate([s1.p, s1.w, s1.u]), ref, atol=1e-12)


@pytest.mark.parametrize("theta,order", [(1.0, 1.0), (0.5, 2.0)])
def test_temporal_order(theta, order):
    """Halving dt on a fixed mesh shrinks the time error by 2^order.

    Steps start at T/16: below that the undamped stiff modes of the
    midpoint rule are still visible.
    """
    pr = mass_balance_problem(0.1, 0.9, 1.0)
    T = 0.2

    def final(dt):
        _, st_ = setup(pr, level=2, dt=dt, theta=theta)
        return st_.run(T)[-1].p

    ref = final(T / 1024)
    e = [np.linalg.norm(final(T / n) - ref) for n in (16, 32, 64)]
    rates = np.log2(np.array(e[:-1]) / e[1:])
    assert np.all(np.abs(rates - order) < 0.1)


def test_step_function_reuses_stepper():
    pr = BiotProblem(boundary=SLIP)
    spaces, st_ = setup(pr, dt=0.1)
    s = step(pr, st_.initial_state(), 0.1, 1.0, stepper=st_)
    assert s.t == pytest.approx(0.1)
    with pytest.raises(ValueError, match="different"):
        step(pr, s, 0.2, 1.0, stepper=st_)
    with pytest.raises(ValueError):
        step(pr, s, 0.1)
    assert step(pr, s, 0.1, 1.0, spaces=spaces).t == pytest.approx(0.2)


def test_run_requires_multiple_of_dt():
    pr = BiotProblem(boundary=SLIP)
    _, st_ = setup(pr, dt=0.3)
    with pytest.raises(ValueError, match="multiple"):
        st_.run(0.5)


@pytest.mark.parametrize("T,dt_max,n", [(0.5, 0.08, 7), (0.5, 0.1, 5), (0.5, 0.006, 84), (1.0, 2.0, 1)])
def test_steps_for(T, dt_max, n):
    nsteps, dt = steps_for(T, dt_max)
    assert nsteps == n
    assert dt <= dt_max + 1e-15 and nsteps * dt == pytest.approx(T)


def test_mass_audit_zero_data():
    pr = BiotProblem(boundary=SLIP)
    _, st_ = setup(pr, dt=0.1)
    ledger = mass_audit(st_.run(0.3), st_)
    assert np.all(ledger.norms == 0.0)
    assert ledger.at(0.3) == 0.0
    with pytest.raises(KeyError):
        ledger.at(0.25)


def test_mass_audit_with_source():
    pr = mass_balance_problem(0.1, 0.9, 1.0)
    _, st_ = setup(pr, dt=0.1, theta=0.501)
    ledger = mass_audit(st_.run(0.5), st_)
    assert ledger.norms.max() <= 1e-11
    assert len(ledger.times) == 6


def test_mass_audit_rejects_bad_histories():
    pr = BiotProblem(boundary=SLIP)
    _, st_ = setup(pr, dt=0.1)
    h = st_.run(0.3)
    skewed = [h[0], h[1], BiotState(0.35, h[2].p, h[2].w, h[2].u)]
    with pytest.raises(ValueError, match="uniform"):
        mass_audit(skewed, st_)
    with pytest.raises(ValueError, match="increase"):
        mass_audit([h[1], h[0]], st_)
    with pytest.raises(ValueError):
        mass_audit(h[:1], st_)


def test_export(tmp_path):
    s = BiotState(0.5, np.array([1.0]), np.array([2.0, 3.0]), np.array([4.0]))
    txt = export_state(s, tmp_path / "s.txt")
    lines = txt.read_text().splitlines()
    assert lines[0] == "time,field,index,value"
    assert len(lines) == 5 and lines[2].split(",")[1:3] == ["w", "0"]
    npz = export_state(s, tmp_path / "s", fmt="npz")
    data = np.load(npz)
    assert np.array_equal(data["w"], s.w) and float(data["t"]) == 0.5
    with pytest.raises(ValueError):
        export_state(s, tmp_path / "x", fmt="json")


def test_half_steps_against_full_step():
    """One step of dt and two of dt/2 differ by O(dt^2) in p.

    The stiff pressure modes reduce the observed order until dt is well
    below their time scale, hence the small steps.
    """
    pr = exact_solution().problem()
    spaces = build_spaces(build_cartesian_mesh(3), 1, pr)
    base = TimeStepper(pr, spaces, 5e-4, 1.0)
    s = base.initial_state()
    for _ in range(200):
        s = base.step(s)
    diffs = []
    for dt in (1e-3, 5e-4, 2.5e-4, 1.25e-4):
        full, half = TimeStepper(pr, spaces, dt, 1.0), TimeStepper(pr, spaces, dt / 2, 1.0)
        a = full.step(s)
        b = half.step(half.step(s.copy()))
        diffs.append(np.linalg.norm(a.p - b.p))
    rates = np.log2(np.array(diffs[:-1]) / diffs[1:])
    assert np.all(rates > 1.75) and rates[-1] > 1.9


@pytest.mark.parametrize("theta", [0.501, 1.0])
def test_steady_state_is_reproduced(theta):
    """With time-independent data the stationary discrete solution is a fixed point."""
    pr = BiotProblem(
        boundary=SLIP,
        alpha=0.7,
        c_s=0.2,
        f1=lambda x, y, t: 1.0 + x * y,
        f2=lambda x, y, t: np.stack([np.sin(3 * y), x], -1),
        p_D=lambda x, y, t: 0.5 * x,
    )
    spaces, st_ = setup(pr, level=2, k=1, dt=0.1, theta=theta)
    bl = st_.blocks
    A = sp.bmat(
        [[None, bl.B_w, None], [-bl.B_w.T, bl.M_w, None], [-pr.alpha * bl.B_u.T, None, bl.A_u]], format="csc"
    )
    b = np.concatenate(
        [
            assemble_scalar_load(spaces.Q, pr.f1, 0.0),
            assemble_darcy_load(pr, spaces.W, 0.0),
            assemble_momentum_load(pr, spaces.V, 0.0),
        ]
    )
    p, w, u = st_.system.split(spla.spsolve(A, b))
    s0 = BiotState(0.0, p, w, u)
    s = s0
    for _ in range(3):
        s = st_.step(s)
    for a, b_ in ((s.p, s0.p), (s.w, s0.w), (s.u, s0.u)):
        assert np.allclose(a, b_, rtol=0, atol=1e-11 * max(1.0, np.abs(b_).max()))
