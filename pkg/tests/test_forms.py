import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hdivbiot.checks import coercivity_constant
from hdivbiot.fespace import build_space, interpolate, project_l2
from hdivbiot.forms import (
    BiotProblem,
    assemble_ah,
    assemble_blocks,
    assemble_darcy_load,
    assemble_darcy_mass,
    assemble_dh,
    assemble_div,
    assemble_divdiv,
    assemble_momentum_load,
    assemble_pressure_mass,
    assemble_rhs,
    assemble_scalar_load,
    default_penalty,
    elasticity_of_field,
    minimum_penalty,
)
from hdivbiot.mesh import BoundarySpec, DisplacementBC, PressureBC
from hdivbiot.stepper import build_spaces
from hdivbiot.verification import exact_solution

from conftest import DIRICHLET, SLIP, tagged_mesh

TRACTION = BoundarySpec.uniform(PressureBC.DIRICHLET, DisplacementBC.NEUMANN)


def vec(fx, fy):
    return lambda x, y, t: np.stack([np.broadcast_to(fx(x, y), np.shape(x)), np.broadcast_to(fy(x, y), np.shape(x))], -1)


def space(level=2, k=1, boundary=DIRICHLET, family="RT"):
    return build_space(tagged_mesh(level, boundary), family, k)


@pytest.mark.parametrize("boundary", [DIRICHLET, SLIP, TRACTION])
@pytest.mark.parametrize("k", [1, 2])
def test_symmetric_operators(boundary, k):
    pr = BiotProblem(boundary=boundary, lam=3.0, mu=0.7)
    V = space(2, k, boundary)
    for A in (assemble_dh(pr, V), assemble_ah(pr, V), assemble_darcy_mass(pr, V), assemble_divdiv(V)):
        assert abs(A - A.T).max() < 1e-12


def test_pressure_mass_is_block_diagonal_spd():
    Q = space(2, 1, family="DQ")
    M = assemble_pressure_mass(Q).toarray()
    assert np.allclose(M, M.T)
    assert np.linalg.eigvalsh(M).min() > 0
    assert M.sum() == pytest.approx(1.0)


def test_dh_of_pure_shear():
    # u = (x, -y): D(u) = diag(1, -1), 2 |D|^2 integrates to 4
    pr = BiotProblem(boundary=TRACTION)
    V = space(2, 1, TRACTION)
    u = interpolate(V, vec(lambda x, y: x, lambda x, y: -y))
    assert u @ assemble_dh(pr, V) @ u == pytest.approx(4.0, rel=1e-12)
    assert u @ assemble_divdiv(V) @ u == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("k", [1, 2])
def test_rigid_motions_in_kernel_with_traction_boundary(k):
    pr = BiotProblem(boundary=TRACTION)
    V = space(3, k, TRACTION)
    D = assemble_dh(pr, V)
    for fn in (vec(lambda x, y: 1.0, lambda x, y: 0.0), vec(lambda x, y: 0.0, lambda x, y: 1.0),
               vec(lambda x, y: -y, lambda x, y: x)):
        assert np.abs(D @ interpolate(V, fn)).max() < 1e-10


def test_constant_not_in_kernel_with_dirichlet_boundary():
    pr = BiotProblem(boundary=DIRICHLET)
    V = space(2, 1)
    c = interpolate(V, vec(lambda x, y: 1.0, lambda x, y: 0.0))
    assert c @ assemble_dh(pr, V) @ c > 1.0


@given(st.floats(0.1, 10.0))
def test_darcy_mass_scales_with_inverse_permeability(s):
    W = space(1, 1)
    base = assemble_darcy_mass(BiotProblem(boundary=DIRICHLET), W)
    scaled = assemble_darcy_mass(BiotProblem(boundary=DIRICHLET, K=s * np.eye(2)), W)
    assert abs(scaled * s - base).max() < 1e-12


def test_anisotropic_permeability():
    W = space(1, 1)
    K = np.array([[2.0, 0.5], [0.5, 1.0]])
    M = assemble_darcy_mass(BiotProblem(boundary=DIRICHLET, K=K), W)
    c = interpolate(W, vec(lambda x, y: 1.0, lambda x, y: 0.0))
    assert c @ M @ c == pytest.approx(np.linalg.inv(K)[0, 0])


@given(st.floats(0.0, 1e4), st.floats(0.01, 10.0))
def test_ah_combines_shear_and_dilation(lam, mu):
    V = space(1, 1)
    pr = BiotProblem(boundary=DIRICHLET, lam=lam, mu=mu)
    base = BiotProblem(boundary=DIRICHLET)
    A = assemble_ah(pr, V)
    ref = mu * assemble_dh(base, V) + lam * assemble_divdiv(V)
    assert abs(A - ref).max() <= 1e-12 * max(1.0, lam)


def test_large_lambda_penalises_dilation():
    V = space(2, 1)
    A = assemble_ah(BiotProblem(boundary=DIRICHLET, lam=1e4), V)
    dil = interpolate(V, vec(lambda x, y: x * (1 - x), lambda x, y: 0.0))
    iso = interpolate(V, vec(lambda x, y: -y, lambda x, y: x))
    # a rotation has no dilation: lambda does not enter
    assert iso @ assemble_divdiv(V) @ iso == pytest.approx(0.0, abs=1e-12)
    assert dil @ A @ dil > 1e3


def test_div_form_integrates_divergence():
    mesh = tagged_mesh(2)
    V, Q = build_space(mesh, "RT", 1), build_space(mesh, "DQ", 1)
    B = assemble_div(V, Q)
    u = interpolate(V, vec(lambda x, y: x, lambda x, y: 2 * y))
    assert np.ones(Q.n_dofs) @ B @ u == pytest.approx(3.0)


def test_darcy_load_of_unit_pressure_is_minus_total_flux():
    pr = BiotProblem(boundary=DIRICHLET, p_D=lambda x, y, t: np.ones_like(x))
    mesh = tagged_mesh(2)
    W, Q = build_space(mesh, "RT", 1, "pN"), build_space(mesh, "DQ", 1)
    b = assemble_darcy_load(pr, W, 0.0)
    assert np.allclose(b, -(assemble_div(W, Q).T @ np.ones(Q.n_dofs)), atol=1e-13)


def test_zero_data_gives_zero_loads():
    pr = BiotProblem(boundary=SLIP)
    sp_ = build_spaces(tagged_mesh(2, SLIP), 1, pr)
    loads = assemble_rhs(pr, 0.3, sp_.Q, sp_.W, sp_.V)
    for v in (loads.mass, loads.darcy, loads.momentum):
        assert not np.any(v)


def test_scalar_load_of_constant():
    Q = space(2, 2, family="DQ")
    b = assemble_scalar_load(Q, lambda x, y, t: 2.0 + 0 * x, 0.0)
    assert b.sum() == pytest.approx(2.0)


@pytest.mark.parametrize("boundary", [DIRICHLET, SLIP, TRACTION])
def test_elastic_form_of_discrete_field_matches_matrix(boundary):
    pr = BiotProblem(boundary=boundary, lam=2.0, mu=1.5)
    V = space(2, 2, boundary)
    u = vec(lambda x, y: x**2 + y, lambda x, y: x * y)
    gu = lambda x, y, t: np.stack([np.stack([2 * x, np.ones_like(x)], -1), np.stack([y, x], -1)], -2)  # noqa: E731
    c = interpolate(V, u)
    assert np.allclose(elasticity_of_field(pr, V, u, gu), assemble_ah(pr, V) @ c, atol=1e-11)


@pytest.mark.parametrize("k", [1, 2])
def test_momentum_consistency_with_exact_fields(k):
    """The exact triple nearly satisfies the discrete momentum rows."""
    ex = exact_solution()
    pr = ex.problem()
    res = []
    for level in (3, 4):
        sp_ = build_spaces(tagged_mesh(level, SLIP), k, pr)
        V = sp_.V
        t = 0.3
        lhs = elasticity_of_field(pr, V, ex.u, ex.grad_u, t)
        p = project_l2(sp_.Q, ex.p, t)
        B = assemble_div(V, sp_.Q)
        r = lhs - pr.alpha * (B.T @ p) - assemble_momentum_load(pr, V, t)
        res.append(np.abs(r).max())
    assert res[1] < res[0] / 2


def test_penalty_defaults():
    assert default_penalty(1) == 24 and default_penalty(2) == 48
    assert minimum_penalty(1) == 6 and minimum_penalty(2) == 12


def test_low_penalty_warns():
    V = space(1, 1)
    with pytest.warns(UserWarning, match="coercivity"):
        assemble_dh(BiotProblem(boundary=DIRICHLET, gamma=1.0), V)


@pytest.mark.parametrize("bad", [dict(c_s=-1), dict(alpha=0), dict(alpha=1.5), dict(mu=0), dict(lam=-1),
                                 dict(gamma=0), dict(K=np.diag([1.0, -1.0])), dict(K=[[1, 1], [0, 1]])])
def test_problem_validation(bad):
    with pytest.raises(ValueError):
        BiotProblem(boundary=DIRICHLET, **bad)


def test_blocks_shapes():
    pr = BiotProblem(boundary=SLIP)
    sp_ = build_spaces(tagged_mesh(2, SLIP), 1, pr)
    bl = assemble_blocks(pr, sp_.Q, sp_.W, sp_.V)
    assert bl.B_w.shape == (sp_.Q.n_dofs, sp_.W.n_dofs)
    assert bl.B_u.shape == (sp_.Q.n_dofs, sp_.V.n_dofs)
    assert bl.A_u.shape == (sp_.V.n_dofs,) * 2


# -- coercivity -------------------------------------------------------------------------


@pytest.mark.parametrize("boundary", [DIRICHLET, SLIP])
@pytest.mark.parametrize("k", [1, 2])
def test_coercivity_stable_under_refinement(boundary, k):
    pr = BiotProblem(boundary=boundary)
    kap = np.array([coercivity_constant(pr, lv, k) for lv in (2, 3, 4)])
    assert np.all(kap > 0)
    assert (kap.max() - kap.min()) / kap.max() < 0.2


def test_coercivity_monotone_in_penalty():
    kap = []
    for g in (6.0, 12.0, 24.0, 48.0):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            kap.append(coercivity_constant(BiotProblem(boundary=DIRICHLET, gamma=g), 2, 1))
    assert np.all(np.diff(kap) > 0)


@pytest.mark.parametrize("k", [1, 2])
def test_guard_value_is_coercive(k):
    """The warning threshold already gives a positive constant; a quarter of it does not."""
    for boundary in (DIRICHLET, SLIP):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            at_guard = coercivity_constant(BiotProblem(boundary=boundary, gamma=minimum_penalty(k)), 2, k)
            below = coercivity_constant(BiotProblem(boundary=boundary, gamma=minimum_penalty(k) / 4), 2, k)
        assert at_guard > 0
        assert below < 0
