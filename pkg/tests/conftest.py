import numpy as np
import pytest
from hypothesis import settings

from hdivbiot import BiotProblem, BoundarySpec, DisplacementBC, PressureBC, build_cartesian_mesh, classify_boundary

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")

DIRICHLET = BoundarySpec.uniform(PressureBC.DIRICHLET, DisplacementBC.DIRICHLET)
SLIP = BoundarySpec.uniform(PressureBC.DIRICHLET, DisplacementBC.SLIP)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tagged_mesh(level, boundary=DIRICHLET):
    return classify_boundary(build_cartesian_mesh(level), boundary)


def zero_problem(boundary=SLIP, **kw):
    return BiotProblem(boundary=boundary, **kw)


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record(number: int, name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (name, bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {number} {name}: {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n}. {name}: {detail}")
