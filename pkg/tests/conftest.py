import numpy as np
import pytest

from plateid.constitutive import MATERIALS
from plateid.mesh import generate_pattern, generate_plate_mesh
from plateid.synthdata import forward_solve

PRESET_MATERIALS = {
    "cross": ("NH2_a", "NH2_b"),
    "split3": ("NH2_c", "ISH", "HW"),
    "multi_inclusion": ("ISH", "NH2_b", "HW", "NH2_a"),
    "homogeneous": ("NH2_a",),
}


class Solved:
    """Mesh, true segmentation, materials and forward solution of one preset."""

    def __init__(self, pattern, n):
        self.mesh = generate_plate_mesh(50.0, 1.0, n)
        self.segmap = generate_pattern(self.mesh, pattern)
        self.params = {i + 1: MATERIALS[m] for i, m in enumerate(PRESET_MATERIALS[pattern])}
        self.result = forward_solve(self.mesh, self.segmap, self.params)
        self.field = self.result.field
        self.forces = self.result.forces

    @property
    def theta_true(self):
        return np.concatenate([self.params[s] for s in sorted(self.params)])


_CACHE = {}


def solved(pattern, n):
    key = (pattern, n)
    if key not in _CACHE:
        _CACHE[key] = Solved(pattern, n)
    return _CACHE[key]


@pytest.fixture(scope="session")
def small_cross():
    return solved("cross", 12)


@pytest.fixture(scope="session")
def small_homogeneous():
    return solved("homogeneous", 8)


@pytest.fixture(scope="session")
def small_split3():
    return solved("split3", 12)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def report(criterion, ok, detail):
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
