import numpy as np
import pytest

from cadtwin.geometry import TriMesh, icosphere
from cadtwin.library import synthetic_library
from cadtwin.shape_space import build_shape_space


@pytest.fixture(scope="session")
def library():
    return synthetic_library(12, seed=0)


@pytest.fixture(scope="session")
def space(library):
    return build_shape_space(library, 25)


@pytest.fixture(scope="session")
def small_library():
    # coarse exemplars keep render-heavy tests fast
    return synthetic_library(10, seed=3, resolution=4, wheel_segments=8)


@pytest.fixture(scope="session")
def small_space(small_library):
    return build_shape_space(small_library, 10)


def random_mesh(rng: np.random.Generator, level: int = 1, noise: float = 0.1) -> TriMesh:
    """Perturbed icosphere: closed, manifold, non-degenerate."""
    m = icosphere(level)
    return m.with_vertices(m.vertices * (1.0 + noise * rng.standard_normal((m.n_vertices, 1))))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
