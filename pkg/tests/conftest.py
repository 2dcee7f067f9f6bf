import numpy as np
import pytest
import torch

from sare_kit.fracture import fracture_object


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def cube2():
    """Unit-ball cube split once by the plane x = 0."""
    return fracture_object("cube", 2, seed=3, n_points=6000, cut_planes=[((1.0, 0.0, 0.0), 0.0)])


@pytest.fixture(scope="session")
def small_samples():
    return [fracture_object(shape, K, seed=11 + i, n_points=4000)
            for i, (shape, K) in enumerate([("sphere", 3), ("cube", 4), ("cylinder", 2), ("L-prism", 3)])]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
