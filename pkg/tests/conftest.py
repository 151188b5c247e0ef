import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from gauss_align.geometry import RigidTransform

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * rng.uniform(0, max_angle)).as_matrix()


def random_transform(rng, max_angle=np.pi, max_t=2.0):
    return RigidTransform(random_rotation(rng, max_angle), rng.uniform(-max_t, max_t, 3))


def rotation_deg(R1, R2):
    c = (np.trace(R1.T @ R2) - 1) / 2
    return np.degrees(np.arccos(np.clip(c, -1, 1)))


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
seeds = st.integers(0, 2**31 - 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def blob_scene(rng, n):
    """``n`` random anisotropic colored splats in the unit cube around the origin."""
    from gauss_align.splats import SplatSet

    mu = rng.uniform(-1, 1, (n, 3))
    A = rng.normal(size=(n, 3, 3)) * 0.08
    cov = A @ A.transpose(0, 2, 1) + 0.003 * np.eye(3)
    return SplatSet(mu, cov, rng.uniform(0.5, 1, n), rng.uniform(0, 1, (n, 3)), np.zeros((n, 0)))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def report_criterion(number: int, ok: bool, detail: str, seconds: float) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f} s)"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
