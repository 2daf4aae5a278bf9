import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qjacobi.harmonic_boundary import CircleMapDecomposition
from qjacobi.mesh import disk_mesh, sphere_mesh
from qjacobi.qfield import DiscreteQField
from qjacobi.scene_geometry import builtin_scene

settings.register_profile("qjacobi", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("qjacobi")


def w3_decomposition(eps=0.0):
    """sum_{w^2 = z} [[w^3 + eps w^5]] in R^2 = C."""
    a = np.zeros((5, 2))
    b = np.zeros((5, 2))
    a[2, 0], b[2, 1] = 1.0, 1.0
    a[4, 0], b[4, 1] = eps, eps
    return CircleMapDecomposition.from_modes([(2, np.zeros(2), a, b)])


def w3_values(chart, eps=0.0):
    """Direct complex evaluation of the two sheets at chart points, shape (n, 2, 2)."""
    z = chart[:, 0] + 1j * chart[:, 1]
    w = np.sqrt(z)
    out = []
    for s in (w, -w):
        f = s ** 3 + eps * s ** 5
        out.append(np.stack([f.real, f.imag], axis=1))
    return np.stack(out, axis=1)


def embed_normal(mesh, vals):
    frame = mesh.scene.normal_frame(mesh.points)
    return np.einsum("nqk,nkd->nqd", vals, frame)


@pytest.fixture(scope="session")
def flat2():
    return builtin_scene("flat_disk", {"m": 2, "k": 2})


@pytest.fixture(scope="session")
def w3_mesh64(flat2):
    return disk_mesh(flat2, 1.0, 1 / 64)


@pytest.fixture(scope="session")
def w3_field64(w3_mesh64):
    return DiscreteQField(w3_mesh64, embed_normal(w3_mesh64, w3_values(w3_mesh64.chart)), normal=True)


@pytest.fixture(scope="session")
def sphere1():
    return builtin_scene("equatorial_sphere", {"m": 2, "k": 1})


@pytest.fixture(scope="session")
def sphere_mesh16(sphere1):
    return sphere_mesh(sphere1, 1 / 16)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
