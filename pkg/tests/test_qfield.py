import numpy as np
import pytest
from hypothesis import given, strategies as st

from qjacobi.mesh import disk_mesh, square_mesh
from qjacobi.qfield import (DiscreteQField, FieldError, InnerTest, OuterTest, StaleMatchingError,
                            dirichlet_energy, fd_variations, jac_energy, lipschitz_selection,
                            pushforward_mass, variation_residuals)
from qjacobi.scene_geometry import builtin_scene

from conftest import embed_normal, w3_values


def random_normal_field(mesh, Q, rng):
    coef = rng.normal(size=(mesh.n_vertices, Q, mesh.scene.k))
    # smooth modulation keeps gradients bounded under refinement
    x = mesh.points
    coef *= (1 + np.sin(3 * x[:, :1]) * np.cos(2 * x[:, 1:2]))[:, :, None]
    return DiscreteQField(mesh, embed_normal(mesh, coef), normal=True)


def test_constant_field_zero_energy(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 8)
    N = DiscreteQField(mesh, embed_normal(mesh, np.ones((mesh.n_vertices, 3, flat2.k))), normal=True)
    for fl in ("full", "tangent_M", "normal"):
        assert dirichlet_energy(N, flavor=fl) == 0.0
    with pytest.raises(FieldError):
        dirichlet_energy(DiscreteQField(mesh, np.ones((mesh.n_vertices, 3, flat2.d))), flavor="normal")


def test_linear_map_energy_exact(flat2):
    mesh = square_mesh(flat2, 1.0, 1 / 8)
    L = np.array([[1.0, 0.0], [0.0, 2.0]])
    vals = np.zeros((mesh.n_vertices, 1, flat2.d))
    vals[:, 0, :2] = mesh.chart @ L.T
    assert dirichlet_energy(DiscreteQField(mesh, vals)) == pytest.approx(5.0, abs=1e-12)


def test_w3_energy_converges_to_6pi(flat2):
    errs = []
    for h in (1 / 16, 1 / 32):
        mesh = disk_mesh(flat2, 1.0, h)
        N = DiscreteQField(mesh, embed_normal(mesh, w3_values(mesh.chart)), normal=True)
        errs.append(abs(dirichlet_energy(N) - 6 * np.pi))
    assert errs[1] < errs[0] / 3
    assert errs[1] / (6 * np.pi) < 5e-3


def test_matchings_realize_distance(w3_field64):
    assert w3_field64.verify_matchings()


def test_stale_matching_detected(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 8)
    N = DiscreteQField(mesh, np.zeros((mesh.n_vertices, 2, flat2.d)))
    N.edge_matchings()
    N.values.setflags(write=True)
    N.values[0, 0, 0] = 1.0
    with pytest.raises(StaleMatchingError):
        dirichlet_energy(N)


def test_flat_jac_equals_dirichlet(w3_field64):
    rep = jac_energy(w3_field64)
    assert rep.jac == pytest.approx(dirichlet_energy(w3_field64), abs=1e-12)


def test_jac_needs_normal_field(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 8)
    with pytest.raises(FieldError):
        jac_energy(DiscreteQField(mesh, np.zeros((mesh.n_vertices, 1, flat2.d))))


def test_sphere_unit_normal_jac(sphere1, sphere_mesh16):
    nu = sphere1.normal_frame(sphere_mesh16.points)[:, 0]
    N = DiscreteQField(sphere_mesh16, nu[:, None, :], normal=True)
    assert jac_energy(N).jac == pytest.approx(-8 * np.pi, rel=2e-3)


@given(st.integers(0, 2 ** 31), st.integers(1, 3))
def test_jac_evaluations_agree_and_flavors_ordered(seed, Q):
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 2})
    mesh = _cap8(sc)
    N = random_normal_field(mesh, Q, np.random.default_rng(seed))
    rep = jac_energy(N)
    assert abs(rep.jac - rep.jac_perturbative) <= 1e-10 * (abs(rep.dir_full) + abs(rep.b_value))
    full, tan, nor = (dirichlet_energy(N, flavor=f) for f in ("full", "tangent_M", "normal"))
    assert full >= tan - 1e-12 and tan >= nor - 1e-12


_CAPS = {}


def _cap8(sc):
    if "cap" not in _CAPS:
        _CAPS["cap"] = disk_mesh(sc, 1.0, 1 / 8)
    return _CAPS["cap"]


def test_pushforward_t0_is_area(sphere1, sphere_mesh16):
    nu = sphere1.normal_frame(sphere_mesh16.points)[:, 0]
    N = DiscreteQField(sphere_mesh16, nu[:, None, :], normal=True)
    assert pushforward_mass(N, 0.0) == pytest.approx(sphere_mesh16.area(), rel=1e-13)


@pytest.mark.parametrize("t", [0.1, 0.3, -0.2])
def test_pushforward_latitude_spheres(sphere1, sphere_mesh16, t):
    nu = sphere1.normal_frame(sphere_mesh16.points)[:, 0]
    N1 = DiscreteQField(sphere_mesh16, nu[:, None, :], normal=True)
    N2 = DiscreteQField(sphere_mesh16, np.stack([nu, -nu], axis=1), normal=True)
    assert pushforward_mass(N1, t) == pytest.approx(np.cos(t) ** 2 * 4 * np.pi, rel=3e-3)
    assert pushforward_mass(N2, t) == pytest.approx(2 * np.cos(t) ** 2 * 4 * np.pi, rel=3e-3)


def test_pushforward_beyond_injectivity(sphere1, sphere_mesh16):
    nu = sphere1.normal_frame(sphere_mesh16.points)[:, 0]
    N = DiscreteQField(sphere_mesh16, nu[:, None, :], normal=True)
    with pytest.raises(ValueError):
        pushforward_mass(N, 10.0)


def test_flat_second_variation_is_dirichlet():
    sc = builtin_scene("flat_disk", {"m": 2, "k": 1})
    mesh = disk_mesh(sc, 1.0, 1 / 16)
    r2 = np.sum(mesh.chart ** 2, axis=1)
    f = (1 - r2) ** 2
    N = DiscreteQField(mesh, embed_normal(mesh, f[:, None, None]), normal=True)
    d1, d2 = fd_variations(N)
    assert abs(d1) < 1e-10
    assert d2 == pytest.approx(dirichlet_energy(N), rel=1e-6)


def test_sphere_second_variation(sphere1, sphere_mesh16):
    nu = sphere1.normal_frame(sphere_mesh16.points)[:, 0]
    N = DiscreteQField(sphere_mesh16, np.stack([nu, -nu], axis=1), normal=True)
    d1, d2 = fd_variations(N)
    assert abs(d1) < 1e-8
    assert d2 == pytest.approx(-16 * np.pi, rel=1e-2)
    assert d2 == pytest.approx(jac_energy(N).jac, rel=1e-6)


def test_zero_field_residuals_exactly_zero(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 8)
    N = DiscreteQField(mesh, np.zeros((mesh.n_vertices, 2, flat2.d)), normal=True)
    out = variation_residuals(N, OuterTest(lambda x, u: u))
    inn = variation_residuals(N, InnerTest(lambda x: x * (1 - np.sum(x * x, axis=1, keepdims=True))))
    assert out.residual == 0.0 and inn.residual == 0.0


def test_outer_residual_harmonic_converges():
    sc = builtin_scene("flat_disk", {"m": 2, "k": 1})
    res = []
    for h in (1 / 8, 1 / 16, 1 / 32):
        mesh = disk_mesh(sc, 1.0, h)
        u = mesh.chart[:, 0] ** 2 - mesh.chart[:, 1] ** 2
        N = DiscreteQField(mesh, embed_normal(mesh, u[:, None, None]), normal=True)

        def psi(x, v):
            eta = np.clip(1 - np.sum(x[:, :2] ** 2, axis=1), 0, None)
            return eta[:, None] ** 2 * v

        res.append(abs(variation_residuals(N, OuterTest(psi)).residual))
    assert res[2] < res[1] < res[0]
    assert res[2] / res[1] < 0.35


def test_unsupported_test_shape(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 8)
    N = DiscreteQField(mesh, np.zeros((mesh.n_vertices, 1, flat2.d)))
    with pytest.raises(FieldError):
        variation_residuals(N, "radial")


def test_selection_monodromy(w3_field64):
    rep = lipschitz_selection(w3_field64)
    assert rep.has_monodromy
    assert all(b.cycle_type == (2,) for b in rep.branch_edges)


def test_selection_of_smooth_multiplicity_field(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 16)
    f = np.stack([np.sin(mesh.chart[:, 0]), mesh.chart[:, 1]], axis=1)
    vals = embed_normal(mesh, np.stack([f, f + 1.0], axis=1))
    rep = lipschitz_selection(DiscreteQField(mesh, vals, normal=True))
    assert not rep.has_monodromy
    got = np.sort(np.stack([s[:, 2] for s in rep.selections], axis=1), axis=1)
    assert np.allclose(got, np.sort(vals[:, :, 2], axis=1))
