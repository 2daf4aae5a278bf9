import numpy as np
import pytest
from hypothesis import given, strategies as st

from qjacobi.mesh import disk_mesh, sphere_mesh
from qjacobi.qfield import DiscreteQField, dirichlet_energy
from qjacobi.scene_geometry import builtin_scene
from qjacobi.solver import (SolveConfig, SolverError, StabilityError, certify_minimizer,
                            minimize_dirichlet, minimize_jacobi, stability_constant)

from conftest import embed_normal, w3_values

QUICK = SolveConfig(restarts=1, anneal_steps=0)


def test_config_validation():
    with pytest.raises(SolverError):
        SolveConfig.from_dict({"restarts": 1, "bogus": 2})
    with pytest.raises(SolverError):
        SolveConfig(step_policy="vertex")
    with pytest.raises(SolverError):
        SolveConfig(anneal_cooling=1.5)
    assert SolveConfig.from_dict(SolveConfig(restarts=3).as_dict()).restarts == 3


def test_zero_boundary_gives_zero(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 8)
    bvals = np.zeros((int(mesh.boundary.sum()), 2, flat2.d))
    res = minimize_dirichlet(bvals, mesh, QUICK)
    assert res.energy == 0.0 and np.all(res.field.values == 0)


def test_affine_boundary_reproduced(flat2):
    # P1 elements contain affine maps, so the discrete minimizer is the affine map itself
    mesh = disk_mesh(flat2, 1.0, 1 / 8)

    def g(points):
        x = points[:, :2]
        return np.stack([np.stack([x[:, 0], 2 * x[:, 1], 0 * x[:, 0], 0 * x[:, 0]], 1)], 1)

    res = minimize_dirichlet(g, mesh, QUICK)
    assert np.allclose(res.field.values, g(mesh.points), atol=1e-12)


def test_w3_solver_reaches_extension(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 32)
    rolled = DiscreteQField(mesh, embed_normal(mesh, w3_values(mesh.chart)), normal=True)
    res = minimize_jacobi(rolled.values, mesh, SolveConfig(restarts=1, anneal_steps=2), init=rolled.values)
    assert res.energy <= dirichlet_energy(rolled) + 1e-12
    assert res.energy <= 6 * np.pi * 1.02
    assert res.field.normal


def test_seed_determinism(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 8)
    rolled = embed_normal(mesh, w3_values(mesh.chart))
    cfg = SolveConfig(restarts=2, anneal_steps=3, seed=11)
    a = minimize_dirichlet(rolled, mesh, cfg)
    b = minimize_dirichlet(rolled, mesh, cfg)
    assert a.energy == b.energy and np.array_equal(a.field.values, b.field.values)


def test_boundary_shape_error(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 8)
    with pytest.raises(SolverError):
        minimize_dirichlet(np.zeros((3, 1, flat2.d)), mesh, QUICK)


def test_stability_disk_and_sphere():
    flat = builtin_scene("flat_disk", {"m": 2, "k": 1})
    assert stability_constant(flat, disk_mesh(flat, 1.0, 1 / 32)) == pytest.approx(5.7832, rel=1e-2)
    sph = builtin_scene("equatorial_sphere", {"m": 2, "k": 1})
    assert stability_constant(sph, sphere_mesh(sph, 1 / 16)) == pytest.approx(-2.0, rel=1e-2)


def test_stability_scales_like_inverse_radius_squared():
    flat = builtin_scene("flat_disk", {"m": 2, "k": 1})
    c1 = stability_constant(flat, disk_mesh(flat, 1.0, 1 / 16))
    c2 = stability_constant(flat, disk_mesh(flat, 0.5, 1 / 32))
    assert c2 == pytest.approx(4 * c1, rel=1e-9)


def test_unstable_cap_raises():
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 1})
    mesh = disk_mesh(sc, 2.0, 1 / 8)
    bvals = embed_normal(mesh, np.ones((mesh.n_vertices, 1, 1)))[mesh.boundary]
    with pytest.raises(StabilityError):
        minimize_jacobi(bvals, mesh, QUICK)


def test_certificate_of_w3_minimizer(w3_field64):
    mesh = w3_field64.mesh
    res = minimize_dirichlet(w3_field64.values, mesh, SolveConfig(restarts=1, anneal_steps=0),
                             init=w3_field64.values)
    cert = certify_minimizer(res.field)
    h = 1 / 64
    assert cert["outer_residual"] <= 10 * h * h
    assert cert["inner_residual"] <= 10 * h * h
    assert cert["decay_exponent"] == pytest.approx(3.0, abs=5e-2)


@given(st.integers(0, 2 ** 31))
def test_minimizer_beats_random_competitors(seed):
    sc = builtin_scene("flat_disk", {"m": 2, "k": 1})
    mesh = _small(sc)
    rng = np.random.default_rng(seed)
    bvals = embed_normal(mesh, rng.normal(size=(mesh.n_vertices, 1, 1)))[mesh.boundary]
    res = minimize_dirichlet(bvals, mesh, QUICK)
    comp = res.field.values.copy()
    inner = ~mesh.boundary
    comp[inner] += embed_normal(mesh, 0.1 * rng.normal(size=(mesh.n_vertices, 1, 1)))[inner]
    assert res.energy <= dirichlet_energy(DiscreteQField(mesh, comp)) + 1e-12


_SMALL = {}


def _small(sc):
    if "m" not in _SMALL:
        _SMALL["m"] = disk_mesh(sc, 1.0, 1 / 8)
    return _SMALL["m"]


def test_constant_boundary_gives_constant(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 8)
    v = np.array([0, 0, 1.0, -2.0])
    bvals = np.broadcast_to(v, (int(mesh.boundary.sum()), 2, 4))
    res = minimize_dirichlet(bvals, mesh, QUICK)
    assert res.energy == pytest.approx(0.0, abs=1e-20)
    assert np.allclose(res.field.values, v, atol=1e-12)


def p1_laplace_oracle(mesh, g):
    """Independent P1 assembly on the flat chart with scipy's direct solver."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.linalg import spsolve
    P = mesh.chart
    n = len(P)
    rows, cols, vals = [], [], []
    for c in mesh.cells:
        X = P[c]
        B = np.array([X[1] - X[0], X[2] - X[0]]).T
        area = 0.5 * abs(np.linalg.det(B))
        G = np.linalg.inv(B).T @ np.array([[-1, 1, 0], [-1, 0, 1]])
        K = area * G.T @ G
        for i in range(3):
            for j in range(3):
                rows.append(c[i])
                cols.append(c[j])
                vals.append(K[i, j])
    K = coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    fixed = mesh.boundary
    u = np.zeros(n)
    u[fixed] = g[fixed]
    free = ~fixed
    u[free] = spsolve(K[free][:, free].tocsc(), -K[free][:, fixed] @ u[fixed])
    return u


def test_single_valued_matches_laplace_oracle():
    sc = builtin_scene("flat_disk", {"m": 2, "k": 1})
    mesh = disk_mesh(sc, 1.0, 1 / 16)
    x, y = mesh.chart[:, 0], mesh.chart[:, 1]
    g = np.exp(x) * np.sin(2 * y) + x * x
    vals = embed_normal(mesh, g[:, None, None])
    res = minimize_dirichlet(vals[mesh.boundary], mesh, QUICK)
    assert np.max(np.abs(res.field.values[:, 0, 2] - p1_laplace_oracle(mesh, g))) <= 1e-8


def test_flat_jacobi_equals_dirichlet(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 8)
    rolled = embed_normal(mesh, w3_values(mesh.chart))
    cfg = SolveConfig(restarts=2, anneal_steps=2, seed=5)
    a = minimize_dirichlet(rolled, mesh, cfg)
    b = minimize_jacobi(rolled, mesh, cfg)
    assert np.array_equal(a.field.values, b.field.values) and a.energy == b.energy


def test_small_cap_zero_trace_is_zero():
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 1})
    mesh = disk_mesh(sc, 0.5, 1 / 16)
    res = minimize_jacobi(np.zeros((int(mesh.boundary.sum()), 1, sc.d)), mesh, QUICK)
    assert np.all(res.field.values == 0)


def test_cap_weak_equation_residual_decreases():
    from qjacobi.qfield import OuterTest, variation_residuals
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 1})
    res_norm = []
    for h in (1 / 8, 1 / 16, 1 / 32):
        mesh = disk_mesh(sc, 1.0, h)
        g = 1 + 0.5 * mesh.chart[:, 0] + 0.25 * mesh.chart[:, 1] ** 2
        bvals = embed_normal(mesh, g[:, None, None])[mesh.boundary]
        N = minimize_jacobi(bvals, mesh, QUICK).field
        pole = mesh.pole

        def psi(x, u, pole=pole):
            eta = np.clip(1 - sc.distance_sigma(pole, x) ** 2 / 0.81, 0, None) ** 2
            return eta[:, None] * sc.normal_frame(x)[:, 0]

        res_norm.append(variation_residuals(N, OuterTest(psi)).relative)
    assert res_norm[2] < res_norm[1] < res_norm[0] or max(res_norm) < 1e-10


@given(st.floats(0.1, 10.0))
def test_scaling_equivariance(s):
    sc = builtin_scene("flat_disk", {"m": 2, "k": 2})
    mesh = disk_mesh(sc, 1.0, 1 / 8)
    rolled = embed_normal(mesh, w3_values(mesh.chart))
    a = minimize_dirichlet(rolled, mesh, QUICK, init=rolled)
    b = minimize_dirichlet(s * rolled, mesh, QUICK, init=s * rolled)
    assert b.energy == pytest.approx(s * s * a.energy, rel=1e-9)
    assert np.allclose(b.field.values, s * a.field.values, atol=1e-9 * s)


@given(st.floats(0.1, 10.0))
def test_scaling_equivariance_default_start(s):
    sc = builtin_scene("flat_disk", {"m": 2, "k": 2})
    mesh = disk_mesh(sc, 1.0, 1 / 8)
    rolled = embed_normal(mesh, w3_values(mesh.chart))
    a = minimize_dirichlet(rolled, mesh, QUICK)
    b = minimize_dirichlet(s * rolled, mesh, QUICK)
    assert b.energy == pytest.approx(s * s * a.energy, rel=1e-9)
    assert np.allclose(b.field.values, s * a.field.values, atol=1e-9 * s)


def test_energy_trace_monotone(flat2):
    mesh = disk_mesh(flat2, 1.0, 1 / 8)
    rolled = embed_normal(mesh, w3_values(mesh.chart))
    res = minimize_dirichlet(rolled, mesh, SolveConfig(restarts=2, anneal_steps=4, seed=2))
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
