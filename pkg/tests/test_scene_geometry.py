import numpy as np
import pytest
from hypothesis import given, strategies as st

from qjacobi.mesh import MeshError, disk_mesh, sphere_mesh, square_mesh
from qjacobi.scene_geometry import SceneError, builtin_scene, partial_ricci

coord = st.floats(-0.9, 0.9, allow_nan=False)


def test_unknown_scene_and_params():
    with pytest.raises(SceneError):
        builtin_scene("torus")
    with pytest.raises(SceneError):
        builtin_scene("flat_disk", {"q": 1})


@pytest.mark.parametrize("name,params", [("flat_disk", {"m": 2, "k": 2, "K": 1}),
                                         ("equatorial_sphere", {"m": 2, "k": 2})])
def test_normal_frame_orthonormal_and_normal(name, params):
    sc = builtin_scene(name, params)
    pts = sc.chart_to_point(np.array([[0.1, 0.2], [0.5, -0.3]]))
    F = sc.normal_frame(pts)
    for f, T in zip(F, sc.tangent_frame(pts)):
        assert np.allclose(f @ f.T, np.eye(sc.k), atol=1e-12)
        assert np.allclose(f @ T.T, 0, atol=1e-12)


@given(coord, coord)
def test_chart_round_trip_sphere(a, b):
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 1})
    c = np.array([[a, b]])
    x = sc.chart_to_point(c)
    assert np.linalg.norm(x) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(sc.point_to_chart(x), c, atol=1e-10)
    assert sc.distance_sigma(sc.base_pole, x[0]) == pytest.approx(np.hypot(a, b), abs=1e-10)


def test_sphere_partial_ricci_equals_m():
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 2})
    x = sc.chart_to_point(np.array([[0.3, 0.1]]))
    nu = sc.normal_frame(x)[0]
    assert float(np.ravel(partial_ricci(sc, x, nu[0][None], nu[0][None]))[0]) == pytest.approx(2.0, abs=1e-10)
    assert float(np.ravel(partial_ricci(sc, x, nu[0][None], nu[1][None]))[0]) == pytest.approx(0.0, abs=1e-10)


def test_flat_curvature_vanishes():
    sc = builtin_scene("flat_disk", {"m": 2, "k": 1})
    ric, a, abar = sc.curvature_forms(np.zeros((1, sc.d)))
    assert np.all(ric == 0) and np.all(a == 0) and np.all(abar == 0)


def test_geodesic_ball_area_converges():
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 1})
    exact = 2 * np.pi * (1 - np.cos(1.0))
    errs = [abs(disk_mesh(sc, 1.0, h).area() - exact) for h in (1 / 8, 1 / 16)]
    assert errs[1] < errs[0] / 3


def test_flat_disk_and_square_area():
    sc = builtin_scene("flat_disk", {"m": 2, "k": 1})
    assert disk_mesh(sc, 1.0, 1 / 32).area() == pytest.approx(np.pi, rel=2e-3)
    assert square_mesh(sc, 1.0, 1 / 8).area() == pytest.approx(1.0, abs=1e-14)


def test_sphere_area_and_no_boundary():
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 1})
    mesh = sphere_mesh(sc, 1 / 16)
    assert mesh.area() == pytest.approx(4 * np.pi, rel=2e-3)
    assert not mesh.boundary.any()


def test_boundary_is_one_closed_loop():
    sc = builtin_scene("flat_disk", {"m": 2, "k": 1})
    loops = disk_mesh(sc, 1.0, 1 / 8).boundary_loops()
    assert len(loops) == 1 and len(loops[0]) >= 8


def test_radius_beyond_injectivity():
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 1})
    with pytest.raises((SceneError, MeshError)):
        disk_mesh(sc, 4.0, 1 / 8)


def test_sphere_ambient_form_kills_mixed_pairs():
    from qjacobi.scene_geometry import second_form_contract
    sc = builtin_scene("equatorial_sphere", {"m": 2, "k": 1})
    x = sc.chart_to_point(np.array([[0.2, 0.3]]))
    nu = sc.normal_frame(x)[:, 0]
    a_sq, row = second_form_contract(sc, x, nu)
    # Abar(X, Y) = -<X, Y> x on the unit sphere, and tangent vectors are orthogonal to nu
    assert a_sq == 0.0 and np.allclose(row, 0.0)
    xi = sc.tangent_frame(x)[0]
    assert np.allclose(sc.ambient_second_form(x, xi[0][None], xi[0][None]), -x, atol=1e-12)
