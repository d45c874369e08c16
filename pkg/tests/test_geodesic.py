import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geochords.geodesic import (
    GeodesicPath,
    conjugate_points,
    equivalence_key,
    event_ball_entry,
    image_distance,
    jacobi_propagate,
    path_from_csv,
    shoot,
)
from geochords.metric import ChartDomain, ConstantDiagonalMetric, DomainError, RotationalMetric, stereographic_sphere
from geochords.oracles import clairaut_constant, sphere_jacobi_block, stereographic_radius

DISC = ChartDomain.unit_disc(3)
SPHERE = stereographic_sphere()


def test_constant_metric_gives_straight_line():
    m = ConstantDiagonalMetric(DISC, [1, 2, 4])
    path = shoot(m, [0.1, 0, 0], [0.2, 0.1, -0.1])
    assert np.allclose(path.end_point, [0.3, 0.1, -0.1], atol=1e-15)
    assert path.length == pytest.approx(np.sqrt(0.04 + 2 * 0.01 + 4 * 0.01), rel=1e-12)


def test_integrated_straight_line_matches_exact_line():
    m = ConstantDiagonalMetric(DISC, [1, 2, 4])
    a = shoot(m, [0.1, 0, 0], [0.2, 0.1, -0.1], exact_constant=False)
    assert np.allclose(a.end_point, [0.3, 0.1, -0.1], atol=1e-12)


@pytest.mark.parametrize("arc", [0.3, 1.0, 2.0, 2.4])
def test_sphere_radial_geodesic_reaches_stereographic_radius(arc):
    # chart speed c at the origin has length 2c, so v = arc / 2 reaches arc at t = 1
    path = shoot(SPHERE, [0, 0, 0], [arc / 2, 0, 0], tolerance=1e-12)
    assert path.end_point[0] == pytest.approx(stereographic_radius(arc), rel=1e-9)
    assert path.length == pytest.approx(arc, rel=1e-9)


@settings(max_examples=25, deadline=None, derandomize=True)
@given(
    st.lists(st.floats(-0.8, 0.8), min_size=3, max_size=3),
    st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3),
)
def test_speed_is_conserved(p, v):
    v = np.array(v)
    if np.linalg.norm(v) < 1e-3:
        v = np.array([1.0, 0, 0])
    path = shoot(SPHERE, p, v, tolerance=1e-11)
    assert path.speed_drift() < 1e-8


def test_clairaut_constant_is_conserved_on_rotational_metrics():
    m = RotationalMetric(DISC, [1, 0.5], [0.3, 0.1])
    path = shoot(m, [0.2, -0.1, 0.05], [0.1, 0.5, 0.2], t_end=1.0, tolerance=1e-11)
    c0 = clairaut_constant(m, path.start_point, path.start_velocity)
    drift = max(abs(clairaut_constant(m, x, v) - c0) for x, v in zip(path.x, path.v))
    assert drift < 1e-9


def test_variational_matrix_matches_finite_differences():
    m = RotationalMetric(DISC, [1, 0.5], [0.3, 0.1])
    p, v = np.array([0.2, -0.1, 0.05]), np.array([0.3, 0.4, 0.1])
    path = shoot(m, p, v, variational=True, tolerance=1e-12)
    Phi = path.phi(path.t_end)
    h = 1e-6
    fd = np.empty_like(Phi)
    for j in range(6):
        dz = np.zeros(6)
        dz[j] = h
        a = shoot(m, p + dz[:3], v + dz[3:], t_end=path.t_end, tolerance=1e-12)
        b = shoot(m, p - dz[:3], v - dz[3:], t_end=path.t_end, tolerance=1e-12)
        fd[:, j] = (np.concatenate([a.end_point, a.end_velocity]) - np.concatenate([b.end_point, b.end_velocity])) / (2 * h)
    assert np.linalg.norm(Phi - fd) <= 1e-4 * np.linalg.norm(Phi)


def test_sphere_jacobi_block_through_the_origin():
    # symmetric chord through the origin: the conformal factor matches at both ends
    a, c = 0.4, 0.9
    t_end = 4 * np.arctan(a) / c  # arc from -a to a at unit-sphere speed c
    path = shoot(SPHERE, [-a, 0, 0], [(1 + a * a) * c / 2, 0, 0], t_end=t_end, tolerance=1e-12)
    assert path.end_point[0] == pytest.approx(a, abs=1e-9)
    assert path.speed == pytest.approx(c, rel=1e-12)
    rep = jacobi_propagate(path)
    M = rep.blocks[-1]
    ref = sphere_jacobi_block(c, path.t_end)
    for k in (1, 2):
        sub = M[np.ix_([k, 3 + k], [k, 3 + k])]
        assert np.allclose(sub, ref, atol=1e-8)


@pytest.mark.parametrize("f", [1.1, 1.25])
def test_sphere_conjugate_time(f):
    path = shoot(SPHERE, [-1, 0, 0], [f * np.pi, 0, 0], tolerance=1e-12, stop_on_exit=False)
    ct = conjugate_points(jacobi_propagate(path))
    assert len(ct) == 1
    assert ct[0].t == pytest.approx(1 / f, abs=1e-7)
    assert ct[0].multiplicity == 2


def test_flat_metric_has_no_conjugate_points():
    m = ConstantDiagonalMetric(DISC, [1, 2, 4])
    path = shoot(m, [-0.5, 0, 0], [1.0, 0.2, 0])
    assert conjugate_points(jacobi_propagate(path)) == []


def test_reversed_path_has_the_same_key():
    m = RotationalMetric(DISC, [1, 0.5], [0.3, 0.1])
    a = shoot(m, [0.2, -0.1, 0.05], [0.3, 0.4, 0.1], tolerance=1e-12)
    b = shoot(m, a.end_point, -a.end_velocity, tolerance=1e-12)
    assert equivalence_key(a) == equivalence_key(b)
    assert image_distance(a, b) < 1e-8


def test_exit_event_stops_at_the_disc_boundary():
    m = RotationalMetric(DISC, [1, 0.5])
    path = shoot(m, [0, 0, 0], [3.0, 1.0, 0], t_end=5.0)
    assert path.exited
    assert np.linalg.norm(path.end_point) == pytest.approx(1.0, abs=1e-6)


def test_input_validation():
    m = ConstantDiagonalMetric(DISC, [1, 2, 4])
    with pytest.raises(ValueError):
        shoot(m, [0, 0, 0], [1, 0, 0], tolerance=1e-2)
    with pytest.raises(ValueError):
        shoot(m, [0, 0], [1, 0])
    with pytest.raises(DomainError):
        shoot(m, [2, 0, 0], [1, 0, 0])
    with pytest.raises(ValueError):
        shoot(m, [0, 0, 0], [0.1, 0, 0]).phi(0.5)


def test_csv_round_trip(tmp_path):
    path = shoot(SPHERE, [0.1, 0.2, 0], [0.5, -0.2, 0.3])
    f = tmp_path / "path.csv"
    path.to_csv(f)
    back = path_from_csv(SPHERE, f)
    assert np.array_equal(back.x, path.x) and np.array_equal(back.v, path.v)
    assert back.length == path.length


def test_geodesic_residual_is_small_and_detects_non_geodesics():
    path = shoot(SPHERE, [0.1, 0.2, 0], [0.5, -0.2, 0.3], tolerance=1e-11)
    assert path.geodesic_residual() < 1e-6
    fake = GeodesicPath(SPHERE, path.x[0], path.v[0], path.t, path.x, path.v * 1.1, path.t_end, 1e-11)
    assert fake.geodesic_residual() > 1e-3


def test_ball_entry_on_a_straight_line():
    m = ConstantDiagonalMetric(DISC, [1, 1, 1])
    path = shoot(m, [-0.5, 0, 0], [1.0, 0, 0])
    (iv,) = event_ball_entry(path, [0, 0.05, 0], 0.1)
    half = np.sqrt(0.1**2 - 0.05**2)
    assert iv.t_in == pytest.approx(0.5 - half, abs=1e-7)
    assert iv.t_out == pytest.approx(0.5 + half, abs=1e-7)
    assert event_ball_entry(path, [0, 0.5, 0], 0.1) == []
