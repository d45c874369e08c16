import numpy as np
import pytest

from geochords.bvp import PointPair
from geochords.metric import (
    ChartDomain,
    ConformalMetric,
    RotationalMetric,
    christoffel,
    curvature_term,
    flat_metric,
    stereographic_sphere,
)
from geochords.oracles import (
    double_normals_constant,
    fd_christoffel,
    fd_curvature_operator,
    grid_distance,
    index_form_oracle,
    lattice_count,
    sphere_jacobi_block,
)


def test_lattice_count_small_cases():
    assert lattice_count([0] * 3, [0] * 3, [1, 1, 1], 1.0) == 3
    assert lattice_count([0] * 3, [0] * 3, [1, 1, 1], 1.5) == 9
    assert lattice_count([0, 0], [0.5, 0], [1, 1], 0.5) == 2
    assert lattice_count([0, 0], [0.5, 0], [1, 1], 0.5, diagonal=[4, 1]) == 0


def test_double_normals_of_a_planar_ellipse_are_its_axes():
    chords = double_normals_constant([1, 4], 10.0)
    assert [round(c.length, 9) for c in chords] == [2.0, 4.0]


def test_grid_distance_is_close_to_the_flat_distance():
    m = flat_metric(ChartDomain.box([(-1, 1), (-1, 1)]))
    d = grid_distance(m, [-0.5, -0.5], [0.5, 0.3], spacing=0.05, stencil=4)
    assert d == pytest.approx(np.hypot(1.0, 0.8), rel=5e-3)
    with pytest.raises(ValueError):
        grid_distance(flat_metric(ChartDomain.box([(-1, 1)] * 3)), [0, 0, 0], [0.5, 0, 0], 0.1)


def test_sphere_jacobi_block_is_symplectic():
    for t in (0.3, 1.0, 2.5):
        assert np.linalg.det(sphere_jacobi_block(1.7, t)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize(
    "metric",
    [RotationalMetric(ChartDomain.unit_disc(3), [1, 0.5], [0.3, 0.1]), ConformalMetric(ChartDomain.box([(-1, 1)] * 3), "quadratic", c=0.3)],
)
def test_difference_quotient_geometry_matches_the_analytic_jets(metric):
    x = np.array([0.2, -0.3, 0.1])
    v = np.array([0.4, 0.1, -0.2])
    assert np.allclose(fd_christoffel(metric, x), christoffel(metric, x), atol=1e-8)
    R = fd_curvature_operator(metric, x, v)
    for Y in np.eye(3):
        assert np.allclose(R @ Y, curvature_term(metric, x, Y, v), atol=1e-5)


@pytest.mark.parametrize("f, kernel, index", [(0.8, 0, 0), (1.0, 2, 0), (1.2, 0, 2)])
def test_index_form_on_sphere_segments(f, kernel, index):
    # from (-1, 0, 0) at unit-sphere speed f * pi: antipodal point at f = 1
    m = stereographic_sphere()
    res = index_form_oracle(m, [-1, 0, 0], [f * np.pi, 0, 0], PointPair([-1, 0, 0], [1, 0, 0]))
    assert (res.kernel_dimension, res.index) == (kernel, index)
