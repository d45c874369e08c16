import numpy as np
import pytest

from geochords.metric import (
    BlendMetric,
    ChartDomain,
    ConformalMetric,
    ConstantDiagonalMetric,
    DomainError,
    MetricError,
    NotPositiveDefiniteError,
    PeriodicBumpMetric,
    QuadricLevelSet,
    RotationalMetric,
    boundary_geometry,
    check_positive_definite,
    christoffel,
    complement_frame,
    curvature_term,
    gram_schmidt,
    is_strictly_convex,
    metric_from_dict,
    sphere_points,
    stereographic_sphere,
)
from geochords.perturbation import ConformalBump, PerturbedMetric

DISC = ChartDomain.unit_disc(3)
BOX = ChartDomain.box([(-1, 1)] * 3)
TORUS = ChartDomain.torus([1, 1, 1])


def sample_metrics():
    return {
        "diag": ConstantDiagonalMetric(DISC, [1, 2, 4]),
        "sphere": stereographic_sphere(),
        "quadratic": ConformalMetric(BOX, "quadratic", c=0.3),
        "rotational": RotationalMetric(DISC, [1, 0.5], [0.3, 0.1]),
        "bumps": PeriodicBumpMetric(TORUS, [1, 1, 1], [
            {"k": [1, 0, 0], "matrix": np.eye(3).tolist(), "amp": 0.2},
            {"k": [0, 1, 1], "matrix": [[0, 0.5, 0], [0.5, 0, 0], [0, 0, 1]], "amp": 0.1, "phase": 0.3},
        ]),
        "blend": BlendMetric(ConstantDiagonalMetric(DISC, [1, 2, 4]), RotationalMetric(DISC, [1, 0.5]), 0.4),
        "perturbed": PerturbedMetric(ConstantDiagonalMetric(BOX, [1, 2, 3]),
                                     [ConformalBump([0.1, 0, 0], 0.3, 0.05, [1, 1, 0])]),
    }


def probe_point(name):
    if name == "perturbed":
        return np.array([0.17, 0.12, -0.05])
    return np.array([0.31, -0.22, 0.17])


@pytest.mark.parametrize("name", list(sample_metrics()))
def test_first_derivatives_match_differences(name):
    m = sample_metrics()[name]
    x = probe_point(name)
    dg = m.first_derivatives(x)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (m.components(x + e) - m.components(x - e)) / (2 * h)
        assert np.allclose(dg[k], fd, atol=1e-7 * max(1, np.abs(dg).max()))


@pytest.mark.parametrize("name", list(sample_metrics()))
def test_second_derivatives_match_differences(name):
    m = sample_metrics()[name]
    x = probe_point(name)
    d2 = m.second_derivatives(x)
    h = 1e-5
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (m.first_derivatives(x + e) - m.first_derivatives(x - e)) / (2 * h)
        assert np.allclose(d2[k], fd, atol=1e-6 * max(1, np.abs(d2).max()))


@pytest.mark.parametrize("name", list(sample_metrics()))
def test_serialization_round_trip(name):
    m = sample_metrics()[name]
    back = metric_from_dict(m.to_dict())
    x = probe_point(name)
    assert np.array_equal(back.components(x), m.components(x))
    assert back.to_dict() == m.to_dict()


def test_scenario_shorthands():
    t = metric_from_dict({"family": "flat-torus", "periods": [1, 2, 3]})
    assert t.domain.is_torus and np.array_equal(t.components(np.zeros(3)), np.eye(3))
    s = metric_from_dict({"family": "stereographic-sphere", "radius": 2.0})
    assert np.allclose(s.components(np.zeros(3)), 16 * np.eye(3))


def test_christoffel_symmetric_in_lower_indices():
    G = christoffel(stereographic_sphere(), np.array([0.3, -0.4, 0.2]))
    assert np.allclose(G, G.transpose(0, 2, 1))


def test_sphere_sectional_curvature_is_one():
    m = stereographic_sphere()
    x = np.array([0.4, 0.1, -0.3])
    g = m.components(x)
    rng = np.random.default_rng(1)
    for _ in range(5):
        Y, v = rng.standard_normal(3), rng.standard_normal(3)
        num = Y @ g @ curvature_term(m, x, Y, v)
        den = (Y @ g @ Y) * (v @ g @ v) - (Y @ g @ v) ** 2
        assert num / den == pytest.approx(1.0, abs=1e-10)


def test_constant_metric_is_flat():
    m = ConstantDiagonalMetric(DISC, [1, 2, 4])
    assert m.is_constant()
    assert np.allclose(curvature_term(m, np.zeros(3), np.ones(3), np.array([1.0, 0, 2])), 0)


def test_domain_validation():
    with pytest.raises(DomainError):
        ChartDomain.box([(1, -1), (0, 1)])
    with pytest.raises(DomainError):
        ChartDomain.torus([1, 0])
    with pytest.raises(DomainError):
        ChartDomain.unit_disc(1)


def test_torus_difference_takes_shortest_representative():
    d = TORUS.difference(np.array([0.95, 0.1, 0.5]), np.array([0.05, 0.9, 0.5]))
    assert np.allclose(d, [-0.1, 0.2, 0.0])


def test_rejects_indefinite_metrics():
    with pytest.raises((MetricError, NotPositiveDefiniteError)):
        ConstantDiagonalMetric(DISC, [1, -1, 1])
    bad = RotationalMetric(DISC, [1, -1.5])  # A(s) < 0 near the boundary
    with pytest.raises(NotPositiveDefiniteError):
        check_positive_definite(bad, probes=500)


def test_gram_schmidt_and_complement_are_orthonormal():
    g = np.diag([1.0, 2.0, 4.0]) + 0.1
    E = np.array(gram_schmidt(g, np.eye(3)))
    assert np.allclose(E @ g @ E.T, np.eye(3), atol=1e-12)
    u = np.array([1.0, 1.0, 0.0])
    F = np.array(complement_frame(g, u))
    assert np.allclose(F @ g @ u, 0, atol=1e-12)
    assert np.allclose(F @ g @ F.T, np.eye(2), atol=1e-12)


def test_flat_disc_boundary_curvature_is_one():
    r = is_strictly_convex(ConstantDiagonalMetric(DISC, [1, 1, 1]))
    assert r.strictly_convex and r.min_curvature == pytest.approx(1.0, abs=1e-12)


def test_diagonal_disc_boundary_curvatures_at_axis_points():
    m = ConstantDiagonalMetric(DISC, [1, 2, 4])
    # F = |x|^2 - 1 at e1: Hess F = 2I, |dF|_g = 2, g-unit tangents e2/sqrt2, e3/2
    bg = boundary_geometry(m, np.array([1.0, 0, 0]))
    assert np.all(bg.principal_curvatures > 0)
    assert np.allclose(np.sort(bg.principal_curvatures), [0.25, 0.5])
    assert is_strictly_convex(m).strictly_convex


def test_quadric_projection_lands_on_the_surface():
    q = QuadricLevelSet.from_arrays(np.diag([1 / 0.09, 1 / 0.25, 1 / 0.49]), np.zeros(3), -1.0)
    for x in sphere_points(3, 20, 0) * 0.3:
        y = q.project(x)
        assert abs(q.value(y)) < 1e-12
    assert QuadricLevelSet.from_dict(q.to_dict()).to_dict() == q.to_dict()
