import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geochords.bvp import BoundaryOrthogonal, solve_family
from geochords.geodesic import GeodesicPath, shoot
from geochords.intersection import (
    IntersectionMisuseError,
    intersection_matrix,
    pairwise_intersections,
    self_event_bound,
    self_intersections,
)
from geochords.metric import ChartDomain, ConstantDiagonalMetric, flat_metric, stereographic_sphere

BOX = flat_metric(ChartDomain.box([(-1, 1)] * 3))
TORUS = flat_metric(ChartDomain.torus([1, 1, 1]))
SPHERE = stereographic_sphere()


def segment(metric, a, b):
    a = np.asarray(a, float)
    return shoot(metric, a, np.asarray(b, float) - a)


def through(metric, x, v, a=0.4, b=0.5):
    """Geodesic passing through ``x`` with velocity ``v`` at parameter ``a``."""
    back = shoot(metric, x, -np.asarray(v, float), t_end=a, tolerance=1e-12)
    return shoot(metric, back.end_point, -back.end_velocity, t_end=a + b, tolerance=1e-12)


def test_crossed_segments_meet_at_the_analytic_point():
    a = segment(BOX, [-0.5, -0.4, 0.1], [0.5, 0.6, 0.1])
    b = segment(BOX, [-0.5, 0.6, 0.1], [0.5, -0.4, 0.1])
    rep = pairwise_intersections(a, b)
    (e,) = rep.interior()
    assert np.allclose(e.location, [0.0, 0.1, 0.1], atol=1e-8)
    assert e.s == pytest.approx(0.5, abs=1e-8) and e.t == pytest.approx(0.5, abs=1e-8)


def test_segments_sharing_only_endpoints_report_endpoint_events():
    a = segment(BOX, [-0.5, 0, 0], [0.5, 0, 0])
    b = segment(BOX, [-0.5, 0, 0], [0.0, 0.5, 0])
    rep = pairwise_intersections(a, b)
    assert rep.interior() == []
    assert rep.count("endpoint") == 1


@pytest.fixture(scope="module")
def axis_chords():
    m = ConstantDiagonalMetric(ChartDomain.unit_disc(3), [1, 2, 4])
    return solve_family(m, BoundaryOrthogonal(), 6.0, multistart=150, seed=0)


def test_axis_chords_meet_pairwise_at_the_origin(axis_chords):
    mat = intersection_matrix(axis_chords)
    assert mat.counts.tolist() == [[0, 1, 1], [1, 0, 1], [1, 1, 0]]
    assert len(mat.locations) == 1 and np.allclose(mat.locations[0], 0, atol=1e-8)
    assert mat.consistency_errors == []


def test_straight_segment_is_simple():
    assert self_intersections(segment(BOX, [-0.9, -0.2, 0.3], [0.8, 0.4, -0.5])).events == []


def test_single_solution_family_gives_a_zero_matrix():
    mat = intersection_matrix([segment(BOX, [0, 0, 0], [0.5, 0.5, 0])])
    assert mat.counts.tolist() == [[0]] and mat.is_zero and mat.locations == []


def lemniscate(phase, amp=0.3, count=400):
    """Gerono figure-eight loop on the flat torus, sampled with exact
    velocities; it crosses itself at the center ``(0.5, 0.5, 0.5)``."""
    s = np.linspace(0.0, 1.0, count + 1)
    th = 2 * np.pi * s + phase
    c = np.array([0.5, 0.5, 0.5])
    x = c + amp * np.column_stack([np.cos(th), np.sin(th) * np.cos(th), 0 * th])
    v = 2 * np.pi * amp * np.column_stack([-np.sin(th), np.cos(2 * th), 0 * th])
    return GeodesicPath(TORUS, x[0], v[0], s, x, v, 1.0, 1e-10)


def test_figure_eight_loop_has_one_interior_event_at_the_crossing():
    rep = self_intersections(lemniscate(0.0))
    (e,) = rep.events
    assert e.classification == "interior"
    assert np.allclose(e.location, [0.5, 0.5, 0.5], atol=1e-6)
    assert (e.s, e.t) == pytest.approx((0.25, 0.75), abs=1e-6)


def test_loop_through_its_base_point_counts_it_as_interior():
    path = lemniscate(np.pi / 2)
    assert np.allclose(path.start_point, [0.5, 0.5, 0.5])
    (e,) = self_intersections(path).events
    assert e.classification == "interior" and e.s == 0.0
    assert e.t == pytest.approx(0.5, abs=1e-6)


def test_retraced_path_reports_one_overlap_per_shift():
    rep = self_intersections(shoot(TORUS, [0.1, 0.2, 0.3], [2.5, 0, 0]))
    assert [e.classification for e in rep.events] == ["overlap", "overlap"]


def angle_pair(draw_angles):
    a, b = draw_angles
    return np.array([np.cos(a), np.sin(a), 0.2]), np.array([np.cos(b), np.sin(b), -0.3])


planted = st.tuples(
    st.lists(st.floats(-0.3, 0.3), min_size=3, max_size=3),
    st.floats(0, np.pi),
    st.floats(0.15, np.pi - 0.15),
)


@settings(max_examples=100, deadline=None, derandomize=True)
@given(planted)
def test_planted_crossings_are_found_in_the_flat_box(cfg):
    x, a, gap = cfg
    u = np.array([np.cos(a), np.sin(a), 0.1])
    w = np.array([np.cos(a + gap), np.sin(a + gap), -0.2])
    rep = pairwise_intersections(through(BOX, x, u), through(BOX, x, w))
    (e,) = rep.interior()
    assert np.allclose(e.location, x, atol=1e-8)


@settings(max_examples=100, deadline=None, derandomize=True)
@given(planted)
def test_planted_crossings_are_found_on_the_sphere(cfg):
    x, a, gap = cfg
    u = np.array([np.cos(a), np.sin(a), 0.1])
    w = np.array([np.cos(a + gap), np.sin(a + gap), -0.2])
    rep = pairwise_intersections(through(SPHERE, x, u), through(SPHERE, x, w))
    (e,) = rep.interior()
    assert np.allclose(e.location, x, atol=1e-7)


def test_pairwise_detection_is_symmetric():
    a = through(SPHERE, [0.1, 0.2, 0], [1, 0, 0.3], 1.0, 1.5)
    b = through(SPHERE, [0.1, 0.2, 0], [0.2, 1, 0], 1.0, 1.5)
    ab, ba = pairwise_intersections(a, b), pairwise_intersections(b, a)
    la = sorted(e.location.tolist() for e in ab.events)
    lb = sorted(e.location.tolist() for e in ba.events)
    assert len(la) == len(lb) >= 1
    assert np.allclose(la, lb, atol=1e-9)


def test_reported_events_are_refined_local_minima():
    a = through(SPHERE, [0.1, -0.2, 0.05], [1, 0.1, 0.3])
    b = through(SPHERE, [0.1, -0.2, 0.05], [0.3, 1, -0.2])
    (e,) = pairwise_intersections(a, b).interior()

    def d2(s, t):
        r = a.position(s) - b.position(t)
        return float(r @ r)

    assert np.sqrt(d2(e.s, e.t)) <= 1e-7
    h = 1e-6
    base = d2(e.s, e.t)
    for ds, dt in ((h, 0), (-h, 0), (0, h), (0, -h)):
        assert d2(e.s + ds, e.t + dt) - base >= -1e-12


def test_same_curve_twice_is_misuse():
    a = segment(BOX, [0, 0, 0], [0.5, 0.1, 0])
    b = shoot(BOX, a.end_point, -a.end_velocity)
    with pytest.raises(IntersectionMisuseError):
        pairwise_intersections(a, b)


def test_near_parallel_near_miss_is_reported_as_tangential_suspect():
    a = segment(BOX, [-0.5, 0, 0], [0.5, 0, 0])
    b = segment(BOX, [-0.5, -2.5e-4, 5e-7], [0.5, 2.5e-4, 5e-7])
    rep = pairwise_intersections(a, b)
    assert [e.classification for e in rep.events] == ["tangential-suspect"]
    assert 1e-7 < rep.events[0].separation <= 1e-6


def test_self_event_bound_formula():
    path = shoot(TORUS, [0, 0, 0], [1.0, 0.5, 0.25])
    assert self_event_bound(path) == pytest.approx((np.sqrt(1.3125) / TORUS.inj_lower_bound + 1) ** 2)


def test_chords_meeting_on_the_boundary_are_a_consistency_error():
    m = flat_metric(ChartDomain.unit_disc(3))
    e1 = np.array([1.0, 0, 0])
    a = GeodesicPath(m, e1, -2 * e1, np.array([0.0, 1.0]), np.array([e1, -e1]), np.array([-2 * e1, -2 * e1]), 1.0, 1e-10)
    d = np.array([0.0, 1.0, 0]) - e1
    b = GeodesicPath(m, e1, d, np.array([0.0, 1.0]), np.array([e1, e1 + d]), np.array([d, d]), 1.0, 1e-10)
    rep = pairwise_intersections(a, b)
    assert rep.events == [] and len(rep.consistency_errors) == 1
