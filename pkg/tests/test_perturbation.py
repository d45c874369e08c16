import json

import numpy as np
import pytest

from geochords.bvp import PointPair, solve_family
from geochords.geodesic import shoot
from geochords.intersection import intersection_matrix, pairwise_intersections
from geochords.metric import (
    ChartDomain,
    ConstantDiagonalMetric,
    RotationalMetric,
    check_positive_definite,
    flat_metric,
    metric_from_dict,
)
from geochords.perturbation import (
    MAX_SLOPE,
    AmplitudeError,
    ConformalBump,
    PerturbedMetric,
    SeparationFailedError,
    Shear,
    continue_solutions,
    mollifier,
    perturb,
    perturb_and_verify,
    perturbation_norms,
    probe_checksum,
    shear_check,
    shear_perturb,
    split_intersection,
    split_loop_velocity,
    support_mismatches,
)

DISC = ChartDomain.unit_disc(3)
BOX = flat_metric(ChartDomain.box([(-1, 1)] * 3))
TORUS = flat_metric(ChartDomain.torus([1, 1, 1]))
ROT = RotationalMetric(DISC, [1, 0.5], [0.3, 0.1])


def shear_for(metric, p, direction, eta=0.1, eps=0.01):
    p, d = np.asarray(p, float), np.asarray(direction, float)
    u = d / np.sqrt(d @ metric.components(p) @ d)
    path = shoot(metric, p - 2 * eta * u, 4 * eta * u, tolerance=1e-12)
    return shear_perturb(metric, path, None, eta, eps)


def test_mollifier_plateau_support_and_slope():
    rho = np.linspace(0, 1.2, 2401)
    f = np.array([mollifier(r)[0] for r in rho])
    assert np.all(f[rho <= 0.5] == 1.0) and np.all(f[rho >= 1.0] == 0.0)
    assert np.all(np.diff(f) <= 0)
    slope = max(abs(mollifier(r)[1]) for r in rho)
    assert slope == pytest.approx(MAX_SLOPE, rel=1e-6)
    assert abs(mollifier(0.75)[1]) == pytest.approx(MAX_SLOPE, rel=1e-12)


@pytest.mark.parametrize("base", [BOX, ROT])
def test_zero_amplitude_is_the_identity(base):
    p = np.array([0.1, 0.05, -0.1])
    for new in (perturb(base, [ConformalBump(p, 0.2, 0.0, [1, 0, 0])]), shear_for(base, p, [1, 0.2, 0], eps=0.0)):
        for x in base.domain.sample(200, 4):
            assert np.array_equal(new.components(x), base.components(x))


@pytest.mark.parametrize("kind", ["conformal", "shear"])
@pytest.mark.parametrize("base", [BOX, ROT])
def test_change_is_confined_to_the_support(kind, base):
    p = np.array([0.1, 0.05, -0.1])
    if kind == "conformal":
        new = perturb(base, [ConformalBump(p, 0.1, 0.02, [0.3, -1, 0.2])])
    else:
        new = shear_for(base, p, [1, 0.2, 0])
    assert support_mismatches(base, new, p, 0.1, count=1000, seed=2) == 0
    assert check_positive_definite(new, probes=2000) > 0
    assert perturbation_norms(base, new, p, 0.1)["c0"] > 0


def test_shear_keeps_the_line_a_geodesic_and_tilts_the_hypersurface():
    r = shear_check(BOX, {"p": [0, 0, 0], "direction": [1, 0, 0], "eta": 0.1, "eps": 0.01})
    assert r["geodesic_residual"] <= 1e-8
    assert r["reshot_deviation"] <= 1e-9
    assert r["tilt_error"] <= 1e-4
    assert r["outside_mismatches"] == 0


def test_shear_on_a_curved_base_keeps_the_central_curve_nearly_geodesic():
    r = shear_check(ROT, {"p": [0.1, 0.1, 0], "direction": [1, 0.3, 0.1], "eta": 0.1, "eps": 0.01})
    assert r["outside_mismatches"] == 0
    assert r["tilt_error"] <= 1e-4


@pytest.mark.parametrize("base", [BOX, ROT])
def test_component_change_is_linear_in_the_amplitude(base):
    p = np.array([0.1, 0.05, -0.1])
    for make in (lambda e: perturb(base, [ConformalBump(p, 0.1, e, [1, 1, 0])]),
                 lambda e: shear_for(base, p, [1, 0.2, 0], eps=e)):
        full = perturbation_norms(base, make(0.02), p, 0.1)["c0"]
        half = perturbation_norms(base, make(0.01), p, 0.1)["c0"]
        assert half / full == pytest.approx(0.5, rel=0.05)


def test_large_amplitudes_are_rejected():
    g = np.eye(3)
    with pytest.raises(AmplitudeError):
        Shear([0, 0, 0], [1, 0, 0], [0, 1, 0], g, 0.1, 0.2)
    with pytest.raises(AmplitudeError):
        ConformalBump([0, 0, 0], 0.1, 1.0, [1, 0, 0])


def test_fermi_inverse_round_trips():
    spec = shear_for(BOX, [0, 0, 0], [1, 0, 0], eps=0.05).specs[0]
    for t, x1 in ((0.03, 0.02), (-0.05, -0.01), (0.0, 0.04)):
        x = spec.center + t * spec.u + x1 * spec.e1
        s = spec.sheared_time(x)
        assert spec.invert(s, x1 * spec.e1) == pytest.approx(t, abs=1e-12)


def test_perturbed_metric_serialization_is_exact():
    new = perturb(ROT, [ConformalBump([0.1, 0, 0], 0.1, 0.02, [1, 2, 3])])
    new = shear_for(new, [-0.2, 0.1, 0], [0, 1, 0])
    d = json.loads(json.dumps(new.to_dict()))
    back = metric_from_dict(d)
    assert isinstance(back, PerturbedMetric) and back.to_dict() == new.to_dict()
    assert probe_checksum(back) == probe_checksum(new)


@pytest.fixture(scope="module")
def crossing_pair():
    a = solve_family(BOX, PointPair([-0.5, -0.5, 0], [0.5, 0.5, 0]), 3.0, multistart=10)
    b = solve_family(BOX, PointPair([-0.5, 0.5, 0], [0.5, -0.5, 0]), 3.0, multistart=10)
    return a, b


def test_identity_continuation_keeps_the_family(crossing_pair):
    a, _ = crossing_pair
    same = continue_solutions(BOX, BOX, a)
    assert same.lengths() == a.lengths()


def test_continuation_past_a_disjoint_bump_is_unchanged(crossing_pair):
    a, _ = crossing_pair
    new = perturb(BOX, [ConformalBump([0.3, -0.4, 0.2], 0.1, 0.02, [1, 0, 0])])
    cont = continue_solutions(BOX, new, a)
    assert len(cont) == len(a)
    assert np.allclose(cont.solutions[0].path.start_velocity, a.solutions[0].path.start_velocity, atol=1e-9)
    assert cont.solutions[0].path.metric is new


def test_continuation_through_a_bump_on_the_path(crossing_pair):
    a, _ = crossing_pair
    new = perturb(BOX, [ConformalBump([0.05, 0.0, 0.0], 0.1, 0.02, [0, 1, 0])])
    cont = continue_solutions(BOX, new, a)
    (s,) = cont.solutions
    assert s.residual_norm <= 1e-9 and s.kernel_dimension == 0
    assert abs(s.length - a.solutions[0].length) <= 10 * 0.02


def test_single_path_split_returns_the_metric_unchanged(crossing_pair):
    a, _ = crossing_pair
    res = split_intersection(BOX, a.solutions, [0, 0, 0])
    assert res.metric is BOX and res.attempts == []


def test_split_requires_paths_through_the_small_ball(crossing_pair):
    a, _ = crossing_pair
    far = solve_family(BOX, PointPair([-0.5, 0.6, 0.5], [0.5, 0.6, 0.5]), 3.0, multistart=5)
    with pytest.raises(ValueError):
        split_intersection(BOX, a.solutions + far.solutions, [0, 0, 0], condition=a.condition)
    with pytest.raises(ValueError):
        split_intersection(BOX, a.solutions * 2, [0, 0, 0], eta=1.0)


def test_crossed_segments_are_separated(crossing_pair):
    a, b = crossing_pair
    sols = a.solutions + b.solutions
    conds = [a.condition, b.condition]
    rep = perturb_and_verify(BOX, conds, 3.0, multistart=10, eta=0.1, eps=0.02)
    assert rep.success and len(rep.rounds) == 2
    assert rep.rounds[0]["counts"] == [[0, 1], [1, 0]]
    final = rep.final_family.solutions
    assert all(s.residual_norm <= 1e-9 for s in final)
    assert pairwise_intersections(final[0].path, final[1].path, 1e-7).events == []
    assert rep.metric_change()["c0"] <= 0.05
    assert len(sols) == len(final)


def test_exhausted_retries_raise_with_every_attempt(crossing_pair):
    a, b = crossing_pair
    # a tiny amplitude cannot move the crossing out of the ball
    with pytest.raises(SeparationFailedError) as err:
        split_intersection(BOX, [a.solutions[0], b.solutions[0]], [0, 0, 0], eps=1e-9, retries=2,
                           condition=None)
    assert len(err.value.attempts) == 2


def test_intersection_free_family_needs_no_rounds():
    rep = perturb_and_verify(BOX, PointPair([-0.5, 0, 0], [0.5, 0.1, 0]), 3.0, multistart=5)
    assert rep.success and len(rep.rounds) == 1 and rep.specs == []


def test_degenerate_solutions_are_not_continued():
    m = ConstantDiagonalMetric(DISC, [1, 1, 1])
    from geochords.bvp import BoundaryOrthogonal

    fam = solve_family(m, BoundaryOrthogonal(), 2.5, multistart=5)
    assert fam.solutions and fam.solutions[0].kernel_dimension > 0
    with pytest.raises(ValueError):
        continue_solutions(m, perturb(m, [ConformalBump([0, 0, 0], 0.1, 0.02, [1, 0, 0])]), fam)


def test_loop_velocities_become_independent():
    fam = solve_family(TORUS, PointPair([0.5] * 3, [0.5] * 3), 1.05, multistart=60)
    loop = fam.solutions[0]
    new, cont, before, after = split_loop_velocity(TORUS, loop, eta=0.1, eps=0.02)
    assert before < 1e-12 and after > 1e-4
    assert cont.residual_norm <= 1e-9
    assert support_mismatches(TORUS, new, loop.path.position(0.5), 0.1) == 0


@pytest.mark.slow
def test_torus_loops_pipeline_leaves_only_the_base_point():
    rep = perturb_and_verify(TORUS, PointPair([0.5] * 3, [0.5] * 3), 1.8, multistart=200, max_rounds=6)
    assert rep.success
    assert len(rep.final_family) == 13
    assert intersection_matrix(rep.final_family).is_zero
