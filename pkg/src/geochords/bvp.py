"""Multistart Newton shooting for geodesics under product boundary conditions.

Three conditions are supported: fixed endpoints (``PointPair``, loops when
``p == q``), chords orthogonal to the boundary sphere of a disc chart
(``BoundaryOrthogonal``) and geodesics orthogonal to a quadric level set at
both ends (``HypersurfaceOrthogonal``).
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .geodesic import (
    DegenerateStartError,
    GeodesicPath,
    IntegrationError,
    conjugate_points,
    equivalence_key,
    image_distance,
    jacobi_block,
    notify_path,
    shoot,
    with_variational,
)
from .metric import (
    DomainError,
    MetricError,
    MetricField,
    QuadricLevelSet,
    complement_frame,
    gram_schmidt,
    hypersurface_geometry,
    sphere_points,
)

RESIDUAL_TOL = 1e-9
SV_THRESHOLD = 1e-6


class ShotExitedError(RuntimeError):
    """A trial shot left the chart before reaching its end parameter."""


# ---------------------------------------------------------------------------
# boundary conditions


@dataclass(frozen=True)
class PointPair:
    p: tuple
    q: tuple
    kind: str = field(default="point-pair", init=False)

    def __init__(self, p, q):
        object.__setattr__(self, "p", tuple(float(c) for c in p))
        object.__setattr__(self, "q", tuple(float(c) for c in q))
        if len(self.p) != len(self.q):
            raise ValueError("p and q must have the same dimension")

    @property
    def is_loop(self) -> bool:
        return self.p == self.q

    def to_dict(self):
        return {"kind": self.kind, "p": list(self.p), "q": list(self.q)}


@dataclass(frozen=True)
class BoundaryOrthogonal:
    """Chords of a disc chart meeting the boundary sphere orthogonally."""

    kind: str = field(default="boundary-orthogonal", init=False)

    def level_set(self, n: int) -> QuadricLevelSet:
        return QuadricLevelSet.unit_sphere(n)

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class HypersurfaceOrthogonal:
    """Geodesics starting and ending orthogonally on ``{F = 0}``."""

    surface: QuadricLevelSet
    kind: str = field(default="hypersurface-orthogonal", init=False)

    def level_set(self, n: int) -> QuadricLevelSet:
        return self.surface

    def to_dict(self):
        return {"kind": self.kind, "level_set": self.surface.to_dict()}


BoundaryCondition = PointPair | BoundaryOrthogonal | HypersurfaceOrthogonal


def condition_from_dict(d: dict) -> BoundaryCondition:
    kind = d["kind"]
    if kind == "point-pair":
        return PointPair(d["p"], d["q"])
    if kind == "boundary-orthogonal":
        return BoundaryOrthogonal()
    if kind == "hypersurface-orthogonal":
        return HypersurfaceOrthogonal(QuadricLevelSet.from_dict(d["level_set"]))
    raise ValueError(f"unknown boundary condition {kind!r}")


def validate_condition(metric: MetricField, cond: BoundaryCondition, samples: int = 64) -> None:
    """Raise ``DomainError`` / ``MetricError`` if ``cond`` does not fit ``metric``."""
    n = metric.dimension
    dom = metric.domain
    if isinstance(cond, PointPair):
        if len(cond.p) != n:
            raise DomainError("endpoint dimension does not match the chart")
        for pt in (cond.p, cond.q):
            if not dom.contains(pt):
                raise DomainError(f"endpoint {pt} outside the chart")
        return
    if isinstance(cond, BoundaryOrthogonal) and dom.kind != "disc":
        raise DomainError("boundary-orthogonal chords need a unit-disc chart")
    level = cond.level_set(n)
    if np.asarray(level.A).shape != (n, n):
        raise DomainError("level-set dimension does not match the chart")
    for x in dom.sample(samples, seed=3):
        try:
            y = level.project(x)
        except MetricError:
            raise
        if np.linalg.norm(level.gradient(y)) < 1e-8:
            raise MetricError("level-set gradient vanishes on the hypersurface")


# ---------------------------------------------------------------------------
# solutions and families


@dataclass(eq=False)
class BvpSolution:
    path: GeodesicPath
    residual_norm: float
    kernel_dimension: int
    index: int
    classification: str
    equivalence_key: str
    jacobian_singular: bool = False

    def __post_init__(self):
        notify_path(self.path)

    @property
    def length(self) -> float:
        return self.path.speed * self.path.t_end

    @property
    def energy(self) -> float:
        return 0.5 * self.path.speed**2 * self.path.t_end

    @property
    def start(self) -> np.ndarray:
        return self.path.start_point

    @property
    def end(self) -> np.ndarray:
        return self.path.end_point

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "energy": self.energy,
            "kernel_dimension": self.kernel_dimension,
            "index": self.index,
            "classification": self.classification,
            "endpoints": [self.start.tolist(), self.end.tolist()],
            "start_velocity": self.path.start_velocity.tolist(),
            "equivalence_key": self.equivalence_key,
            "residual_norm": self.residual_norm,
        }


@dataclass(eq=False)
class SolutionFamily:
    metric: MetricField
    condition: BoundaryCondition
    length_cap: float
    solutions: list
    search_log: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.solutions)

    def lengths(self) -> list[float]:
        return [s.length for s in self.solutions]

    def keys(self) -> set[str]:
        return {s.equivalence_key for s in self.solutions}

    def to_dict(self) -> dict:
        return {
            "condition": self.condition.to_dict(),
            "length_cap": self.length_cap,
            "solutions": [s.to_dict() for s in self.solutions],
            "search_log": self.search_log,
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.metric.dimension
        w.writerow(
            ["id", "length", "energy", "kernel_dimension", "index", "classification", "residual_norm", "equivalence_key"]
            + [f"start_{i + 1}" for i in range(n)]
            + [f"end_{i + 1}" for i in range(n)]
        )
        for i, s in enumerate(self.solutions):
            w.writerow(
                [i, f"{s.length:.17g}", f"{s.energy:.17g}", s.kernel_dimension, s.index, s.classification,
                 f"{s.residual_norm:.17g}", s.equivalence_key]
                + [f"{c:.17g}" for c in s.start]
                + [f"{c:.17g}" for c in s.end]
            )
        return buf.getvalue()


# ---------------------------------------------------------------------------
# helpers


def orthonormal_frame(g: np.ndarray) -> np.ndarray:
    """Columns: g-orthonormal Gram-Schmidt frame of the coordinate axes."""
    return np.array(gram_schmidt(g, np.eye(g.shape[0]))).T


def direction_from_angles(angles) -> np.ndarray:
    """Unit vector in R^n from ``n - 1`` hyperspherical angles."""
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    n = angles.size + 1
    d = np.ones(n)
    for i, a in enumerate(angles):
        d[i] *= np.cos(a)
        d[i + 1:] *= np.sin(a)
    return d


def inward_normal(metric: MetricField, level: QuadricLevelSet, x) -> np.ndarray:
    """g-unit normal of the level set at ``x`` pointing towards ``F < 0``."""
    g = metric.components(x)
    dF = level.gradient(x)
    grad = np.linalg.solve(g, dF)
    return -grad / np.sqrt(dF @ grad)


def normal_frame(metric: MetricField, level: QuadricLevelSet, x):
    """``(nu, T)`` with ``T`` a ``n x (n-1)`` g-orthonormal tangent frame."""
    nu = inward_normal(metric, level, x)
    T = np.array(complement_frame(metric.components(x), nu)).T
    return nu, T


def _orthogonality_residual(metric, level, x1, v1):
    """``(F(x1), g(v1, t_i)/|v1|_g)`` over a tangent frame at ``x1``."""
    g = metric.components(x1)
    nu, T = normal_frame(metric, level, x1)
    sp = np.sqrt(v1 @ g @ v1)
    return np.concatenate([[level.value(x1)], T.T @ g @ v1 / sp])


def _orthogonality_residual_smooth(metric, level, x1, v1):
    """Frame-free version used inside Newton: ``F(x1)`` and the part of the
    covector ``g v1 / |v1|_g`` orthogonal to ``dF``."""
    g = metric.components(x1)
    w = g @ v1
    sp = np.sqrt(v1 @ w)
    dF = level.gradient(x1)
    dF = dF / np.linalg.norm(dF)
    w = w / sp
    return np.concatenate([[level.value(x1)], w - (w @ dF) * dF])


def residual(metric: MetricField, condition: BoundaryCondition, unknowns, base=None,
             tolerance: float = 1e-10) -> np.ndarray:
    """Shooting residual of dimension ``n``.

    PointPair unknowns are ``n - 1`` direction angles (in a g-orthonormal
    frame at ``p``) and a length; the residual is ``x(1) - q``.  Orthogonal
    conditions take ``n - 1`` tangent-plane coordinates around ``base`` on the
    constraint set and a signed length; the start velocity is the inward unit
    normal times the length.  The residual is the constraint value at
    ``x(1)`` and the cosines between ``x'(1)`` and a tangent frame there.

    Raises ``ShotExitedError`` if the trial shot leaves the chart.
    """
    unknowns = np.asarray(unknowns, dtype=float)
    n = metric.dimension
    if unknowns.shape != (n,):
        raise ValueError(f"expected {n} unknowns")
    if isinstance(condition, PointPair):
        p, q = np.asarray(condition.p), np.asarray(condition.q)
        E = orthonormal_frame(metric.components(p))
        v0 = unknowns[-1] * (E @ direction_from_angles(unknowns[:-1]))
        path = shoot(metric, p, v0, tolerance=tolerance)
        if path.exited:
            raise ShotExitedError("trial shot left the chart")
        return metric.domain.difference(path.end_point, q)
    level = condition.level_set(n)
    if base is None:
        base = level.project(-np.eye(n)[0] * 2.0)
    x0, v0 = _orthogonal_start(metric, level, np.asarray(base, float), unknowns)
    path = shoot(metric, x0, v0, tolerance=tolerance)
    if path.exited:
        raise ShotExitedError("trial shot left the chart")
    return _orthogonality_residual(metric, level, path.end_point, path.end_velocity)


def _orthogonal_start(metric, level, base, xi):
    TE = np.array(level.tangent_basis(base)).T
    x0 = level.project(base + TE @ xi[:-1])
    return x0, xi[-1] * inward_normal(metric, level, x0)


def admissibility_floor(metric: MetricField, condition: BoundaryCondition, floor: float | None = None) -> float:
    """Lower length bound below which solutions are treated as spurious.

    Distinct endpoints: half of a chart-based lower estimate of their
    distance.  Loops: the injectivity-radius bound.  Orthogonal kinds:
    a tenth of the injectivity-radius bound unless ``floor`` is given.
    """
    if floor is not None:
        return float(floor)
    if isinstance(condition, PointPair):
        if condition.is_loop:
            return metric.inj_lower_bound
        return 0.5 * chart_distance_estimate(metric, condition.p, condition.q)
    return 0.1 * metric.inj_lower_bound


def chart_distance_estimate(metric: MetricField, p, q, samples: int = 33) -> float:
    """``sqrt(lambda_min) * |q - p|`` with ``lambda_min`` the smallest metric
    eigenvalue sampled along the chart segment and over the chart."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    d = metric.domain.difference(q, p)
    pts = [p + s * d for s in np.linspace(0, 1, samples)]
    pts += list(metric.domain.sample(64, seed=11))
    lam = min(np.linalg.eigvalsh(metric.components(x))[0] for x in pts)
    return float(np.sqrt(max(lam, 0.0)) * np.linalg.norm(d))


# ---------------------------------------------------------------------------
# Newton solvers


@dataclass
class _NewtonResult:
    path: GeodesicPath | None
    residual_norm: float
    iterations: int
    status: str
    jacobian: np.ndarray | None = None


def _newton_point_pair(metric, p, q, v0, cap, tol, max_iter=50, stop_on_exit=True):
    dom = metric.domain
    g0 = metric.components(p)

    def evaluate(v):
        path = shoot(metric, p, v, tolerance=tol, variational=True, stop_on_exit=stop_on_exit)
        if path.exited:
            return path, None
        return path, dom.difference(path.end_point, q)

    try:
        path, r = evaluate(v0)
        # an initial shot that leaves the chart is shortened to stay inside
        for _ in range(8):
            if r is None and path.t_end > 0:
                v0 = v0 * 0.9 * path.t_end
                path, r = evaluate(v0)
    except (IntegrationError, DomainError, MetricError, np.linalg.LinAlgError):
        return _NewtonResult(None, np.inf, 0, "integration")
    if r is None:
        return _NewtonResult(None, np.inf, 0, "exited")
    v = v0
    rn = float(np.linalg.norm(r))
    n = p.size
    for it in range(max_iter):
        J = path.phi(path.t_end)[:n, n:]
        if rn <= 0.1 * RESIDUAL_TOL:
            return _NewtonResult(path, rn, it, "converged", J)
        step = -np.linalg.lstsq(J, r, rcond=None)[0]
        sn = float(np.sqrt(step @ g0 @ step))
        if sn > cap:
            step *= cap / sn
        alpha, accepted = 1.0, False
        while alpha > 1e-4:
            vt = v + alpha * step
            if np.sqrt(vt @ g0 @ vt) > 2.0 * cap + 1.0:
                alpha *= 0.5
                continue
            try:
                pt, rt = evaluate(vt)
            except (IntegrationError, MetricError, np.linalg.LinAlgError):
                rt = None
            if rt is not None and np.linalg.norm(rt) < (1 - 1e-4 * alpha) * rn:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            status = "converged" if rn <= RESIDUAL_TOL else "stalled"
            return _NewtonResult(path, rn, it, status, J)
        v, path, r = vt, pt, rt
        rn = float(np.linalg.norm(r))
    J = path.phi(path.t_end)[:n, n:]
    return _NewtonResult(path, rn, max_iter, "converged" if rn <= RESIDUAL_TOL else "max-iter", J)


def _newton_orthogonal(metric, level, x0, lam, cap, tol, max_iter=50):
    """Gauss-Newton on (start location, signed length) for orthogonal
    conditions; the start velocity is ``lam`` times the inward normal."""
    n = x0.size
    h = 1e-7

    def start(base, xi):
        TE = np.array(level.tangent_basis(base)).T
        x = level.project(base + TE @ xi[:-1])
        return x, xi[-1] * inward_normal(metric, level, x)

    def evaluate(base, xi):
        x, v = start(base, xi)
        path = shoot(metric, x, v, tolerance=tol, variational=True, stop_on_exit=False)
        return path, _orthogonality_residual_smooth(metric, level, path.end_point, path.end_velocity)

    def jacobian(base, xi, path):
        # d(x0, v0)/dxi by central differences of the cheap start map
        S = np.empty((2 * n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = h
            a, b = start(base, xi + e), start(base, xi - e)
            S[:, k] = (np.concatenate(a) - np.concatenate(b)) / (2 * h)
        x1, v1 = path.end_point, path.end_velocity
        R = np.empty((n + 1, 2 * n))
        z1 = np.concatenate([x1, v1])
        for k in range(2 * n):
            e = np.zeros(2 * n)
            e[k] = h
            zp, zm = z1 + e, z1 - e
            R[:, k] = (
                _orthogonality_residual_smooth(metric, level, zp[:n], zp[n:])
                - _orthogonality_residual_smooth(metric, level, zm[:n], zm[n:])
            ) / (2 * h)
        return R @ path.phi(path.t_end) @ S

    base = level.project(x0)
    xi = np.zeros(n)
    xi[-1] = lam
    try:
        path, r = evaluate(base, xi)
    except (IntegrationError, MetricError, DomainError, np.linalg.LinAlgError):
        return _NewtonResult(None, np.inf, 0, "integration")
    rn = float(np.linalg.norm(r))
    history = [rn]
    for it in range(max_iter):
        if rn <= 0.1 * RESIDUAL_TOL:
            return _NewtonResult(path, rn, it, "converged")
        J = jacobian(base, xi, path)
        step = -np.linalg.lstsq(J, r, rcond=None)[0]
        sn = np.linalg.norm(step)
        if sn > 0.5 * cap:
            step *= 0.5 * cap / sn
        alpha, accepted = 1.0, False
        while alpha > 1e-3:
            xt = xi + alpha * step
            if abs(xt[-1]) > 2.0 * cap + 1.0:
                alpha *= 0.5
                continue
            try:
                pt, rt = evaluate(base, xt)
            except (IntegrationError, MetricError, DomainError, np.linalg.LinAlgError):
                rt = None
            if rt is not None and np.linalg.norm(rt) < (1 - 1e-4 * alpha) * rn:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            return _NewtonResult(path, rn, it, "converged" if rn <= RESIDUAL_TOL else "stalled")
        path, r = pt, rt
        rn = float(np.linalg.norm(r))
        # re-center the local coordinates on the new start point
        base = path.start_point
        xi = np.zeros(n)
        xi[-1] = xt[-1]
        history.append(rn)
        # give up on slowly creeping iterates far from a root
        if it >= 8 and rn > 1e-3 and history[-1] > 0.5 * history[-5]:
            return _NewtonResult(path, rn, it, "stalled")
    return _NewtonResult(path, rn, max_iter, "converged" if rn <= RESIDUAL_TOL else "max-iter")


# ---------------------------------------------------------------------------
# kernel dimension and index


def jacobi_boundary_matrix(path: GeodesicPath, condition: BoundaryCondition) -> np.ndarray:
    """Linear map on initial data ``(Y(0), DY(0))`` whose kernel is the space
    of Jacobi fields satisfying the linearized boundary condition."""
    metric = path.metric
    n = path.dimension
    vpath = with_variational(path)
    F = jacobi_block(vpath, vpath.t_end)
    if isinstance(condition, PointPair):
        return np.vstack([np.hstack([np.eye(n), np.zeros((n, n))]), F[:n]])
    level = condition.level_set(n)
    rows = []
    for which, M in ((0, np.eye(2 * n)), (1, F)):
        x, v = (vpath.start_point, vpath.start_velocity) if which == 0 else (vpath.end_point, vpath.end_velocity)
        geo = hypersurface_geometry(metric, level, x)
        g = metric.components(x)
        T = np.array(geo.frame).T
        mu = float(v @ g @ geo.inward_normal)
        dF = level.gradient(x)
        Y, DY = M[:n], M[n:]
        rows.append((dF / np.linalg.norm(dF)) @ Y)
        # tangential part of DY + mu * W(Y), W the Weingarten map in frame T
        rows.extend(T.T @ g @ DY + mu * geo.shape_operator @ (T.T @ g @ Y))
    return np.vstack([np.atleast_2d(r) for r in rows])


def null_dimension(A: np.ndarray, threshold: float = SV_THRESHOLD) -> int:
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return A.shape[1]
    return int(np.sum(s < threshold * s[0])) + max(A.shape[1] - A.shape[0], 0)


def kernel_dimension(solution: BvpSolution | GeodesicPath, condition: BoundaryCondition) -> int:
    """Dimension of the space of Jacobi fields satisfying the linearized
    boundary condition (``Y(0) = Y(1) = 0`` for endpoints; tangency and the
    shape-operator condition at both ends for orthogonal kinds)."""
    path = solution.path if isinstance(solution, BvpSolution) else solution
    return null_dimension(jacobi_boundary_matrix(path, condition))


def focal_subspace(path: GeodesicPath, condition: BoundaryCondition) -> np.ndarray | None:
    """Initial Jacobi data of variations through geodesics leaving the start
    set orthogonally; ``None`` for point conditions."""
    if isinstance(condition, PointPair):
        return None
    n = path.dimension
    metric = path.metric
    level = condition.level_set(n)
    x, v = path.start_point, path.start_velocity
    geo = hypersurface_geometry(metric, level, x)
    T = np.array(geo.frame).T
    mu = float(v @ metric.components(x) @ geo.inward_normal)
    return np.vstack([T, -mu * T @ geo.shape_operator])


def morse_index(path: GeodesicPath, condition: BoundaryCondition) -> int:
    """Index of the energy at a solution, counted along the path.

    Endpoint conditions: conjugate times in the open interval.  Orthogonal
    kinds: focal times of the start set in ``(0, 1]`` plus the negative
    directions of the end form ``<DY(1) + mu W Y(1), Y(1)>`` on the Jacobi
    fields leaving the start set orthogonally.
    """
    from .geodesic import JacobiReport

    vpath = with_variational(path)
    U = focal_subspace(vpath, condition)
    rep = JacobiReport(vpath, vpath.t, np.empty((0,)))
    try:
        pts = conjugate_points(rep, U, include_end=False)
    except DegenerateStartError:
        return 0
    interior = int(sum(c.multiplicity for c in pts if c.t < vpath.t_end - 1e-6))
    if U is None:
        return interior
    n = vpath.dimension
    metric = vpath.metric
    level = condition.level_set(n)
    F = jacobi_block(vpath, vpath.t_end) @ U
    x1, v1 = vpath.end_point, vpath.end_velocity
    g = metric.components(x1)
    geo = hypersurface_geometry(metric, level, x1)
    T = np.array(geo.frame).T
    mu = float(v1 @ g @ geo.inward_normal)
    y = T.T @ g @ F[:n]
    dy = T.T @ g @ F[n:]
    Q = y.T @ (dy + mu * geo.shape_operator @ y)
    Q = 0.5 * (Q + Q.T)
    lc = np.linalg.cholesky(g).T
    sv = np.linalg.svd(lc @ F[:n], compute_uv=False)
    ref = max(np.linalg.svd(lc @ np.hstack([F[:n], v1[:, None]]), compute_uv=False)[0], 1e-300)
    at_end = int(np.sum(sv < SV_THRESHOLD * ref))
    scale = max(np.abs(Q).max(), 1e-300)
    negative = int(np.sum(np.linalg.eigvalsh(Q) < -1e-8 * max(scale, ref * ref)))
    return interior + at_end + negative


# ---------------------------------------------------------------------------
# multistart


def _interior_ok(path: GeodesicPath, margin: float = 1e-9) -> bool:
    r2 = np.einsum("ij,ij->i", path.x, path.x)
    return bool(np.all(r2[1:-1] <= (1 + margin) ** 2))


def _leaves_disc_through_interior(path: GeodesicPath) -> bool:
    """Interior points of a chord lie in the open disc."""
    ts = np.linspace(0, path.t_end, 65)[1:-1]
    return all(np.linalg.norm(path.position(t)) < 1.0 + 1e-9 for t in ts)


def _start_points(metric, condition, multistart, seed, cap, floor):
    """Quasi-random initial data, deterministic in ``seed``."""
    n = metric.dimension
    if isinstance(condition, PointPair):
        p = np.asarray(condition.p)
        E = orthonormal_frame(metric.components(p))
        u = qmc.Halton(d=n + 1, seed=seed).random(multistart)
        u = np.clip(u, 1e-12, 1 - 1e-12)
        from scipy.special import ndtri

        z = ndtri(u[:, :n])
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        lo, hi = floor, 1.25 * cap
        # volume-uniform in the shell lo <= |v| <= hi
        r = (lo**n + u[:, n] * (hi**n - lo**n)) ** (1.0 / n)
        return [E @ (zi * ri) for zi, ri in zip(z, r)]
    level = condition.level_set(n)
    if isinstance(condition, BoundaryOrthogonal):
        return list(sphere_points(n, multistart, seed))
    pts = metric.domain.sample(multistart, seed)
    return [level.project(x) for x in pts]


def _solve_one(args):
    metric, condition, start, cap, floor, tol = args
    n = metric.dimension
    out = []
    if isinstance(condition, PointPair):
        p, q = np.asarray(condition.p), np.asarray(condition.q)
        res = _newton_point_pair(metric, p, q, start, cap, tol)
        if res.status == "converged":
            out.append(res)
        return out
    level = condition.level_set(n)
    x0 = level.project(start)
    nu = inward_normal(metric, level, x0)
    # initial lengths: returns of the normal geodesic to the constraint set
    guesses = _return_lengths(metric, level, x0, nu, cap, isinstance(condition, BoundaryOrthogonal))
    for lam in guesses:
        res = _newton_orthogonal(metric, level, x0, lam, cap, tol)
        if res.status == "converged":
            out.append(res)
    return out


def _return_lengths(metric, level, x0, nu, cap, first_only):
    """Lengths at which the geodesic from ``x0`` along ``nu`` meets the level
    set again (up to ``1.25 * cap``)."""
    T = 1.25 * cap
    if first_only and metric.domain.kind == "disc":
        path = shoot(metric, x0, nu, t_end=T, stop_on_exit=True)
        return [path.t_end] if path.exited else []
    path = shoot(metric, x0, nu, t_end=T, stop_on_exit=False)
    vals = np.array([level.value(x) for x in path.x])
    out = []
    from scipy.optimize import brentq

    for i in range(1, len(vals) - 1):
        if vals[i] * vals[i + 1] < 0 and path.t[i] > 1e-6:
            out.append(brentq(lambda t: level.value(path.position(t)), path.t[i], path.t[i + 1]))
        if first_only and out:
            break
    return out


def _finalize(metric, condition, res, tol) -> BvpSolution | None:
    n = metric.dimension
    path = res.path
    if isinstance(condition, PointPair):
        r = metric.domain.difference(path.end_point, np.asarray(condition.q))
    else:
        level = condition.level_set(n)
        r = _orthogonality_residual(metric, level, path.end_point, path.end_velocity)
        if isinstance(condition, BoundaryOrthogonal):
            if path.speed * path.t_end <= 0 or not _leaves_disc_through_interior(path):
                return None
    rn = float(np.linalg.norm(r))
    if rn > RESIDUAL_TOL:
        return None
    A = jacobi_boundary_matrix(path, condition)
    kd = null_dimension(A)
    singular = False
    if isinstance(condition, PointPair):
        J = path.phi(path.t_end)[:n, n:]
        s = np.linalg.svd(J, compute_uv=False)
        singular = bool(s[-1] < SV_THRESHOLD * s[0])
    idx = morse_index(path, condition)
    cls = "degenerate" if (kd > 0 or singular) else "nondegenerate"
    return BvpSolution(path, rn, kd, idx, cls, equivalence_key(path), singular)


def solve_family(
    metric: MetricField,
    condition: BoundaryCondition,
    L: float,
    multistart: int = 100,
    seed: int = 0,
    workers: int = 1,
    tolerance: float = 1e-10,
    floor: float | None = None,
    dedup_tol: float = 1e-6,
) -> SolutionFamily:
    """Find geometrically distinct solutions of length at most ``L``.

    Every start runs an independent damped Newton iteration; merging is a
    serial reduction in start order, so the family does not depend on
    ``workers``.  Solutions are identified when their images (sampled at 64
    parameter values, reversal allowed) agree to ``dedup_tol``.
    """
    if L <= 0:
        raise ValueError("length cap must be positive")
    if multistart < 1:
        raise ValueError("multistart must be >= 1")
    validate_condition(metric, condition)
    a = admissibility_floor(metric, condition, floor)
    starts = _start_points(metric, condition, multistart, seed, L, a)
    jobs = [(metric, condition, s, L, a, tolerance) for s in starts]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_solve_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_solve_one(j) for j in jobs]

    log = {"starts": multistart, "converged": 0, "rejected": {}, "duplicates": 0, "admissibility_floor": a}
    kept: list[BvpSolution] = []
    for group in results:
        for res in group:
            log["converged"] += 1
            length = res.path.speed * res.path.t_end
            why = "above-cap" if length > L * (1 + 1e-12) else "below-floor" if length < a else None
            if why:
                log["rejected"][why] = log["rejected"].get(why, 0) + 1
                continue
            sol = _finalize(metric, condition, res, tolerance)
            if sol is None:
                log["rejected"]["residual-or-interior"] = log["rejected"].get("residual-or-interior", 0) + 1
                continue
            if any(abs(k.length - sol.length) < 1e-6 * max(1, sol.length)
                   and image_distance(k.path, sol.path) < dedup_tol for k in kept):
                log["duplicates"] += 1
                continue
            kept.append(sol)
    kept.sort(key=lambda s: (round(s.length, 9), s.equivalence_key))
    return SolutionFamily(metric, condition, float(L), kept, log)


# ---------------------------------------------------------------------------
# orthogonal-tangent chords


@dataclass(eq=False)
class TangentChord:
    path: GeodesicPath
    residual_norm: float


def _tangent_start(metric, level, base, xi):
    """Start on the sphere, direction tangent to it, signed length."""
    n = base.size
    TE = np.array(level.tangent_basis(base)).T
    x = level.project(base + TE @ xi[: n - 1])
    nu, T = normal_frame(metric, level, x)
    d = T @ direction_from_angles(xi[n - 1: 2 * n - 3]) if n > 2 else T[:, 0]
    return x, xi[-1] * d


def find_orthogonal_tangent_chords(
    metric: MetricField,
    L: float,
    multistart: int = 100,
    seed: int = 0,
    tolerance: float = 1e-10,
    max_iter: int = 30,
) -> list[TangentChord]:
    """Chords tangent to the boundary sphere at the start and orthogonal to
    it at the end, with interior in the open disc and length at most ``L``.

    Starts whose tangent geodesic leaves the disc immediately are discarded;
    the rest run Gauss-Newton on (boundary value, end cosines) over start
    point, tangent direction and length.
    """
    if metric.domain.kind != "disc":
        raise DomainError("orthogonal-tangent chords need a unit-disc chart")
    n = metric.dimension
    level = QuadricLevelSet.unit_sphere(n)
    pts = sphere_points(n, multistart, seed)
    angs = qmc.Halton(d=max(n - 2, 1), seed=seed + 1).random(multistart) * 2 * np.pi
    found: list[TangentChord] = []
    h = 1e-7
    m = 2 * n - 2
    for x0, ang in zip(pts, angs):
        x0 = level.project(x0)
        xi = np.zeros(m)
        xi[n - 1: 2 * n - 3] = ang[: n - 2]
        xi[-1] = 1.0
        x, d = _tangent_start(metric, level, x0, xi)
        probe = shoot(metric, x, d, t_end=L, tolerance=1e-8, stop_on_exit=True)
        # immediate exit: the tangent geodesic never enters the interior
        if probe.exited and probe.t_end < 1e-3:
            continue
        if not probe.exited:
            continue
        xi[-1] = probe.t_end
        base = x0
        rn_prev = np.inf
        for it in range(max_iter):
            xs, vs = _tangent_start(metric, level, base, xi)
            try:
                path = shoot(metric, xs, vs, tolerance=tolerance, variational=True, stop_on_exit=False)
            except (IntegrationError, MetricError, DomainError):
                break
            r = _orthogonality_residual_smooth(metric, level, path.end_point, path.end_velocity)
            rn = float(np.linalg.norm(r))
            if rn <= 0.1 * RESIDUAL_TOL:
                break
            if rn > 0.9 * rn_prev and it > 5:
                break
            rn_prev = rn
            S = np.empty((2 * n, m))
            for k in range(m):
                e = np.zeros(m)
                e[k] = h
                a, b = _tangent_start(metric, level, base, xi + e), _tangent_start(metric, level, base, xi - e)
                S[:, k] = (np.concatenate(a) - np.concatenate(b)) / (2 * h)
            z1 = np.concatenate([path.end_point, path.end_velocity])
            R = np.empty((n + 1, 2 * n))
            for k in range(2 * n):
                e = np.zeros(2 * n)
                e[k] = h
                R[:, k] = (
                    _orthogonality_residual_smooth(metric, level, (z1 + e)[:n], (z1 + e)[n:])
                    - _orthogonality_residual_smooth(metric, level, (z1 - e)[:n], (z1 - e)[n:])
                ) / (2 * h)
            J = R @ path.phi(path.t_end) @ S
            xi = xi - np.linalg.lstsq(J, r, rcond=None)[0]
            if not (0 < xi[-1] <= 2 * L):
                break
        else:
            continue
        if rn > RESIDUAL_TOL or not (0 < abs(xi[-1]) <= L):
            continue
        if not _leaves_disc_through_interior(path):
            continue
        if any(image_distance(f.path, path) < 1e-6 for f in found):
            continue
        found.append(TangentChord(path, rn))
    return found


# ---------------------------------------------------------------------------
# counting on tori


def count_growth(
    metric: MetricField,
    p,
    q,
    t_grid,
    multistart: int = 2000,
    seed: int = 0,
    workers: int = 1,
) -> list[tuple[float, int]]:
    """Number of distinct geodesic segments from ``p`` to ``q`` of length at
    most ``t`` for each ``t`` in ``t_grid``.

    One family is solved at the largest cap and filtered per cap, which
    makes the counts monotone by construction.
    """
    if metric.domain.kind != "torus":
        raise DomainError("count_growth needs a torus chart")
    caps = sorted(float(t) for t in t_grid)
    fam = solve_family(metric, PointPair(p, q), caps[-1], multistart=multistart, seed=seed, workers=workers)
    lengths = np.array(fam.lengths())
    return [(t, int(np.sum(lengths <= t * (1 + 1e-12)))) for t in caps]
