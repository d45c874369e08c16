"""Geodesic shooting, Jacobi fields and conjugate/focal points.

Geodesics are parametrized on ``[0, t_end]`` (normally ``[0, 1]``) with
constant speed, so for ``t_end = 1`` the length equals the speed and the
energy is half its square.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, minimize_scalar

from .metric import (
    DomainError,
    MetricField,
    christoffel_derivatives_from_jet,
    complement_frame,
    connection_from_jet,
)


class IntegrationError(RuntimeError):
    """Step-size underflow or another failure of the ODE integrator."""


class DegenerateStartError(ValueError):
    pass


# ---------------------------------------------------------------------------
# right-hand sides


# Callables invoked with every solver-produced path; used by test harnesses
# to check global invariants.
PATH_OBSERVERS: list = []


def notify_path(path) -> None:
    for observer in PATH_OBSERVERS:
        observer(path)


def geodesic_acceleration(metric: MetricField, x, v) -> np.ndarray:
    """``-Gamma(x)(v, v)``."""
    g, dg = metric.jet(x, 1)
    M = dg @ v
    low = v @ M - 0.5 * (M @ v)
    return -np.linalg.solve(g, low)


def _geodesic_rhs(metric: MetricField):
    n = metric.dimension
    if metric.is_constant():
        def rhs(t, z):
            out = np.zeros_like(z)
            out[:n] = z[n:2 * n]
            return out
        return rhs

    def rhs(t, z):
        x, v = z[:n], z[n:]
        return np.concatenate([v, geodesic_acceleration(metric, x, v)])

    return rhs


def variational_matrix(metric: MetricField, x, v):
    """Linearization ``A`` of ``(x, v)' = (v, -Gamma(x)(v, v))`` plus the
    connection at ``x``."""
    n = x.size
    g, dg, d2g = metric.jet(x, 2)
    gamma, ginv = connection_from_jet(g, dg)
    # d_m Gamma^k(v, v)
    dgam = christoffel_derivatives_from_jet(g, dg, d2g, gamma, ginv)
    D = np.einsum("mkij,i,j->km", dgam, v, v)
    Gv = np.einsum("kij,i->kj", gamma, v)
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -D
    A[n:, n:] = -2.0 * Gv
    acc = -np.einsum("kj,j->k", Gv, v)
    return A, acc, gamma


def _variational_rhs(metric: MetricField):
    n = metric.dimension
    m = 2 * n
    if metric.is_constant():
        A = np.zeros((m, m))
        A[:n, n:] = np.eye(n)

        def rhs(t, z):
            out = np.zeros_like(z)
            out[:n] = z[n:m]
            out[m:] = (A @ z[m:].reshape(m, m)).ravel()
            return out
        return rhs

    def rhs(t, z):
        x, v = z[:n], z[n:m]
        A, acc, _ = variational_matrix(metric, x, v)
        phi = z[m:].reshape(m, m)
        return np.concatenate([v, acc, (A @ phi).ravel()])

    return rhs


# ---------------------------------------------------------------------------
# paths


def _hermite(t0, t1, y0, y1, d0, d1, t):
    h = t1 - t0
    s = (t - t0) / h
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1


@dataclass(eq=False)
class GeodesicPath:
    """A numerically integrated geodesic with dense samples."""

    metric: MetricField
    start_point: np.ndarray
    start_velocity: np.ndarray
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    t_end: float
    tolerance: float
    exited: bool = False
    dense: Callable | None = field(default=None, repr=False)
    variational: bool = False

    @property
    def dimension(self) -> int:
        return self.x.shape[1]

    @property
    def speed(self) -> float:
        g = self.metric.components(self.start_point)
        return float(np.sqrt(self.start_velocity @ g @ self.start_velocity))

    @property
    def length(self) -> float:
        sp = self.speeds()
        return float(np.trapezoid(sp, self.t))

    @property
    def energy(self) -> float:
        sp = self.speeds()
        return float(0.5 * np.trapezoid(sp**2, self.t))

    @property
    def end_point(self) -> np.ndarray:
        return self.x[-1]

    @property
    def end_velocity(self) -> np.ndarray:
        return self.v[-1]

    def speeds(self) -> np.ndarray:
        return np.array([np.sqrt(v @ self.metric.components(x) @ v) for x, v in zip(self.x, self.v)])

    def _locate(self, t):
        i = int(np.searchsorted(self.t, t, side="right")) - 1
        return min(max(i, 0), len(self.t) - 2)

    def state(self, t: float):
        """Position and velocity at parameter ``t``."""
        if self.dense is not None:
            z = self.dense(t)
            n = self.dimension
            return z[:n].copy(), z[n:2 * n].copy()
        return self.hermite_state(t)

    def hermite_state(self, t: float):
        i = self._locate(t)
        t0, t1 = self.t[i], self.t[i + 1]
        x0, x1, v0, v1 = self.x[i], self.x[i + 1], self.v[i], self.v[i + 1]
        h = t1 - t0
        s = (t - t0) / h
        dx = ((6 * s * s - 6 * s) * (x0 - x1) / h + (3 * s * s - 4 * s + 1) * v0 + (3 * s * s - 2 * s) * v1)
        return _hermite(t0, t1, x0, x1, v0, v1, t), dx

    def position(self, t: float) -> np.ndarray:
        return self.state(t)[0]

    def velocity(self, t: float) -> np.ndarray:
        return self.state(t)[1]

    def phi(self, t: float) -> np.ndarray:
        """Coordinate variational matrix ``d(x, v)(t) / d(x, v)(0)``."""
        if not self.variational:
            raise ValueError("path was integrated without the variational equation")
        n = self.dimension
        return self.dense(t)[2 * n:].reshape(2 * n, 2 * n)

    def arc_samples(self, count: int = 64) -> np.ndarray:
        ts = np.linspace(0.0, self.t_end, count)
        return np.array([self.position(t) for t in ts])

    def speed_drift(self) -> float:
        g0 = self.speed**2
        sq = self.speeds() ** 2
        return float(np.max(np.abs(sq - g0)) / g0) if g0 > 0 else 0.0

    def geodesic_residual(self) -> float:
        """Max of ``|x'' + Gamma(x)(x', x')|`` at sample-interval midpoints of
        the quintic Hermite interpolant through ``(x, x', x'')``."""
        worst = 0.0
        acc = np.array([geodesic_acceleration(self.metric, x, v) for x, v in zip(self.x, self.v)])
        for i in range(len(self.t) - 1):
            h = self.t[i + 1] - self.t[i]
            if h <= 0:
                continue
            # quintic Hermite at s = 1/2: value and second derivative
            x0, x1, v0, v1, a0, a1 = self.x[i], self.x[i + 1], self.v[i], self.v[i + 1], acc[i], acc[i + 1]
            xm = 0.5 * (x0 + x1) + 5 * h / 32 * (v0 - v1) + h * h / 64 * (a0 + a1)
            vm = 15 / (8 * h) * (x1 - x0) - 7 / 16 * (v0 + v1) + h / 32 * (a1 - a0)
            am = 1.5 * (v1 - v0) / h - 0.25 * (a0 + a1)
            r = am - geodesic_acceleration(self.metric, xm, vm)
            worst = max(worst, float(np.linalg.norm(r)))
        return worst

    def reparametrized(self, s):
        """Arc-length view: positions at arc lengths ``s``."""
        return np.array([self.position(si / self.speed) for si in np.atleast_1d(s)])

    def to_csv(self, path) -> None:
        n = self.dimension
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"v_{i + 1}" for i in range(n)])
            for t, x, v in zip(self.t, self.x, self.v):
                w.writerow([f"{t:.17g}"] + [f"{c:.17g}" for c in x] + [f"{c:.17g}" for c in v])


def path_from_csv(metric: MetricField, path, tolerance: float = 1e-10) -> GeodesicPath:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = (data.shape[1] - 1) // 2
    t, x, v = data[:, 0], data[:, 1:1 + n], data[:, 1 + n:]
    return GeodesicPath(metric, x[0], v[0], t, x, v, float(t[-1]), tolerance)


def _exit_event(metric: MetricField, margin: float):
    dom = metric.domain
    n = dom.dimension
    if dom.kind == "disc":
        def ev(t, z):
            x = z[:n]
            return float(x @ x) - (1.0 + margin) ** 2
    elif dom.kind == "box":
        lo = np.array([b[0] for b in dom.bounds]) - margin
        hi = np.array([b[1] for b in dom.bounds]) + margin

        def ev(t, z):
            x = z[:n]
            return float(min(np.min(x - lo), np.min(hi - x)) < 0) - 0.5
    else:
        return None
    ev.terminal = True
    ev.direction = 1 if dom.kind == "disc" else 0
    return ev


def _densify(sol, t_nodes, n, tol):
    """Insert samples so cubic Hermite interpolation between samples is within
    ``10 * tol`` of the integrator's dense output."""
    out = [t_nodes[0]]
    for t0, t1 in zip(t_nodes[:-1], t_nodes[1:]):
        if t1 <= t0:
            continue
        z0, z1, zm = sol(t0), sol(t1), sol(0.5 * (t0 + t1))
        xm = _hermite(t0, t1, z0[:n], z1[:n], z0[n:2 * n], z1[n:2 * n], 0.5 * (t0 + t1))
        err = float(np.max(np.abs(xm - zm[:n])))
        scale = max(1.0, float(np.max(np.abs(zm[:n]))))
        k = 1
        if err > 10 * tol * scale:
            k = int(np.ceil((err / (10 * tol * scale)) ** 0.25)) + 1
        out.extend(np.linspace(t0, t1, k + 1)[1:])
    return np.array(out)


def shoot(
    metric: MetricField,
    p,
    v,
    t_end: float = 1.0,
    tolerance: float = 1e-10,
    stop_on_exit: bool = True,
    variational: bool = False,
    exit_margin: float = 1e-7,
    densify: bool = True,
    exact_constant: bool = True,
) -> GeodesicPath:
    """Integrate the geodesic with initial point ``p`` and velocity ``v``.

    With ``stop_on_exit`` the integration halts once the path leaves a disc
    or box chart by more than ``exit_margin``; the returned partial path has
    ``exited=True``.
    """
    if not 1e-13 <= tolerance <= 1e-4:
        raise ValueError("tolerance must lie in [1e-12, 1e-4]")
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    n = p.size
    if p.shape != (metric.dimension,) or v.shape != p.shape:
        raise ValueError("point and velocity must match the chart dimension")
    if not metric.domain.contains(p, margin=max(exit_margin, 1e-7)):
        raise DomainError("start point outside the chart domain")
    if exact_constant and metric.is_constant():
        return _shoot_straight(metric, p, v, t_end, tolerance, stop_on_exit, variational, exit_margin)
    if variational:
        rhs = _variational_rhs(metric)
        z0 = np.concatenate([p, v, np.eye(2 * n).ravel()])
    else:
        rhs = _geodesic_rhs(metric)
        z0 = np.concatenate([p, v])
    events = None
    if stop_on_exit:
        ev = _exit_event(metric, exit_margin)
        events = [ev] if ev is not None else None
    max_step = np.inf
    scale = metric.feature_scale
    if scale is not None and np.linalg.norm(v) > 0:
        max_step = scale / np.linalg.norm(v)
    res = solve_ivp(
        rhs,
        (0.0, float(t_end)),
        z0,
        method="DOP853",
        rtol=tolerance,
        atol=tolerance,
        dense_output=True,
        events=events,
        max_step=max_step,
    )
    if res.status == -1:
        raise IntegrationError(res.message)
    exited = res.status == 1
    t_nodes = res.t
    if densify:
        t_nodes = _densify(res.sol, t_nodes, n, tolerance)
    Z = res.sol(t_nodes) if len(t_nodes) > 1 else res.y
    return GeodesicPath(
        metric=metric,
        start_point=p,
        start_velocity=v,
        t=np.asarray(t_nodes),
        x=Z[:n].T.copy(),
        v=Z[n:2 * n].T.copy(),
        t_end=float(res.t[-1]),
        tolerance=tolerance,
        exited=exited,
        dense=res.sol,
        variational=variational,
    )


class _StraightDense:
    """Exact state of a straight line, laid out like the ODE state."""

    def __init__(self, p, v, variational):
        self.p, self.v, self.variational = p, v, variational

    def __call__(self, t):
        n = self.p.size
        z = [self.p + t * self.v, self.v]
        if self.variational:
            phi = np.eye(2 * n)
            phi[:n, n:] = t * np.eye(n)
            z.append(phi.ravel())
        return np.concatenate(z)


def _straight_exit_time(domain, p, v, margin):
    if domain.kind == "disc":
        a, b, c = v @ v, 2 * p @ v, p @ p - (1.0 + margin) ** 2
        disc = b * b - 4 * a * c
        if a == 0 or disc < 0:
            return np.inf
        t2 = (-b + np.sqrt(disc)) / (2 * a)
        return t2 if t2 > 0 else np.inf
    if domain.kind == "box":
        best = np.inf
        for (lo, hi), pi, vi in zip(domain.bounds, p, v):
            with np.errstate(over="ignore"):
                if vi > 0:
                    best = min(best, (hi + margin - pi) / vi)
                elif vi < 0:
                    best = min(best, (lo - margin - pi) / vi)
        return best
    return np.inf


def _shoot_straight(metric, p, v, t_end, tolerance, stop_on_exit, variational, margin):
    """Closed-form geodesics of a constant metric."""
    t_stop = float(t_end)
    exited = False
    if stop_on_exit:
        te = _straight_exit_time(metric.domain, p, v, margin)
        if te < t_stop:
            t_stop, exited = float(te), True
    dense = _StraightDense(p, v, variational)
    t = np.linspace(0.0, t_stop, 9)
    x = p[None, :] + t[:, None] * v[None, :]
    vv = np.repeat(v[None, :], t.size, axis=0)
    return GeodesicPath(metric, p, v, t, x, vv, t_stop, tolerance, exited, dense, variational)


# ---------------------------------------------------------------------------
# image signatures


def image_signature(path: GeodesicPath, count: int = 64) -> np.ndarray:
    """``count`` arc-length-uniform image samples with canonical orientation.

    The orientation is the lexicographically smaller of the forward and the
    reversed sequence after rounding to 1e-5.  On a torus, samples are
    wrapped into the fundamental domain.
    """
    pts = path.metric.domain.wrap(path.arc_samples(count))
    fwd = np.round(pts, 5) + 0.0
    rev = fwd[::-1]
    if tuple(rev.ravel()) < tuple(fwd.ravel()):
        return pts[::-1]
    return pts


def equivalence_key(path: GeodesicPath, count: int = 64) -> str:
    sig = np.round(image_signature(path, count), 5) + 0.0
    if path.metric.domain.is_torus:
        per = np.asarray(path.metric.domain.periods)
        sig = np.round(np.mod(sig, per), 5) + 0.0
        sig[np.isclose(sig, per)] = 0.0
    return hashlib.sha1(np.ascontiguousarray(sig).tobytes()).hexdigest()[:16]


def image_distance(a: GeodesicPath, b: GeodesicPath, count: int = 64) -> float:
    """Max sample distance between two images, minimized over reversal."""
    dom = a.metric.domain
    pa = a.arc_samples(count)
    pb = b.arc_samples(count)

    def d(u, w):
        return float(np.max(np.linalg.norm(dom.difference(u, w), axis=1)))

    return min(d(pa, pb), d(pa, pb[::-1]))


# ---------------------------------------------------------------------------
# Jacobi fields


@dataclass(eq=False)
class JacobiReport:
    """Fundamental solution of the Jacobi equation along a path.

    ``blocks[i]`` maps ``(Y(0), DY(0))`` to ``(Y(t_i), DY(t_i))`` where ``D``
    is the covariant derivative along the path.
    """

    path: GeodesicPath
    times: np.ndarray
    blocks: np.ndarray
    conjugate_times: list = field(default_factory=list)
    kernel_dimension: int | None = None
    index: int | None = None

    def block_at(self, t: float) -> np.ndarray:
        return jacobi_block(self.path, t)


def _covariant_change(metric, x, v):
    """``C`` with ``(Y, DY) = C (dx, dv)``: ``DY = dv + Gamma(v, dx)``."""
    n = x.size
    g, dg = metric.jet(x, 1)
    gamma, _ = connection_from_jet(g, dg)
    C = np.eye(2 * n)
    C[n:, :n] = np.einsum("kij,i->kj", gamma, v)
    return C


def jacobi_block(path: GeodesicPath, t: float) -> np.ndarray:
    x, v = path.state(t)
    C = _covariant_change(path.metric, x, v)
    C0 = _covariant_change(path.metric, path.start_point, path.start_velocity)
    return C @ path.phi(t) @ np.linalg.inv(C0)


def with_variational(path: GeodesicPath) -> GeodesicPath:
    if path.variational:
        return path
    return shoot(
        path.metric,
        path.start_point,
        path.start_velocity,
        t_end=path.t_end,
        tolerance=path.tolerance,
        stop_on_exit=False,
        variational=True,
    )


def jacobi_propagate(path: GeodesicPath) -> JacobiReport:
    """Integrate the Jacobi equation along ``path`` for all ``2n`` initial
    conditions; blocks are returned at every sample time."""
    vpath = with_variational(path)
    blocks = np.array([jacobi_block(vpath, t) for t in vpath.t])
    return JacobiReport(path=vpath, times=vpath.t.copy(), blocks=blocks)


def transverse_frame(metric: MetricField, x, v) -> np.ndarray:
    """Columns: g-orthonormal basis of the complement of ``v`` at ``x``."""
    g = metric.components(x)
    return np.array(complement_frame(g, v)).T


class ConjugateTime(NamedTuple):
    t: float
    multiplicity: int


def _degeneracy_profile(path: GeodesicPath, U: np.ndarray):
    """Return functions of ``t``: normalized singular values and a signed
    determinant of the Jacobi fields started from the columns of ``U``."""
    n = path.dimension

    def evaluate(t):
        F = jacobi_block(path, t)
        x, v = path.state(t)
        g = path.metric.components(x)
        Lc = np.linalg.cholesky(g).T
        Y = Lc @ (F[:n] @ U)
        c = Lc @ v / np.sqrt(v @ g @ v)
        sv = np.linalg.svd(Y, compute_uv=False)
        ref = max(np.linalg.svd(np.column_stack([Y, max(t, 1e-300) * c]), compute_uv=False)[0], 1e-300)
        det = float(np.linalg.det(np.column_stack([Y, c])))
        return sv / ref, det / ref ** (Y.shape[1])

    return evaluate


def conjugate_points(
    report: JacobiReport,
    initial_subspace: np.ndarray | None = None,
    threshold: float = 1e-6,
    t_tol: float = 1e-10,
    include_end: bool = True,
) -> list[ConjugateTime]:
    """Times ``t`` in ``(0, t_end]`` where a Jacobi field started in
    ``initial_subspace`` vanishes.

    ``initial_subspace`` is a ``2n x k`` matrix of initial data
    ``(Y(0), DY(0))``; by default ``Y(0) = 0`` and ``DY(0)`` spans the
    complement of the initial velocity, which gives conjugate points of the
    start.  Odd-multiplicity zeros are bracketed by sign changes of a
    determinant; even ones show up as local minima of the smallest singular
    value.  Multiplicity counts singular values below ``threshold`` times the
    largest.
    """
    path = report.path
    if initial_subspace is None:
        W = transverse_frame(path.metric, path.start_point, path.start_velocity)
        initial_subspace = np.vstack([np.zeros_like(W), W])
    prof = _degeneracy_profile(path, initial_subspace)

    ts = report.times
    # sample at nodes and midpoints
    grid = np.unique(np.concatenate([ts, 0.5 * (ts[1:] + ts[:-1])]))
    grid = grid[grid > 0]
    vals = [prof(t) for t in grid]
    smin = np.array([v[0][-1] for v in vals])
    dets = np.array([v[1] for v in vals])

    cands = []
    for i in range(len(grid) - 1):
        if dets[i] == 0.0 or np.sign(dets[i]) != np.sign(dets[i + 1]):
            a, b = grid[i], grid[i + 1]
            try:
                tc = brentq(lambda t: prof(t)[1], a, b, xtol=t_tol, rtol=1e-15)
            except ValueError:
                tc = a if abs(dets[i]) < abs(dets[i + 1]) else b
            cands.append(tc)
    for i in range(len(grid)):
        left = smin[i - 1] if i > 0 else np.inf
        right = smin[i + 1] if i + 1 < len(grid) else np.inf
        if smin[i] <= left and smin[i] <= right and smin[i] < 0.5:
            a = grid[i - 1] if i > 0 else 0.5 * grid[i]
            b = grid[i + 1] if i + 1 < len(grid) else grid[i]
            if b <= a:
                cands.append(grid[i])
                continue
            r = minimize_scalar(lambda t: prof(t)[0][-1], bounds=(a, b), method="bounded",
                                options={"xatol": t_tol})
            tc = float(r.x)
            if include_end and b == grid[-1] and prof(b)[0][-1] <= r.fun:
                tc = float(b)
            cands.append(tc)

    out: list[ConjugateTime] = []
    for tc in sorted(cands):
        if tc < 1e-8:
            raise DegenerateStartError("degeneracy at the start of the path")
        if not include_end and tc >= path.t_end - 1e-9:
            continue
        mult = int(np.sum(prof(tc)[0] < threshold))
        if mult == 0:
            continue
        if out and abs(out[-1].t - tc) < 1e-7:
            if mult > out[-1].multiplicity:
                out[-1] = ConjugateTime(float(tc), mult)
            continue
        out.append(ConjugateTime(float(tc), mult))
    report.conjugate_times = out
    return out


# ---------------------------------------------------------------------------
# ball entry


class BallInterval(NamedTuple):
    t_in: float
    t_out: float
    tangent: bool


def event_ball_entry(path: GeodesicPath, center, radius: float, t_tol: float = 1e-8) -> list[BallInterval]:
    """Parameter intervals where the path lies inside the ball of ``radius``
    around ``center``.

    Distance is the chart norm scaled by the metric at the center, a
    surrogate for the g-distance that is accurate for small radii.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=float)
    G = path.metric.components(c)
    dom = path.metric.domain

    def dist(t):
        d = dom.difference(path.position(t), c)
        return float(np.sqrt(d @ G @ d))

    grid = np.unique(np.concatenate([path.t, 0.5 * (path.t[1:] + path.t[:-1])]))
    vals = np.array([dist(t) for t in grid]) - radius

    # local minima that dip under the radius between grid points
    extra = []
    for i in range(1, len(grid) - 1):
        if vals[i] <= vals[i - 1] and vals[i] <= vals[i + 1] and vals[i] > 0:
            r = minimize_scalar(dist, bounds=(grid[i - 1], grid[i + 1]), method="bounded",
                                options={"xatol": t_tol * 1e-2})
            if r.fun - radius <= 10 * t_tol:
                extra.append((float(r.x), r.fun - radius))

    out = []
    inside = vals[0] < 0
    t_in = grid[0] if inside else None
    for i in range(len(grid) - 1):
        a, b = grid[i], grid[i + 1]
        if (vals[i] < 0) != (vals[i + 1] < 0):
            tc = brentq(lambda t: dist(t) - radius, a, b, xtol=t_tol * 1e-2)
            if vals[i] >= 0:
                t_in = tc
            else:
                out.append([t_in, tc])
                t_in = None
    if t_in is not None:
        out.append([t_in, grid[-1]])

    result = []
    for a, b in out:
        result.append(BallInterval(float(a), float(b), bool(b - a <= 1e-6)))
    for tm, gap in extra:
        if not any(a <= tm <= b for a, b, _ in result):
            result.append(BallInterval(tm, tm, True))
    result.sort()
    return result
