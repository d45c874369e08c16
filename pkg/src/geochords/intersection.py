"""Self- and pairwise intersections of geodesic paths.

Detection works in chart coordinates (shortest representative on tori):
a spatial hash of short subsegments proposes parameter pairs, and a
bounded Gauss-Newton solve on ``gamma(s) - delta(t)`` refines them.
"""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .geodesic import GeodesicPath, equivalence_key

PARAM_EPS = 1e-9


class IntersectionMisuseError(ValueError):
    """Pairwise detection requested for two copies of the same curve."""


@dataclass
class IntersectionEvent:
    kind: str
    s: float
    t: float
    location: np.ndarray
    separation: float
    classification: str
    sin_angle: float = 1.0

    def to_dict(self):
        return {
            "kind": self.kind,
            "params": [self.s, self.t],
            "location": self.location.tolist(),
            "separation": self.separation,
            "classification": self.classification,
            "sin_angle": self.sin_angle,
        }


@dataclass
class IntersectionReport:
    events: list
    tolerance: float
    consistency_errors: list = field(default_factory=list)

    def interior(self) -> list[IntersectionEvent]:
        return [e for e in self.events if e.classification == "interior"]

    def count(self, classification: str = "interior") -> int:
        return sum(e.classification == classification for e in self.events)

    def to_dict(self):
        return {
            "tolerance": self.tolerance,
            "events": [e.to_dict() for e in self.events],
            "consistency_errors": self.consistency_errors,
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


# ---------------------------------------------------------------------------
# broad phase


def _subsegments(path: GeodesicPath, min_count: int = 64):
    """Parameter nodes and sampled points; spacing keeps the chord
    approximation of each subsegment short compared with the injectivity
    bound."""
    length = path.speed * path.t_end
    inj = path.metric.inj_lower_bound
    m = max(min_count, int(np.ceil(8 * length / inj)), len(path.t))
    ts = np.linspace(0.0, path.t_end, m + 1)
    pts = np.array([path.position(t) for t in ts])
    return ts, pts


def _cells(domain, a, b, pad, cell):
    """Hash cells touched by the padded box around segment ``a -> b``."""
    d = domain.difference(b, a)
    lo = np.minimum(a, a + d) - pad
    hi = np.maximum(a, a + d) + pad
    ranges = [range(int(np.floor(l / cell)), int(np.floor(h / cell)) + 1) for l, h in zip(lo, hi)]
    out = [()]
    for r in ranges:
        out = [c + (k,) for c in out for k in r]
    if domain.is_torus:
        per = [max(1, int(np.floor(p / cell))) for p in domain.periods]
        out = [tuple(k % m for k, m in zip(c, per)) for c in out]
    return out


def _hash_segments(domain, pts, cell, pad):
    table = defaultdict(list)
    for i in range(len(pts) - 1):
        for c in _cells(domain, pts[i], pts[i + 1], pad, cell):
            table[c].append(i)
    return table


def _cell_size(domain, *extents):
    cell = 2.0 * max(max(extents), 1e-6)
    if domain.is_torus:
        # an integer number of cells per period keeps the wrap consistent
        p = min(domain.periods)
        cell = p / max(1, int(np.floor(p / cell)))
    return cell


def _prepare(path: GeodesicPath, tol: float):
    dom = path.metric.domain
    ts, pts = _subsegments(path)
    if dom.is_torus:
        pts = dom.wrap(pts)
    ext = [np.linalg.norm(dom.difference(pts[i + 1], pts[i])) for i in range(len(pts) - 1)]
    # sagitta of each subsegment bounds the curve's distance from its chord
    sag = []
    for i in range(len(ts) - 1):
        mid = pts[i] + 0.5 * dom.difference(pts[i + 1], pts[i])
        sag.append(np.linalg.norm(dom.difference(path.position(0.5 * (ts[i] + ts[i + 1])), mid)))
    return ts, pts, max(ext), 2 * max(sag) + 10 * tol


# ---------------------------------------------------------------------------
# narrow phase


def _refine(gamma, delta, s0, t0, sb, tb, iterations: int = 40):
    """Gauss-Newton on ``gamma(s) - delta(t)`` inside the box ``sb x tb``;
    converges to a crossing or to the closest pair of points."""
    dom = gamma.metric.domain
    z = np.array([s0, t0], dtype=float)
    lo = np.array([sb[0], tb[0]])
    hi = np.array([sb[1], tb[1]])
    r = dom.difference(gamma.position(z[0]), delta.position(z[1]))
    for _ in range(iterations):
        J = np.column_stack([gamma.velocity(z[0]), -delta.velocity(z[1])])
        step = -np.linalg.lstsq(J, r, rcond=None)[0]
        zn = np.clip(z + step, lo, hi)
        rn = dom.difference(gamma.position(zn[0]), delta.position(zn[1]))
        if np.linalg.norm(rn) > np.linalg.norm(r):
            # halve once before giving up; the minimum is reached
            zn = np.clip(z + 0.5 * step, lo, hi)
            rn = dom.difference(gamma.position(zn[0]), delta.position(zn[1]))
            if np.linalg.norm(rn) >= np.linalg.norm(r):
                break
        done = np.max(np.abs(zn - z)) < 1e-14
        z, r = zn, rn
        if done:
            break
    return z[0], z[1], float(np.linalg.norm(r))


def _segment_closest(a0, a1, b0, b1):
    """Closest-point parameters of two straight segments in [0, 1]^2."""
    u, v, w = a1 - a0, b1 - b0, a0 - b0
    A = np.array([[u @ u, -(u @ v)], [-(u @ v), v @ v]])
    rhs = np.array([-(u @ w), v @ w])
    try:
        x = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        x = np.array([0.5, 0.5])
    return np.clip(x, 0.0, 1.0)


def _sin_angle(g, u, v):
    nu, nv = np.sqrt(u @ g @ u), np.sqrt(v @ g @ v)
    if nu == 0 or nv == 0:
        return 0.0
    c = abs(u @ g @ v) / (nu * nv)
    return float(np.sqrt(max(0.0, 1 - c * c)))


def _candidates(gamma, delta, tol, same):
    dom = gamma.metric.domain
    ts_a, pa, ea, pad_a = _prepare(gamma, tol)
    if same:
        ts_b, pb, eb, pad_b = ts_a, pa, ea, pad_a
    else:
        ts_b, pb, eb, pad_b = _prepare(delta, tol)
    pad = max(pad_a, pad_b)
    cell = _cell_size(dom, ea, eb, pad)
    table = _hash_segments(dom, pb, cell, pad)
    pairs = set()
    for i in range(len(pa) - 1):
        for c in _cells(dom, pa[i], pa[i + 1], pad, cell):
            for j in table.get(c, ()):
                if same and (j <= i or _same_strand(gamma, ts_a, i, j)):
                    continue
                pairs.add((i, j))
    return ts_a, pa, ts_b, pb, sorted(pairs)


def _same_strand(path, ts, i, j):
    """True when every parameter pair the refinement of segments ``i`` and
    ``j`` can reach is closer than ``0.9 * inj`` along the path."""
    h = ts[1] - ts[0]
    reach = (j - i + 3) * h
    if is_loop(path):
        reach = min(reach, path.t_end - (j - i - 3) * h) if j - i > 3 else reach
    return reach * path.speed < 0.9 * path.metric.inj_lower_bound


def _find(gamma, delta, tol, same):
    dom = gamma.metric.domain
    ts_a, pa, ts_b, pb, pairs = _candidates(gamma, delta, tol, same)
    raw = []
    for i, j in pairs:
        a0 = pa[i]
        a1 = a0 + dom.difference(pa[i + 1], pa[i])
        b0 = a0 + dom.difference(pb[j], a0)
        b1 = b0 + dom.difference(pb[j + 1], pb[j])
        u, w = _segment_closest(a0, a1, b0, b1)
        s0 = ts_a[i] + u * (ts_a[i + 1] - ts_a[i])
        t0 = ts_b[j] + w * (ts_b[j + 1] - ts_b[j])
        # coarse rejection: segment distance far above the padded tolerance
        gap = np.linalg.norm((a0 + u * (a1 - a0)) - (b0 + w * (b1 - b0)))
        hs = ts_a[i + 1] - ts_a[i]
        ht = ts_b[j + 1] - ts_b[j]
        seg_len = max(np.linalg.norm(a1 - a0), np.linalg.norm(b1 - b0))
        if gap > seg_len + 20 * tol:
            continue
        sb = (max(0.0, ts_a[i] - hs), min(gamma.t_end, ts_a[i + 1] + hs))
        tb = (max(0.0, ts_b[j] - ht), min(delta.t_end, ts_b[j + 1] + ht))
        s, t, sep = _refine(gamma, delta, s0, t0, sb, tb)
        if sep <= 10 * tol:
            raw.append((s, t, sep))
    return raw


def _cluster(raw, key_tol=1e-6):
    out = []
    for s, t, sep in sorted(raw):
        if any(abs(s - a) < key_tol and abs(t - b) < key_tol for a, b, _ in out):
            continue
        out.append((s, t, sep))
    return out


def _is_end(x, t_end):
    return x <= PARAM_EPS or x >= t_end - PARAM_EPS


def _snap(x, t_end):
    if x <= PARAM_EPS:
        return 0.0
    if x >= t_end - PARAM_EPS:
        return t_end
    return x


def is_loop(path: GeodesicPath, tol: float = 1e-7) -> bool:
    dom = path.metric.domain
    return bool(np.linalg.norm(dom.difference(path.end_point, path.start_point)) <= tol)


def self_event_bound(path: GeodesicPath) -> float:
    """Upper bound ``(L / inj + 1)^2`` on the number of self events."""
    return (path.speed * path.t_end / path.metric.inj_lower_bound + 1.0) ** 2


def self_intersections(path: GeodesicPath, tolerance: float = 1e-7, loop: bool | None = None) -> IntersectionReport:
    """Interior double points of one path.

    Parameter pairs closer than ``0.9 * inj`` in length along the path
    (cyclically for loops) are the same strand and are skipped.  For loops,
    the base point counts as interior when another parameter in the open
    interval maps to it.
    """
    if loop is None:
        loop = is_loop(path, tolerance)
    sp = path.speed
    T = path.t_end
    inj = path.metric.inj_lower_bound
    g_at = path.metric.components
    events = []
    for s, t, sep in _cluster(_find(path, path, tolerance, same=True)):
        s, t = _snap(s, T), _snap(t, T)
        if loop:
            s, t = (0.0 if s == T else s), (0.0 if t == T else t)
            s, t = min(s, t), max(s, t)
            gap = min(t - s, T - (t - s))
        else:
            s, t = min(s, t), max(s, t)
            gap = t - s
        if gap * sp < 0.9 * inj:
            continue
        x = path.position(s)
        sa = _sin_angle(g_at(x), path.velocity(s), path.velocity(t))
        ends = (_is_end(s, T), _is_end(t, T))
        if sep > tolerance:
            if sa < 1e-3:
                cls = "tangential-suspect"
            else:
                continue
        elif sa < 1e-3:
            # coincident points with parallel velocities: the path retraces itself
            cls = "overlap"
        elif loop:
            cls = "endpoint" if all(ends) else "interior"
        else:
            cls = "endpoint" if any(ends) else "interior"
        events.append(IntersectionEvent("self", s, t, x, sep, cls, sa))
    events = _collapse_overlaps(_dedupe_events(events, path.metric.domain), T, loop)
    return IntersectionReport(events, tolerance)


def _collapse_overlaps(events, t_end, loop):
    """Keep one ``overlap`` event per parameter shift ``t - s``.

    A retraced stretch yields a continuum of coincident pairs that share the
    shift; detection samples it at arbitrary points.
    """
    out, shifts = [], []
    for e in events:
        if e.classification != "overlap":
            out.append(e)
            continue
        d = (e.t - e.s) / t_end
        if loop:
            d = min(d, 1.0 - d)
        if any(abs(d - f) < 1e-6 for f in shifts):
            continue
        shifts.append(d)
        out.append(e)
    return out


def _dedupe_events(events, domain, tol=1e-6):
    out = []
    for e in sorted(events, key=lambda e: (e.s, e.t)):
        if any(abs(e.s - f.s) < tol and abs(e.t - f.t) < tol for f in out):
            continue
        out.append(e)
    return out


def pairwise_intersections(
    gamma: GeodesicPath,
    delta: GeodesicPath,
    tolerance: float = 1e-7,
    chords: bool | None = None,
    check_distinct: bool = True,
) -> IntersectionReport:
    """Intersections of ``gamma((0, 1))`` and ``delta((0, 1))``.

    Meetings where either parameter is an endpoint are reported with the
    ``endpoint`` class.  For chords of a disc chart a meeting on the
    boundary sphere is a consistency error rather than an event.
    """
    if check_distinct and equivalence_key(gamma) == equivalence_key(delta):
        raise IntersectionMisuseError("paths have the same image")
    if chords is None:
        chords = gamma.metric.domain.kind == "disc"
    Tg, Td = gamma.t_end, delta.t_end
    events, errors = [], []
    for s, t, sep in _cluster(_find(gamma, delta, tolerance, same=False)):
        s, t = _snap(s, Tg), _snap(t, Td)
        x = gamma.position(s)
        sa = _sin_angle(gamma.metric.components(x), gamma.velocity(s), delta.velocity(t))
        if sep > tolerance:
            if sa < 1e-3:
                events.append(IntersectionEvent("pairwise", s, t, x, sep, "tangential-suspect", sa))
            continue
        if chords and abs(np.linalg.norm(x) - 1.0) < 1e-6:
            errors.append({"params": [s, t], "location": x.tolist(), "message": "chords meet on the boundary"})
            continue
        cls = "endpoint" if (_is_end(s, Tg) or _is_end(t, Td)) else "interior"
        events.append(IntersectionEvent("pairwise", s, t, x, sep, cls, sa))
    events = _dedupe_events(events, gamma.metric.domain)
    return IntersectionReport(events, tolerance, errors)


# ---------------------------------------------------------------------------
# families


@dataclass
class IntersectionMatrix:
    counts: np.ndarray
    locations: list
    cluster_diameters: list
    reports: dict
    consistency_errors: list

    @property
    def is_zero(self) -> bool:
        return not np.any(self.counts)

    def to_dict(self):
        return {
            "counts": self.counts.tolist(),
            "locations": [x.tolist() for x in self.locations],
            "cluster_diameters": self.cluster_diameters,
            "consistency_errors": self.consistency_errors,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.counts.shape[0]
        w.writerow([""] + [f"c{j}" for j in range(k)])
        for i in range(k):
            w.writerow([f"c{i}"] + [int(c) for c in self.counts[i]])
        return buf.getvalue()


def _cluster_points(points, radius, domain):
    clusters: list[list[np.ndarray]] = []
    for x in points:
        for c in clusters:
            if np.linalg.norm(domain.difference(x, c[0])) <= radius:
                c.append(x)
                break
        else:
            clusters.append([x])
    centers, diam = [], []
    for c in clusters:
        base = c[0]
        offs = np.array([domain.difference(x, base) for x in c])
        centers.append(base + offs.mean(axis=0))
        d = max((np.linalg.norm(a - b) for a in offs for b in offs), default=0.0)
        diam.append(float(d))
    return centers, diam


def intersection_matrix(paths, tolerance: float = 1e-7) -> IntersectionMatrix:
    """Symmetric matrix of interior event counts for a family (self events
    on the diagonal) and the clustered set of double points.

    Accepts a ``SolutionFamily`` or a list of paths.
    """
    if hasattr(paths, "solutions"):
        paths = [s.path for s in paths.solutions]
    k = len(paths)
    counts = np.zeros((k, k), dtype=int)
    reports = {}
    pts, errors = [], []
    for i in range(k):
        rep = self_intersections(paths[i], tolerance)
        reports[(i, i)] = rep
        counts[i, i] = rep.count("interior") + rep.count("tangential-suspect") + rep.count("overlap")
        pts += [e.location for e in rep.events if e.classification != "endpoint"]
        for j in range(i + 1, k):
            rep = pairwise_intersections(paths[i], paths[j], tolerance, check_distinct=False)
            reports[(i, j)] = rep
            c = rep.count("interior") + rep.count("tangential-suspect")
            counts[i, j] = counts[j, i] = c
            pts += [e.location for e in rep.events if e.classification != "endpoint"]
            errors += [dict(e, pair=[i, j]) for e in rep.consistency_errors]
    dom = paths[0].metric.domain if paths else None
    centers, diam = _cluster_points(pts, 10 * tolerance, dom) if pts else ([], [])
    return IntersectionMatrix(counts, centers, diam, reports, errors)
