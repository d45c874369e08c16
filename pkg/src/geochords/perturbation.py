"""Localized metric perturbations and the perturb / continue / re-detect loop.

Two perturbation kinds are available:

* ``ConformalBump``: ``g -> (1 + eps * psi) g`` with ``psi`` a smooth bump
  on a chart ball placed off-center inside ``B(p, eta)``.
* ``Shear``: for a geodesic through ``p`` with unit tangent ``u`` and a unit
  normal ``e1``, the metric ``g + eps (a w + w a) + eps^2 w w`` with
  ``a = g_p(u, .)`` and ``w = d(beta * x1)``, where ``x1`` is the ``e1``
  coordinate and ``beta`` a bump equal to one near ``p``.  For a constant
  base metric this is the pullback of ``g`` under ``t -> t + eps beta x1``,
  so the line through ``p`` stays a geodesic while the hypersurface
  ``{t = 0}`` is no longer orthogonal to it.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .bvp import (
    BoundaryCondition,
    BvpSolution,
    PointPair,
    SolutionFamily,
    _finalize,
    _newton_orthogonal,
    _newton_point_pair,
    solve_family,
)
from .geodesic import GeodesicPath, event_ball_entry, geodesic_acceleration, shoot, with_variational
from .intersection import intersection_matrix, pairwise_intersections, self_intersections
from .metric import BlendMetric, MetricField, NotPositiveDefiniteError, complement_frame, sphere_points


class AmplitudeError(ValueError):
    """Perturbation amplitude too large for the construction to stay valid."""


class BifurcationSuspectError(RuntimeError):
    """Continuation could not follow a solution branch."""

    def __init__(self, index: int, lam: float, message: str = ""):
        super().__init__(f"solution {index} lost at blend parameter {lam:.6g}. {message}".strip())
        self.index = index
        self.lam = lam


class SeparationFailedError(RuntimeError):
    def __init__(self, attempts):
        super().__init__(f"no separating perturbation after {len(attempts)} attempts")
        self.attempts = attempts


# ---------------------------------------------------------------------------
# bump profile


def _h(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos])
    return out


def _h_derivs(u):
    """``h, h', h''`` of ``h(u) = exp(-1/u)`` (zero for ``u <= 0``)."""
    u = np.asarray(u, dtype=float)
    h0 = _h(u)
    safe = np.where(u > 0, u, 1.0)
    h1 = np.where(u > 0, h0 / safe**2, 0.0)
    h2 = np.where(u > 0, h0 * (1 - 2 * safe) / safe**4, 0.0)
    return h0, h1, h2


def smooth_step(u):
    """``S(u) = h(u) / (h(u) + h(1 - u))`` and its first two derivatives:
    0 for ``u <= 0``, 1 for ``u >= 1``, C-infinity in between."""
    a, a1, a2 = _h_derivs(u)
    b, b1, b2 = _h_derivs(1 - np.asarray(u, dtype=float))
    b1 = -b1
    D = a + b
    S = a / D
    N = a1 * b - a * b1
    S1 = N / D**2
    N1 = a2 * b - a * b2
    S2 = N1 / D**2 - 2 * N * (a1 + b1) / D**3
    return S, S1, S2


def mollifier(rho):
    """Plateau profile ``f(rho)``: 1 for ``rho <= 1/2``, 0 for ``rho >= 1``.
    Returns ``(f, f', f'')``."""
    rho = np.asarray(rho, dtype=float)
    S, S1, S2 = smooth_step(2 * (1 - rho))
    return S, -2 * S1, 4 * S2


MAX_SLOPE = 4.0  # max |f'|, attained at rho = 3/4


def radial_bump(d, G, radius):
    """``beta(y) = f(|d|_G / radius)`` with gradient and Hessian in ``y``,
    where ``d = y - center``.  Exactly zero outside the support."""
    n = d.size
    q = float(d @ G @ d)
    rho = np.sqrt(q) / radius
    if rho >= 1.0:
        return 0.0, np.zeros(n), np.zeros((n, n))
    if rho <= 0.5:
        return 1.0, np.zeros(n), np.zeros((n, n))
    f, f1, f2 = (float(v) for v in mollifier(rho))
    # beta = H(q) with q = d^T G d
    H1 = f1 / (2 * radius**2 * rho)
    H2 = f2 / (4 * radius**4 * rho**2) - f1 / (4 * radius**4 * rho**3)
    Gd = G @ d
    grad = 2 * H1 * Gd
    hess = 4 * H2 * np.outer(Gd, Gd) + 2 * H1 * G
    return f, grad, hess


# ---------------------------------------------------------------------------
# perturbation specs


def _unit(v):
    v = np.asarray(v, dtype=float)
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ValueError("direction must be nonzero")
    # leave (near) unit input untouched so serialization round-trips bitwise
    return v if abs(nv - 1.0) < 1e-14 else v / nv


@dataclass
class ConformalBump:
    """``g -> (1 + eps * psi) g``; ``psi`` is supported on the chart ball of
    radius ``0.6 eta`` centered at ``p + 0.4 eta * bias`` (inside
    ``B(p, eta)``)."""

    center: np.ndarray
    eta: float
    eps: float
    bias: np.ndarray
    kind: str = field(default="conformal-bump", init=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.bias = _unit(self.bias)
        if self.eta <= 0:
            raise ValueError("support radius must be positive")
        if abs(self.eps) >= 1:
            raise AmplitudeError("conformal amplitude must satisfy |eps| < 1")

    @property
    def support_radius(self) -> float:
        return self.eta

    @property
    def bump_center(self) -> np.ndarray:
        return self.center + 0.4 * self.eta * self.bias

    def psi(self, x):
        d = np.asarray(x, dtype=float) - self.bump_center
        return radial_bump(d, np.eye(d.size), 0.6 * self.eta)

    def apply(self, x, jet, order):
        psi, dpsi, hpsi = self.psi(x)
        if psi == 0.0 and not dpsi.any():
            return jet
        c = 1.0 + self.eps * psi
        g = jet[0]
        out = [c * g]
        if order >= 1:
            dg = jet[1]
            out.append(c * dg + self.eps * dpsi[:, None, None] * g)
        if order >= 2:
            d2g = jet[2]
            out.append(
                c * d2g
                + self.eps * (dpsi[:, None, None, None] * dg[None] + dpsi[None, :, None, None] * dg[:, None])
                + self.eps * hpsi[:, :, None, None] * g
            )
        return tuple(out)

    def scaled(self, factor: float) -> ConformalBump:
        return ConformalBump(self.center, self.eta, self.eps * factor, self.bias)

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "eta": self.eta, "eps": self.eps,
                "bias": self.bias.tolist()}


@dataclass
class Shear:
    """Shear of the level sets of ``t`` along a geodesic through ``center``.

    ``gp`` is the base metric at ``center``; ``u`` and ``e1`` are
    ``gp``-orthonormal.  The bump ``beta`` uses the ``gp``-distance scaled
    so that its support stays inside the chart ball of radius ``eta``.
    """

    center: np.ndarray
    u: np.ndarray
    e1: np.ndarray
    gp: np.ndarray
    eta: float
    eps: float
    kind: str = field(default="shear", init=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.e1 = np.asarray(self.e1, dtype=float)
        self.gp = np.asarray(self.gp, dtype=float)
        if self.eta <= 0:
            raise ValueError("support radius must be positive")
        if 1.0 - abs(self.eps) * MAX_SLOPE <= 0.5:
            raise AmplitudeError("shear amplitude too large: 1 - eps * max|f'| <= 1/2")
        lam = np.linalg.eigvalsh(self.gp)[0]
        self._G = self.gp * max(1.0, 1.0 / lam)
        self._a = self.gp @ self.u
        self._b = self.gp @ self.e1

    @property
    def support_radius(self) -> float:
        return self.eta

    def beta(self, x):
        return radial_bump(np.asarray(x, dtype=float) - self.center, self._G, self.eta)

    def omega(self, x):
        """``w = d(beta x1)`` and its derivative ``dw[k, i] = d_k w_i``."""
        x = np.asarray(x, dtype=float)
        beta, db, hb = self.beta(x)
        x1 = float(self._b @ (x - self.center))
        w = db * x1 + beta * self._b
        dw = hb * x1 + np.outer(self._b, db) + np.outer(db, self._b)
        return w, dw

    def delta_jet(self, x, order):
        """Additive change ``(dg, d dg)`` of the components (no second
        derivatives; those come from differencing)."""
        w, dw = self.omega(x)
        a, e = self._a, self.eps
        G = e * (np.outer(a, w) + np.outer(w, a)) + e * e * np.outer(w, w)
        out = [G]
        if order >= 1:
            D = e * (a[None, :, None] * dw[:, None, :] + dw[:, :, None] * a[None, None, :])
            D = D + e * e * (dw[:, :, None] * w[None, None, :] + w[None, :, None] * dw[:, None, :])
            out.append(D)
        return out

    def apply(self, x, jet, order):
        x = np.asarray(x, dtype=float)
        beta, db, _ = self.beta(x)
        if beta == 0.0 and not db.any():
            return jet
        dj = self.delta_jet(x, min(order, 1))
        out = [jet[0] + dj[0]]
        if order >= 1:
            out.append(jet[1] + dj[1])
        if order >= 2:
            n = x.size
            h = 1e-4 * self.eta
            d2 = np.empty((n, n, n, n))
            for l in range(n):
                step = np.zeros(n)
                step[l] = h
                d2[:, l] = (self.delta_jet(x + step, 1)[1] - self.delta_jet(x - step, 1)[1]).transpose(0, 1, 2) / (2 * h)
            # d2[k, l] holds d_l d_k; symmetrize in (k, l)
            d2 = 0.5 * (d2 + d2.transpose(1, 0, 2, 3))
            out.append(jet[2] + d2)
        return tuple(out)

    def fermi_time(self, x):
        """``(t, x1)`` Fermi coordinates of ``x`` w.r.t. the central line."""
        d = np.asarray(x, dtype=float) - self.center
        return float(self._a @ d), float(self._b @ d)

    def sheared_time(self, x):
        """``s = t + eps * beta * x1``."""
        t, x1 = self.fermi_time(x)
        return t + self.eps * self.beta(x)[0] * x1

    def invert(self, s: float, transverse) -> float:
        """Solve ``s = t + eps beta(t, x) x1`` for ``t`` at fixed transverse
        offset ``transverse`` (a chart vector g_p-orthogonal to ``u``).

        The map is strictly increasing in ``t`` under the amplitude bound,
        so a bracketing root finder applies.
        """
        transverse = np.asarray(transverse, dtype=float)

        def fun(t):
            return self.sheared_time(self.center + t * self.u + transverse) - s

        span = abs(s) + 2 * self.eta + 1.0
        return float(brentq(fun, -span, span, xtol=1e-14, rtol=1e-15))

    def scaled(self, factor: float) -> Shear:
        return Shear(self.center, self.u, self.e1, self.gp, self.eta, self.eps * factor)

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "u": self.u.tolist(), "e1": self.e1.tolist(),
                "gp": self.gp.tolist(), "eta": self.eta, "eps": self.eps}


def spec_from_dict(d: dict):
    if d["kind"] == "conformal-bump":
        return ConformalBump(d["center"], d["eta"], d["eps"], d["bias"])
    if d["kind"] == "shear":
        return Shear(d["center"], d["u"], d["e1"], d["gp"], d["eta"], d["eps"])
    raise ValueError(f"unknown perturbation kind {d['kind']!r}")


class PerturbedMetric(MetricField):
    """Base metric with an ordered list of localized perturbations."""

    family = "perturbed"

    def __init__(self, base: MetricField, specs):
        super().__init__(base.domain, base._inj)
        self.base = base
        self.specs = list(specs)
        if base.domain.is_torus:
            for s in self.specs:
                if s.support_radius >= 0.5 * min(base.domain.periods):
                    raise ValueError("support must be smaller than half a period")

    def _default_inj(self):
        return self.base.inj_lower_bound

    @property
    def feature_scale(self):
        scales = [0.25 * s.support_radius for s in self.specs]
        if self.base.feature_scale is not None:
            scales.append(self.base.feature_scale)
        return min(scales) if scales else None

    def jet(self, x, order=2):
        x = np.asarray(x, dtype=float)
        out = self.base.jet(x, order)
        dom = self.domain
        for s in self.specs:
            if dom.is_torus:
                # evaluate at the lattice representative closest to the center
                y = s.center + dom.difference(x, s.center)
                out = s.apply(y, out, order)
            else:
                out = s.apply(x, out, order)
        return out

    def is_constant(self):
        return False

    def with_specs(self, more) -> PerturbedMetric:
        return PerturbedMetric(self.base, self.specs + list(more))

    def to_dict(self):
        return {"family": self.family, "base": self.base.to_dict(), "specs": [s.to_dict() for s in self.specs]}

    @classmethod
    def from_dict(cls, d):
        from .metric import metric_from_dict

        return cls(metric_from_dict(d["base"]), [spec_from_dict(s) for s in d["specs"]])


def perturb(metric: MetricField, specs) -> PerturbedMetric:
    if isinstance(metric, PerturbedMetric):
        return metric.with_specs(specs)
    return PerturbedMetric(metric, specs)


# ---------------------------------------------------------------------------
# norms and probes


def perturbation_norms(base: MetricField, new: MetricField, center, radius, samples: int = 400, seed: int = 0) -> dict:
    """Sup norms of the component change and its first two derivatives over
    quasi-random points of the chart ball ``B(center, radius)``."""
    from scipy.stats import qmc

    center = np.asarray(center, dtype=float)
    n = center.size
    u = qmc.Halton(d=n + 1, seed=seed).random(samples)
    from scipy.special import ndtri

    z = ndtri(np.clip(u[:, :n], 1e-12, 1 - 1e-12))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    pts = center + radius * z * u[:, n:] ** (1.0 / n)
    c0 = c1 = c2 = 0.0
    for x in pts:
        a, b = base.jet(x, 2), new.jet(x, 2)
        c0 = max(c0, float(np.max(np.abs(b[0] - a[0]))))
        c1 = max(c1, float(np.max(np.abs(b[1] - a[1]))))
        c2 = max(c2, float(np.max(np.abs(b[2] - a[2]))))
    return {"c0": c0, "c1": c1, "c2": c2, "c2_norm": max(c0, c1, c2)}


def probe_checksum(metric: MetricField, count: int = 256, seed: int = 12345) -> str:
    """Hash of the components at fixed quasi-random probes (for replay).

    Perturbed metrics are also probed inside every support ball, which
    chart-wide probes could miss.
    """
    import hashlib

    pts = list(metric.domain.sample(count, seed))
    if isinstance(metric, PerturbedMetric):
        for spec in metric.specs:
            offsets = sphere_points(spec.center.size, 32, seed) * np.linspace(0.05, 0.95, 32)[:, None]
            pts += [spec.center + spec.support_radius * o for o in offsets]
    data = np.array([metric.components(x) for x in pts])
    return hashlib.sha256(np.round(data, 12).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# shear lemma


def shear_perturb(
    metric: MetricField,
    geodesic_through_p: GeodesicPath,
    hypersurface_normal_frame=None,
    eta: float = 0.1,
    eps: float = 0.01,
    t_p: float = 0.5,
) -> PerturbedMetric:
    """Shear the hypersurface through ``p = gamma(t_p)`` orthogonal to
    ``gamma`` so that the curve stays a geodesic but meets the old
    hypersurface at angle ``arccos(eps / sqrt(1 + eps^2))``.

    ``hypersurface_normal_frame`` optionally gives the tangent direction
    ``e1`` along which the shear acts (projected and normalized); by
    default the first vector of the frame orthogonal to the curve.
    Geodesic preservation is exact when the base metric is constant on the
    support.
    """
    p = geodesic_through_p.position(t_p)
    v = geodesic_through_p.velocity(t_p)
    gp = metric.components(p)
    u = v / np.sqrt(v @ gp @ v)
    if hypersurface_normal_frame is None:
        e1 = complement_frame(gp, u)[0]
    else:
        e = np.atleast_2d(np.asarray(hypersurface_normal_frame, dtype=float))[0]
        e = e - (u @ gp @ e) * u
        e1 = e / np.sqrt(e @ gp @ e)
    spec = Shear(p, u, e1, gp, eta, eps)
    return perturb(metric, [spec])


def support_mismatches(base: MetricField, new: MetricField, center, radius, count: int = 1000, seed: int = 0) -> int:
    """Number of probes with ``|x - center| > radius`` where the components
    of ``new`` and ``base`` are not bitwise equal.  Half the probes lie in
    the shell ``radius < |x - center| <= 3 radius``, half anywhere in the
    chart."""
    center = np.asarray(center, dtype=float)
    dom = base.domain
    rng = np.random.default_rng(seed)
    n = center.size
    z = rng.standard_normal((count // 2, n))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    shell = center + z * radius * (1.0 + 2.0 * rng.random((count // 2, 1)) + 1e-9)
    pts = np.vstack([shell, dom.sample(count - count // 2, seed)])
    bad = 0
    for x in pts:
        if np.linalg.norm(dom.difference(x, center)) <= radius or not dom.contains(x):
            continue
        if not np.array_equal(base.components(x), new.components(x)):
            bad += 1
    return bad


def central_residual(new: MetricField, path: GeodesicPath, samples: int = 401) -> float:
    """Largest change of the geodesic acceleration along ``path`` when the
    metric is replaced by ``new`` (``path`` is a geodesic of its own metric,
    so this is its geodesic-equation residual under ``new``)."""
    worst = 0.0
    for t in np.linspace(0.0, path.t_end, samples):
        x, v = path.state(t)
        a = geodesic_acceleration(new, x, v) - geodesic_acceleration(path.metric, x, v)
        worst = max(worst, float(np.linalg.norm(a)))
    return worst


def shear_check(metric: MetricField, cfg: dict, tolerance: float = 1e-10, seed: int = 0) -> dict:
    """Build a shear about ``cfg["p"]`` along ``cfg["direction"]`` and
    measure geodesic preservation, tilt, support containment and the
    scaling of the component change in ``eps``."""
    p = np.asarray(cfg["p"], dtype=float)
    d = np.asarray(cfg["direction"], dtype=float)
    eta, eps = float(cfg.get("eta", 0.1)), float(cfg.get("eps", 0.01))
    g = metric.components(p)
    u = d / np.sqrt(d @ g @ d)
    path = shoot(metric, p - 2 * eta * u, 4 * eta * u, tolerance=tolerance)
    new = shear_perturb(metric, path, None, eta, eps, t_p=0.5)
    spec = new.specs[-1]
    gn = new.components(spec.center)
    cos = float(spec.u @ gn @ spec.e1 / np.sqrt((spec.u @ gn @ spec.u) * (spec.e1 @ gn @ spec.e1)))
    half = shear_perturb(metric, path, None, eta, eps / 2, t_p=0.5)
    c0 = perturbation_norms(metric, new, spec.center, eta, seed=seed)["c0"]
    c0h = perturbation_norms(metric, half, spec.center, eta, seed=seed)["c0"]
    reshot = shoot(new, path.start_point, path.start_velocity, tolerance=tolerance)
    dev = max(float(np.linalg.norm(reshot.position(t) - path.position(t))) for t in np.linspace(0, 1, 101))
    return {
        "eps": eps,
        "eta": eta,
        "geodesic_residual": central_residual(new, path),
        "reshot_deviation": dev,
        "tilt_cos": cos,
        "tilt_error": abs(cos - eps),
        "outside_mismatches": support_mismatches(metric, new, spec.center, eta, int(cfg.get("probes", 1000)), seed),
        "c0_norm": c0,
        "c0_norm_half_eps": c0h,
        "halving_ratio": c0h / c0 if c0 > 0 else float("nan"),
        "metric": new.to_dict(),
    }


# ---------------------------------------------------------------------------
# continuation


def _retarget(path: GeodesicPath, metric: MetricField) -> GeodesicPath:
    out = copy.copy(path)
    out.metric = metric
    return out


def _path_meets_support(path: GeodesicPath, specs) -> bool:
    dom = path.metric.domain
    for s in specs:
        if dom.is_torus:
            pts = path.arc_samples(max(64, int(8 * path.speed / max(s.support_radius, 1e-3))))
            d = np.linalg.norm(np.array([dom.difference(x, s.center) for x in pts]), axis=1)
            if np.min(d) < 1.5 * s.support_radius:
                return True
            continue
        if event_ball_entry(path, s.center, s.support_radius * 1.05 * np.sqrt(np.linalg.eigvalsh(path.metric.components(s.center))[-1])):
            return True
    return False


def _retarget_solution(sol: BvpSolution, metric) -> BvpSolution:
    return BvpSolution(_retarget(sol.path, metric), sol.residual_norm, sol.kernel_dimension, sol.index,
                       sol.classification, sol.equivalence_key, sol.jacobian_singular)


def _condition_for(sol, condition):
    if condition is not None:
        return condition
    path = sol.path if isinstance(sol, BvpSolution) else sol
    return PointPair(path.start_point, path.end_point)


def _continue_one(path, condition, old_metric, new_metric, index, steps=10, max_halvings=6, tol=1e-10):
    """Follow one solution along the linear blend from ``old_metric`` to
    ``new_metric``; returns the Newton result at the end."""
    n = path.dimension
    lam, h = 0.0, 1.0 / steps
    halvings = 0
    cap = 2.0 * path.speed * path.t_end + 1.0
    x0, v0 = path.start_point.copy(), path.start_velocity.copy()
    res = None
    while lam < 1.0 - 1e-15:
        target = lam + h
        if target >= 1.0 - 1e-12:
            target = 1.0
        mid = BlendMetric(old_metric, new_metric, target) if target < 1.0 else new_metric
        if isinstance(condition, PointPair):
            r = _newton_point_pair(mid, np.asarray(condition.p), np.asarray(condition.q), v0, cap, tol)
        else:
            level = condition.level_set(n)
            lam_len = float(np.sqrt(v0 @ mid.components(x0) @ v0))
            r = _newton_orthogonal(mid, level, x0, lam_len, cap, tol)
        ok = r.status == "converged" and r.path is not None
        if ok:
            dv = r.path.start_velocity - v0
            ok = np.linalg.norm(dv) <= 0.25 * max(np.linalg.norm(v0), 1e-12) and np.linalg.norm(r.path.start_point - x0) <= 0.25
        if not ok:
            halvings += 1
            if halvings > max_halvings:
                raise BifurcationSuspectError(index, target, f"Newton status {r.status}")
            h *= 0.5
            continue
        lam = target
        res = r
        x0, v0 = r.path.start_point.copy(), r.path.start_velocity.copy()
    return res


def continue_solutions(
    old_metric: MetricField,
    new_metric: MetricField,
    family: SolutionFamily,
    steps: int = 10,
    max_halvings: int = 6,
    require_nondegenerate: bool = True,
    precomputed: dict | None = None,
) -> SolutionFamily:
    """Carry every solution of ``family`` from ``old_metric`` to
    ``new_metric`` by Newton correction along a linear blend of the two.

    Solutions whose path avoids the support of the change are carried over
    unchanged.  ``precomputed`` maps solution positions to results already
    continued to ``new_metric``.
    """
    specs = new_metric.specs if isinstance(new_metric, PerturbedMetric) else None
    old_specs = old_metric.specs if isinstance(old_metric, PerturbedMetric) else []
    changed = specs[len(old_specs):] if specs is not None and specs[: len(old_specs)] == old_specs else None
    out = []
    for i, sol in enumerate(family.solutions):
        if require_nondegenerate and sol.kernel_dimension != 0:
            raise ValueError(f"solution {i} is degenerate; continuation needs a trivial Jacobi kernel")
        if precomputed and i in precomputed:
            out.append(precomputed[i])
            continue
        if changed is not None and not _path_meets_support(sol.path, changed):
            out.append(_retarget_solution(sol, new_metric))
            continue
        if new_metric is old_metric:
            out.append(sol)
            continue
        res = _continue_one(sol.path, family.condition, old_metric, new_metric, i, steps, max_halvings)
        fin = _finalize(new_metric, family.condition, res, 1e-10)
        if fin is None:
            raise BifurcationSuspectError(i, 1.0, "continued path fails the boundary condition")
        out.append(fin)
    log = dict(family.search_log)
    log["continued_from"] = len(family.solutions)
    return SolutionFamily(new_metric, family.condition, family.length_cap, out, log)


# ---------------------------------------------------------------------------
# separation


@dataclass
class SplitResult:
    metric: MetricField
    solutions: list
    attempts: list
    norms: dict


def _events_near(paths, center, radius, tol):
    dom = paths[0].metric.domain
    count = 0
    for i, a in enumerate(paths):
        for e in self_intersections(a, tol).events:
            if e.classification != "endpoint" and np.linalg.norm(dom.difference(e.location, center)) < radius:
                count += 1
        for b in paths[i + 1:]:
            for e in pairwise_intersections(a, b, tol, check_distinct=False).events:
                if e.classification != "endpoint" and np.linalg.norm(dom.difference(e.location, center)) < radius:
                    count += 1
    return count


def split_intersection(
    metric: MetricField,
    solutions,
    p,
    eta: float = 0.1,
    eps: float = 0.02,
    seed: int = 0,
    condition: BoundaryCondition | None = None,
    retries: int = 5,
    tolerance: float = 1e-7,
) -> SplitResult:
    """Perturb ``metric`` near ``p`` so that the continued solutions no
    longer meet inside ``B(p, eta)``.

    A conformal bump with a random off-center bias is tried, the inputs are
    continued to the new metric and intersections are re-detected; a fresh
    bias is drawn on failure, up to ``retries`` attempts.
    """
    p = np.asarray(p, dtype=float)
    sols = list(solutions)
    paths = [s.path if isinstance(s, BvpSolution) else s for s in sols]
    if len(paths) < 2:
        return SplitResult(metric, sols, [], {"c0": 0.0, "c1": 0.0, "c2": 0.0, "c2_norm": 0.0})
    if eta >= metric.inj_lower_bound / 4 + 1e-15:
        raise ValueError("support radius must be below a quarter of the injectivity bound")
    dom = metric.domain
    for path in paths:
        d = min(np.linalg.norm(dom.difference(x, p)) for x in path.arc_samples(257))
        if d > eta / 2:
            raise ValueError("every input path must pass through B(p, eta/2)")
    fams = []
    for s in sols:
        cond = _condition_for(s, condition)
        if isinstance(s, BvpSolution):
            fams.append(SolutionFamily(metric, cond, s.length * 2, [s]))
        else:
            fin = _finalize_path(metric, cond, s)
            fams.append(SolutionFamily(metric, cond, s.speed * 2, [fin]))
    rng = np.random.default_rng(seed)
    attempts = []
    for attempt in range(retries):
        bias = rng.standard_normal(p.size)
        spec = ConformalBump(p, eta, eps, bias)
        new = perturb(metric, [spec])
        record = {"spec": spec.to_dict(), "attempt": attempt}
        try:
            cont = [continue_solutions(metric, new, f).solutions[0] for f in fams]
        except (BifurcationSuspectError, ValueError, NotPositiveDefiniteError) as exc:
            record["outcome"] = f"continuation failed: {exc}"
            attempts.append(record)
            continue
        left = _events_near([c.path for c in cont], p, eta, tolerance)
        record["outcome"] = "separated" if left == 0 else f"{left} events remain"
        attempts.append(record)
        if left == 0:
            norms = perturbation_norms(metric, new, p, eta)
            return SplitResult(new, cont, attempts, norms)
    raise SeparationFailedError(attempts)


def _finalize_path(metric, cond, path):
    from .bvp import _NewtonResult

    v = with_variational(path)
    fin = _finalize(metric, cond, _NewtonResult(v, 0.0, 0, "converged"), 1e-10)
    if fin is None:
        raise ValueError("input path does not satisfy its boundary condition")
    return fin


def split_loop_velocity(metric: MetricField, solution: BvpSolution, eta: float = 0.1, eps: float = 0.02,
                        seed: int = 0, retries: int = 5, min_sin: float = 1e-4):
    """Perturb near the middle of a geodesic loop so that its start and end
    velocities become linearly independent.  Returns
    ``(metric, continued_solution, sin_before, sin_after)``."""
    path = solution.path
    cond = PointPair(path.start_point, path.start_point)
    g = metric.components(path.start_point)

    def sin_between(pth):
        a, b = pth.start_velocity, pth.end_velocity
        c = abs(a @ g @ b) / np.sqrt((a @ g @ a) * (b @ g @ b))
        return float(np.sqrt(max(0.0, 1 - c * c)))

    before = sin_between(path)
    center = path.position(0.5 * path.t_end)
    rng = np.random.default_rng(seed)
    fam = SolutionFamily(metric, cond, solution.length * 2, [solution])
    for _ in range(retries):
        spec = ConformalBump(center, eta, eps, rng.standard_normal(center.size))
        new = perturb(metric, [spec])
        try:
            cont = continue_solutions(metric, new, fam).solutions[0]
        except (BifurcationSuspectError, ValueError):
            continue
        after = sin_between(cont.path)
        if after > min_sin:
            return new, cont, before, after
    raise SeparationFailedError([])


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class VerificationReport:
    rounds: list
    final_family: SolutionFamily | None
    final_metric: MetricField
    success: bool
    partial: bool
    base_metric: MetricField

    @property
    def specs(self):
        m = self.final_metric
        return list(m.specs) if isinstance(m, PerturbedMetric) else []

    def metric_change(self) -> dict:
        """Sup norms of the total change over the union of supports."""
        out = {"c0": 0.0, "c1": 0.0, "c2": 0.0, "c2_norm": 0.0}
        for s in self.specs:
            nrm = perturbation_norms(self.base_metric, self.final_metric, s.center, s.support_radius)
            out = {k: max(out[k], nrm[k]) for k in out}
        return out

    def to_dict(self):
        return {
            "success": self.success,
            "partial": self.partial,
            "rounds": self.rounds,
            "final_metric": self.final_metric.to_dict(),
            "final_family": self.final_family.to_dict() if self.final_family else None,
            "metric_change": self.metric_change(),
        }


def _greedy_separated(points, min_dist, domain):
    chosen = []
    for x in points:
        if all(np.linalg.norm(domain.difference(x, y)) > min_dist for y in chosen):
            chosen.append(x)
    return chosen


def perturb_and_verify(
    metric: MetricField,
    condition,
    L: float,
    multistart: int = 100,
    seed: int = 0,
    eta: float = 0.1,
    eps: float = 0.02,
    retries: int = 5,
    max_rounds: int = 10,
    tolerance: float = 1e-7,
    family: SolutionFamily | None = None,
) -> VerificationReport:
    """Solve, detect double points, split them with localized bumps,
    continue the family and re-detect until no interior intersections remain.

    ``condition`` may be a single boundary condition or a list of them; in
    the latter case the family is the union of one solve per condition and
    each solution is continued under its own condition.
    """
    conds = condition if isinstance(condition, (list, tuple)) else [condition]
    if family is not None:
        families = [family]
    else:
        families = [solve_family(metric, c, L, multistart=multistart, seed=seed) for c in conds]
    base = metric
    rounds = []
    dom = metric.domain
    for rnd in range(max_rounds + 1):
        paths = [s.path for f in families for s in f.solutions]
        if not paths:
            return VerificationReport(rounds, _merge(families, metric), metric, True, False, base)
        M = intersection_matrix(paths, tolerance)
        entry = {
            "round": rnd,
            "counts": M.counts.tolist(),
            "locations": [x.tolist() for x in M.locations],
            "lengths": [s.length for f in families for s in f.solutions],
            "probe_checksum": probe_checksum(metric),
        }
        rounds.append(entry)
        if M.is_zero:
            return VerificationReport(rounds, _merge(families, metric), metric, True, False, base)
        if rnd == max_rounds:
            break
        targets = _greedy_separated(M.locations, 2.2 * eta, dom)
        entry["split"] = []
        new_metric = metric
        reuse = {}
        for k, x in enumerate(targets):
            through, conds_through, where = [], [], []
            for fi, f in enumerate(families):
                for si, s in enumerate(f.solutions):
                    if min(np.linalg.norm(dom.difference(y, x)) for y in s.path.arc_samples(257)) <= eta / 2:
                        through.append(s)
                        conds_through.append(f.condition)
                        where.append((fi, si))
            try:
                res = _split_mixed(metric, through, conds_through, x, eta, eps, seed + 7919 * rnd + k, retries, tolerance)
            except SeparationFailedError as exc:
                entry["split"].append({"location": x.tolist(), "attempts": exc.attempts, "outcome": "failed"})
                continue
            entry["split"].append({"location": x.tolist(), "attempts": res.attempts, "outcome": "separated"})
            new_specs = res.metric.specs[len(metric.specs) if isinstance(metric, PerturbedMetric) else 0:]
            new_metric = perturb(new_metric, new_specs)
            for key, sol in zip(where, res.solutions):
                reuse[key] = sol
        if new_metric is metric:
            break
        if len(entry["split"]) > 1:
            reuse = {}  # several new bumps: continue everything against the combined metric
        try:
            families = [
                continue_solutions(metric, new_metric, f,
                                   precomputed={si: _retarget_solution(s, new_metric)
                                                for (fj, si), s in reuse.items() if fj == fi})
                for fi, f in enumerate(families)
            ]
        except BifurcationSuspectError as exc:
            entry["error"] = str(exc)
            return VerificationReport(rounds, _merge(families, metric), metric, False, True, base)
        metric = new_metric
    return VerificationReport(rounds, _merge(families, metric), metric, False, True, base)


def _split_mixed(metric, sols, conds, p, eta, eps, seed, retries, tol):
    """``split_intersection`` for solutions that may carry different
    boundary conditions."""
    if len(set(map(id, conds))) == 1 or all(c == conds[0] for c in conds):
        return split_intersection(metric, sols, p, eta, eps, seed, conds[0], retries, tol)
    # continue each with its own condition
    rng = np.random.default_rng(seed)
    attempts = []
    for attempt in range(retries):
        spec = ConformalBump(p, eta, eps, rng.standard_normal(p.size))
        new = perturb(metric, [spec])
        try:
            cont = [continue_solutions(metric, new, SolutionFamily(metric, c, s.length * 2, [s])).solutions[0]
                    for s, c in zip(sols, conds)]
        except (BifurcationSuspectError, ValueError) as exc:
            attempts.append({"spec": spec.to_dict(), "attempt": attempt, "outcome": f"continuation failed: {exc}"})
            continue
        left = _events_near([c.path for c in cont], p, eta, tol)
        attempts.append({"spec": spec.to_dict(), "attempt": attempt,
                         "outcome": "separated" if left == 0 else f"{left} events remain"})
        if left == 0:
            return SplitResult(new, cont, attempts, perturbation_norms(metric, new, p, eta))
    raise SeparationFailedError(attempts)


def _merge(families, metric):
    if len(families) == 1:
        return families[0]
    sols = [s for f in families for s in f.solutions]
    return SolutionFamily(metric, families[0].condition, max(f.length_cap for f in families), sols,
                          {"merged": [f.condition.to_dict() for f in families]})
