"""Riemannian metrics on a single coordinate chart.

A metric is evaluated through its 2-jet: components ``g[i, j]``, first
derivatives ``dg[k, i, j] = d_k g_ij`` and second derivatives
``d2g[k, l, i, j] = d_k d_l g_ij``.  Built-in families supply closed forms;
anything else may fall back to central differences of the first derivatives.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import qmc


class MetricError(ValueError):
    """Raised for invalid metric parameters or evaluations."""


class NotPositiveDefiniteError(MetricError):
    pass


class DomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# chart domains


@dataclass(frozen=True)
class ChartDomain:
    """Box, closed unit disc or flat torus chart of dimension ``n >= 2``."""

    kind: str
    dimension: int
    bounds: tuple[tuple[float, float], ...] | None = None
    periods: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.dimension < 2:
            raise DomainError("chart dimension must be >= 2")
        if self.kind == "box":
            if self.bounds is None or len(self.bounds) != self.dimension:
                raise DomainError("box needs one (lo, hi) pair per axis")
            if any(not lo < hi for lo, hi in self.bounds):
                raise DomainError("box bounds must be strictly ordered")
        elif self.kind == "torus":
            if self.periods is None or len(self.periods) != self.dimension:
                raise DomainError("torus needs one period per axis")
            if any(p <= 0 for p in self.periods):
                raise DomainError("torus periods must be positive")
        elif self.kind != "disc":
            raise DomainError(f"unknown chart kind {self.kind!r}")

    @classmethod
    def box(cls, bounds: Sequence[Sequence[float]]) -> ChartDomain:
        b = tuple((float(lo), float(hi)) for lo, hi in bounds)
        return cls("box", len(b), bounds=b)

    @classmethod
    def unit_disc(cls, n: int) -> ChartDomain:
        return cls("disc", int(n))

    @classmethod
    def torus(cls, periods: Sequence[float]) -> ChartDomain:
        p = tuple(float(x) for x in periods)
        return cls("torus", len(p), periods=p)

    @property
    def is_torus(self) -> bool:
        return self.kind == "torus"

    @property
    def scale(self) -> float:
        """Characteristic chart length, used for finite-difference steps."""
        if self.kind == "box":
            return min(hi - lo for lo, hi in self.bounds)
        if self.kind == "torus":
            return min(self.periods)
        return 2.0

    def contains(self, x, margin: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        if self.kind == "disc":
            return float(x @ x) <= (1.0 + margin) ** 2
        if self.kind == "box":
            lo = np.array([b[0] for b in self.bounds])
            hi = np.array([b[1] for b in self.bounds])
            return bool(np.all(x >= lo - margin) and np.all(x <= hi + margin))
        return True

    def difference(self, a, b) -> np.ndarray:
        """Chart difference ``a - b``; shortest lattice representative on a torus."""
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.kind == "torus":
            p = np.asarray(self.periods)
            d = d - p * np.round(d / p)
        return d

    def wrap(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "torus":
            p = np.asarray(self.periods)
            return x - p * np.floor(x / p)
        return x

    def sample(self, count: int, seed: int = 0) -> np.ndarray:
        """Quasi-random points inside the chart."""
        n = self.dimension
        u = qmc.Halton(d=n, seed=seed).random(count)
        if self.kind == "box":
            lo = np.array([b[0] for b in self.bounds])
            hi = np.array([b[1] for b in self.bounds])
            return lo + u * (hi - lo)
        if self.kind == "torus":
            return u * np.asarray(self.periods)
        # uniform in the ball: direction from a Gaussian, radius u**(1/n)
        g = np.random.default_rng(seed).standard_normal((count, n))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return g * (u[:, :1] ** (1.0 / n)) * 0.999

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "dimension": self.dimension}
        if self.bounds is not None:
            d["bounds"] = [list(b) for b in self.bounds]
        if self.periods is not None:
            d["periods"] = list(self.periods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ChartDomain:
        kind = d["kind"]
        if kind == "box":
            return cls.box(d["bounds"])
        if kind == "torus":
            return cls.torus(d["periods"])
        if kind == "disc":
            return cls.unit_disc(d["dimension"])
        raise DomainError(f"unknown chart kind {kind!r}")


def sphere_points(n: int, count: int, seed: int = 0) -> np.ndarray:
    """Low-discrepancy points on the Euclidean unit sphere in R^n."""
    u = qmc.Halton(d=n, seed=seed).random(count)
    u = np.clip(u, 1e-12, 1 - 1e-12)
    from scipy.special import ndtri

    z = ndtri(u)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# metric families


class MetricField:
    """Base class; subclasses implement :meth:`jet`."""

    family = "abstract"

    def __init__(self, domain: ChartDomain, inj_lower_bound: float | None = None):
        self.domain = domain
        self._inj = inj_lower_bound

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    @property
    def inj_lower_bound(self) -> float:
        if self._inj is not None:
            return float(self._inj)
        return self._default_inj()

    def _default_inj(self) -> float:
        # crude estimate: smallest metric stretch times half the chart scale
        pts = self.domain.sample(64, seed=7)
        lam = min(np.linalg.eigvalsh(self.components(x))[0] for x in pts)
        return float(np.sqrt(max(lam, 1e-12)) * 0.5 * self.domain.scale)

    @property
    def feature_scale(self) -> float | None:
        """Chart length below which the metric may vary sharply (None if
        it varies on the scale of the chart); caps integrator steps."""
        return None

    def jet(self, x, order: int = 2):
        """Return ``(g, dg, d2g)`` truncated to ``order`` (0, 1 or 2)."""
        raise NotImplementedError

    def components(self, x) -> np.ndarray:
        return self.jet(x, 0)[0]

    def first_derivatives(self, x) -> np.ndarray:
        return self.jet(x, 1)[1]

    def second_derivatives(self, x) -> np.ndarray:
        return self.jet(x, 2)[2]

    def _fd_second(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = x.size
        h = 1e-5 * self.domain.scale
        out = np.empty((n, n, n, n))
        for l in range(n):
            e = np.zeros(n)
            e[l] = h
            out[:, l] = (self.jet(x + e, 1)[1] - self.jet(x - e, 1)[1]) / (2 * h)
        return 0.5 * (out + out.transpose(1, 0, 2, 3))

    def is_constant(self) -> bool:
        return False

    def to_dict(self) -> dict:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.to_dict()})"


class ConstantDiagonalMetric(MetricField):
    family = "constant-diagonal"

    def __init__(self, domain: ChartDomain, diagonal: Sequence[float], inj_lower_bound=None):
        super().__init__(domain, inj_lower_bound)
        a = np.asarray(diagonal, dtype=float)
        if a.shape != (domain.dimension,):
            raise MetricError("diagonal length must match the chart dimension")
        if np.any(a <= 0):
            raise NotPositiveDefiniteError("diagonal entries must be positive")
        self.diagonal = a
        self._g = np.diag(a)
        n = domain.dimension
        self._zero1 = np.zeros((n, n, n))
        self._zero2 = np.zeros((n, n, n, n))

    def _default_inj(self) -> float:
        s = np.sqrt(self.diagonal.min())
        if self.domain.kind == "torus":
            return float(s * 0.5 * min(self.domain.periods))
        return float(s * self.domain.scale)

    def jet(self, x, order=2):
        out = (self._g,)
        if order >= 1:
            out += (self._zero1,)
        if order >= 2:
            out += (self._zero2,)
        return out

    def is_constant(self):
        return True

    def to_dict(self):
        return {
            "family": self.family,
            "domain": self.domain.to_dict(),
            "diagonal": self.diagonal.tolist(),
            "inj_lower_bound": self._inj,
        }


def flat_metric(domain: ChartDomain) -> ConstantDiagonalMetric:
    return ConstantDiagonalMetric(domain, np.ones(domain.dimension))


class ConformalMetric(MetricField):
    """``g = exp(2 phi) * identity`` with a closed-form profile ``phi``.

    Profiles
    --------
    ``stereographic``
        ``phi = log(2 R / (1 + |x|^2))``: round sphere of radius ``R``.
    ``quadratic``
        ``phi = c |x|^2``.
    """

    family = "conformal"

    def __init__(self, domain: ChartDomain, profile: str, inj_lower_bound=None, **params):
        if domain.is_torus:
            raise MetricError("conformal profiles are not periodic")
        super().__init__(domain, inj_lower_bound)
        if profile not in ("stereographic", "quadratic"):
            raise MetricError(f"unknown conformal profile {profile!r}")
        self.profile = profile
        self.params = {k: float(v) for k, v in params.items()}

    def _default_inj(self):
        if self.profile == "stereographic":
            return float(np.pi * self.params.get("radius", 1.0))
        return super()._default_inj()

    def _phi(self, x):
        s = float(x @ x)
        n = x.size
        if self.profile == "stereographic":
            R = self.params.get("radius", 1.0)
            phi = np.log(2.0 * R / (1.0 + s))
            grad = -2.0 * x / (1.0 + s)
            hess = -2.0 * np.eye(n) / (1.0 + s) + 4.0 * np.outer(x, x) / (1.0 + s) ** 2
        else:
            c = self.params.get("c", 0.0)
            phi = c * s
            grad = 2.0 * c * x
            hess = 2.0 * c * np.eye(n)
        return phi, grad, hess

    def jet(self, x, order=2):
        x = np.asarray(x, dtype=float)
        n = x.size
        phi, dphi, hphi = self._phi(x)
        e = np.exp(2.0 * phi)
        eye = np.eye(n)
        out = (e * eye,)
        if order >= 1:
            out += (2.0 * e * dphi[:, None, None] * eye,)
        if order >= 2:
            w = 4.0 * np.outer(dphi, dphi) + 2.0 * hphi
            out += (e * w[:, :, None, None] * eye,)
        return out

    def to_dict(self):
        return {
            "family": self.family,
            "domain": self.domain.to_dict(),
            "profile": self.profile,
            "params": dict(self.params),
            "inj_lower_bound": self._inj,
        }


def stereographic_sphere(domain: ChartDomain | None = None, radius: float = 1.0) -> ConformalMetric:
    if domain is None:
        domain = ChartDomain.box([(-4.0, 4.0)] * 3)
    return ConformalMetric(domain, "stereographic", radius=radius)


class RotationalMetric(MetricField):
    """``g_ij = A(s) delta_ij + B(s) x_i x_j`` with ``s = |x|^2``.

    ``A`` and ``B`` are polynomials given by coefficient lists in increasing
    degree.  Every such metric is invariant under the orthogonal group.
    """

    family = "rotational"

    def __init__(self, domain: ChartDomain, a_coeffs, b_coeffs=(0.0,), inj_lower_bound=None):
        if domain.is_torus:
            raise MetricError("rotational metrics are not periodic")
        super().__init__(domain, inj_lower_bound)
        self.a = np.polynomial.Polynomial(np.asarray(a_coeffs, dtype=float))
        self.b = np.polynomial.Polynomial(np.asarray(b_coeffs, dtype=float))
        self._da, self._d2a = self.a.deriv(1), self.a.deriv(2)
        self._db, self._d2b = self.b.deriv(1), self.b.deriv(2)

    def jet(self, x, order=2):
        x = np.asarray(x, dtype=float)
        n = x.size
        s = float(x @ x)
        A, B = self.a(s), self.b(s)
        eye = np.eye(n)
        xx = np.outer(x, x)
        out = (A * eye + B * xx,)
        if order >= 1:
            A1, B1 = self._da(s), self._db(s)
            # d_k (x_i x_j) = delta_ik x_j + x_i delta_jk
            dxx = np.einsum("ki,j->kij", eye, x) + np.einsum("i,kj->kij", x, eye)
            dg = (
                2.0 * A1 * x[:, None, None] * eye
                + 2.0 * B1 * x[:, None, None] * xx
                + B * dxx
            )
            out += (dg,)
        if order >= 2:
            A2, B2 = self._d2a(s), self._d2b(s)
            kl = np.outer(x, x)
            d2 = (
                (2.0 * A1 * eye[:, :, None, None] + 4.0 * A2 * kl[:, :, None, None]) * eye
                + (2.0 * B1 * eye[:, :, None, None] + 4.0 * B2 * kl[:, :, None, None]) * xx
                + 2.0 * B1 * (x[:, None, None, None] * dxx[None, :, :, :])
                + 2.0 * B1 * (x[None, :, None, None] * dxx[:, None, :, :])
                + B * (np.einsum("ki,lj->klij", eye, eye) + np.einsum("li,kj->klij", eye, eye))
            )
            out += (d2,)
        return out

    def to_dict(self):
        return {
            "family": self.family,
            "domain": self.domain.to_dict(),
            "a_coeffs": self.a.coef.tolist(),
            "b_coeffs": self.b.coef.tolist(),
            "inj_lower_bound": self._inj,
        }


class PeriodicBumpMetric(MetricField):
    """Metric on a flat-torus chart with periodic Fourier bumps.

    ``g = diag(base) + sum_t amp_t * M_t * cos(2 pi <k_t, x / P> + phase_t)``
    where ``k_t`` are integer wave vectors and ``M_t`` symmetric matrices.
    """

    family = "periodic-bump"

    def __init__(self, domain: ChartDomain, base, terms, inj_lower_bound=None):
        if not domain.is_torus:
            raise MetricError("periodic bumps live on a torus chart")
        super().__init__(domain, inj_lower_bound)
        n = domain.dimension
        self.base = np.asarray(base, dtype=float)
        self.terms = []
        for t in terms:
            k = np.asarray(t["k"], dtype=float)
            M = np.asarray(t["matrix"], dtype=float)
            if M.shape != (n, n) or not np.allclose(M, M.T):
                raise MetricError("bump matrices must be symmetric n x n")
            if not np.allclose(k, np.round(k)):
                raise MetricError("wave vectors must be integer")
            self.terms.append(
                {"k": k, "matrix": M, "amp": float(t["amp"]), "phase": float(t.get("phase", 0.0))}
            )
        self._w = [2.0 * np.pi * t["k"] / np.asarray(domain.periods) for t in self.terms]

    def _default_inj(self):
        lam = self.base.min() - sum(abs(t["amp"]) * np.abs(np.linalg.eigvalsh(t["matrix"])).max() for t in self.terms)
        return float(np.sqrt(max(lam, 1e-12)) * 0.5 * min(self.domain.periods))

    def jet(self, x, order=2):
        x = np.asarray(x, dtype=float)
        g = np.diag(self.base).astype(float)
        n = x.size
        dg = np.zeros((n, n, n)) if order >= 1 else None
        d2g = np.zeros((n, n, n, n)) if order >= 2 else None
        for t, w in zip(self.terms, self._w):
            arg = float(w @ x) + t["phase"]
            c, s = np.cos(arg), np.sin(arg)
            g = g + t["amp"] * c * t["matrix"]
            if order >= 1:
                dg -= t["amp"] * s * w[:, None, None] * t["matrix"]
            if order >= 2:
                d2g -= t["amp"] * c * np.outer(w, w)[:, :, None, None] * t["matrix"]
        out = (g,)
        if order >= 1:
            out += (dg,)
        if order >= 2:
            out += (d2g,)
        return out

    def to_dict(self):
        return {
            "family": self.family,
            "domain": self.domain.to_dict(),
            "base": self.base.tolist(),
            "terms": [
                {"k": t["k"].tolist(), "matrix": t["matrix"].tolist(), "amp": t["amp"], "phase": t["phase"]}
                for t in self.terms
            ],
            "inj_lower_bound": self._inj,
        }


class BlendMetric(MetricField):
    """Linear blend ``(1 - lam) g0 + lam g1`` of two metrics on the same chart."""

    family = "blend"

    def __init__(self, g0: MetricField, g1: MetricField, lam: float):
        super().__init__(g0.domain, min(g0.inj_lower_bound, g1.inj_lower_bound))
        self.g0, self.g1, self.lam = g0, g1, float(lam)

    @property
    def feature_scale(self):
        scales = [s for s in (self.g0.feature_scale, self.g1.feature_scale) if s is not None]
        return min(scales) if scales else None

    def jet(self, x, order=2):
        if self.lam == 0.0:
            return self.g0.jet(x, order)
        if self.lam == 1.0:
            return self.g1.jet(x, order)
        a = self.g0.jet(x, order)
        b = self.g1.jet(x, order)
        return tuple((1.0 - self.lam) * u + self.lam * v for u, v in zip(a, b))

    def to_dict(self):
        return {"family": self.family, "g0": self.g0.to_dict(), "g1": self.g1.to_dict(), "lam": self.lam}


def metric_from_dict(d: dict) -> MetricField:
    """Rebuild a metric from :meth:`MetricField.to_dict` output."""
    fam = d.get("family")
    inj = d.get("inj_lower_bound")
    if fam == "blend":
        return BlendMetric(metric_from_dict(d["g0"]), metric_from_dict(d["g1"]), d["lam"])
    if fam == "perturbed":
        from .perturbation import PerturbedMetric

        return PerturbedMetric.from_dict(d)
    # shorthands used by scenario files
    if fam == "flat-torus":
        periods = d.get("periods", [1.0] * int(d.get("dimension", 3)))
        return ConstantDiagonalMetric(ChartDomain.torus(periods), np.ones(len(periods)), inj)
    if fam == "stereographic-sphere":
        dom = ChartDomain.from_dict(d["domain"]) if "domain" in d else None
        return stereographic_sphere(dom, float(d.get("radius", 1.0)))
    domain = ChartDomain.from_dict(d["domain"])
    if fam == "constant-diagonal":
        return ConstantDiagonalMetric(domain, d["diagonal"], inj)
    if fam == "flat":
        return ConstantDiagonalMetric(domain, np.ones(domain.dimension), inj)
    if fam == "conformal":
        return ConformalMetric(domain, d["profile"], inj, **d.get("params", {}))
    if fam == "rotational":
        return RotationalMetric(domain, d["a_coeffs"], d.get("b_coeffs", [0.0]), inj)
    if fam == "periodic-bump":
        return PeriodicBumpMetric(domain, d["base"], d["terms"], inj)
    raise MetricError(f"unknown metric family {fam!r}")


# ---------------------------------------------------------------------------
# pointwise geometry


def connection_from_jet(g, dg, check: bool = False):
    """Christoffel symbols ``Gamma[k, i, j]`` and the inverse metric."""
    if check:
        try:
            np.linalg.cholesky(g)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("metric matrix is not positive definite") from exc
    ginv = np.linalg.inv(g)
    # lowered symbols Gamma_{l,ij} = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    low = 0.5 * (dg.transpose(2, 0, 1) + dg.transpose(2, 1, 0) - dg)
    return np.einsum("kl,lij->kij", ginv, low), ginv


def christoffel(metric: MetricField, x) -> np.ndarray:
    """Levi-Civita symbols ``Gamma[k, i, j]`` (upper index first)."""
    g, dg = metric.jet(np.asarray(x, dtype=float), 1)
    return connection_from_jet(g, dg, check=True)[0]


def christoffel_derivatives_from_jet(g, dg, d2g, gamma=None, ginv=None):
    """``dGamma[m, k, i, j] = d_m Gamma^k_ij``."""
    if gamma is None:
        gamma, ginv = connection_from_jet(g, dg)
    low = 0.5 * (d2g.transpose(0, 3, 1, 2) + d2g.transpose(0, 3, 2, 1) - d2g)
    # d_m g^{kl} = -g^{ka} d_m g_ab g^{bl}
    t1 = -np.einsum("ka,mab,bij->mkij", ginv, dg, gamma)
    t2 = np.einsum("kl,mlij->mkij", ginv, low)
    return t1 + t2


def riemann_from_jet(g, dg, d2g):
    """``R[a, b, c, d]`` with ``R(e_c, e_d) e_b = R[a, b, c, d] e_a``."""
    gamma, ginv = connection_from_jet(g, dg)
    dgam = christoffel_derivatives_from_jet(g, dg, d2g, gamma, ginv)
    R = (
        np.einsum("cadb->abcd", dgam)
        - np.einsum("dacb->abcd", dgam)
        + np.einsum("ace,edb->abcd", gamma, gamma)
        - np.einsum("ade,ecb->abcd", gamma, gamma)
    )
    return R


def curvature_term(metric: MetricField, x, Y, v) -> np.ndarray:
    """``R(Y, v) v``; for the unit round sphere this is ``Y`` when ``Y`` is
    a unit vector orthogonal to a unit ``v``."""
    g, dg, d2g = metric.jet(np.asarray(x, dtype=float), 2)
    connection_from_jet(g, dg, check=True)
    R = riemann_from_jet(g, dg, d2g)
    return np.einsum("abcd,b,c,d->a", R, v, Y, v)


def inner(metric: MetricField, x, u, w) -> float:
    return float(np.asarray(u) @ metric.components(x) @ np.asarray(w))


def norm(metric: MetricField, x, u) -> float:
    return float(np.sqrt(inner(metric, x, u, u)))


def gram_schmidt(g: np.ndarray, vectors) -> list[np.ndarray]:
    out = []
    for v in vectors:
        w = np.array(v, dtype=float)
        for e in out:
            w = w - (e @ g @ w) * e
        nrm = np.sqrt(w @ g @ w)
        if nrm < 1e-12:
            continue
        out.append(w / nrm)
    return out


def complement_frame(g: np.ndarray, direction) -> list[np.ndarray]:
    """g-orthonormal basis of the g-orthogonal complement of ``direction``.

    Coordinate axes are projected onto the complement; the axis most parallel
    to ``direction`` is dropped.
    """
    d = np.asarray(direction, dtype=float)
    n = d.size
    d = d / np.sqrt(d @ g @ d)
    drop = int(np.argmax(np.abs(d @ g) / np.sqrt(np.diag(g))))
    axes = [np.eye(n)[i] for i in range(n) if i != drop]
    proj = [a - (d @ g @ a) * d for a in axes]
    return gram_schmidt(g, proj)


# ---------------------------------------------------------------------------
# hypersurfaces and boundary geometry


@dataclass(frozen=True)
class QuadricLevelSet:
    """Hypersurface ``{x : x^T A x + b.x + c = 0}``."""

    A: tuple
    b: tuple
    c: float

    @classmethod
    def from_arrays(cls, A, b, c) -> QuadricLevelSet:
        A = np.asarray(A, dtype=float)
        return cls(tuple(map(tuple, A)), tuple(np.asarray(b, dtype=float)), float(c))

    @classmethod
    def unit_sphere(cls, n: int) -> QuadricLevelSet:
        return cls.from_arrays(np.eye(n), np.zeros(n), -1.0)

    @classmethod
    def sphere(cls, center, radius) -> QuadricLevelSet:
        c0 = np.asarray(center, dtype=float)
        n = c0.size
        return cls.from_arrays(np.eye(n), -2.0 * c0, float(c0 @ c0 - radius**2))

    @property
    def matrix(self):
        return np.asarray(self.A)

    @property
    def vector(self):
        return np.asarray(self.b)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.matrix @ x + self.vector @ x + self.c)

    def gradient(self, x) -> np.ndarray:
        return 2.0 * self.matrix @ np.asarray(x, dtype=float) + self.vector

    def hessian(self, x=None) -> np.ndarray:
        return 2.0 * self.matrix

    def project(self, x, iterations: int = 20) -> np.ndarray:
        """Move ``x`` onto the level set along the Euclidean gradient."""
        x = np.asarray(x, dtype=float).copy()
        for _ in range(iterations):
            f = self.value(x)
            gr = self.gradient(x)
            nn = gr @ gr
            if nn < 1e-24:
                raise MetricError("degenerate level-set gradient")
            x = x - f * gr / nn
            if abs(f) < 1e-15:
                break
        return x

    def tangent_basis(self, x) -> list[np.ndarray]:
        """Euclidean-orthonormal basis of ``ker dF`` (axis most parallel to
        the gradient dropped before Gram-Schmidt)."""
        gr = self.gradient(x)
        nrm = np.linalg.norm(gr)
        if nrm < 1e-12:
            raise MetricError("degenerate level-set gradient")
        return complement_frame(np.eye(gr.size), gr / nrm)

    def to_dict(self):
        return {"A": [list(r) for r in self.A], "b": list(self.b), "c": self.c}

    @classmethod
    def from_dict(cls, d):
        return cls.from_arrays(d["A"], d["b"], d["c"])


@dataclass
class BoundaryGeometry:
    point: np.ndarray
    inward_normal: np.ndarray
    frame: list
    shape_operator: np.ndarray
    principal_curvatures: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.principal_curvatures is None:
            self.principal_curvatures = np.sort(np.linalg.eigvalsh(self.shape_operator))


def hypersurface_geometry(metric: MetricField, level_set: QuadricLevelSet, x) -> BoundaryGeometry:
    """Unit normal (pointing towards ``F < 0``), tangent frame and second
    fundamental form of a level set, via the covariant Hessian of ``F``."""
    x = np.asarray(x, dtype=float)
    g, dg = metric.jet(x, 1)
    gamma, ginv = connection_from_jet(g, dg)
    dF = level_set.gradient(x)
    if np.linalg.norm(dF) < 1e-12:
        raise MetricError("degenerate level-set gradient")
    grad = ginv @ dF
    gnorm = np.sqrt(dF @ grad)
    nu = -grad / gnorm
    frame = complement_frame(g, nu)
    # covariant Hessian: d_ij F - Gamma^k_ij d_k F
    hess = level_set.hessian(x) - np.einsum("kij,k->ij", gamma, dF)
    T = np.array(frame)
    S = T @ hess @ T.T / gnorm
    S = 0.5 * (S + S.T)
    return BoundaryGeometry(point=x, inward_normal=nu, frame=frame, shape_operator=S)


def boundary_geometry(metric: MetricField, x) -> BoundaryGeometry:
    """Inward normal, tangent frame and shape operator of the unit sphere
    bounding a disc chart.  Positive principal curvatures mean convex."""
    if metric.domain.kind != "disc":
        raise DomainError("boundary geometry needs a unit-disc chart")
    x = np.asarray(x, dtype=float)
    if abs(np.linalg.norm(x) - 1.0) > 1e-10:
        raise DomainError("point is not on the unit sphere")
    return hypersurface_geometry(metric, QuadricLevelSet.unit_sphere(x.size), x)


class ConvexityResult(NamedTuple):
    strictly_convex: bool
    min_curvature: float
    argmin: np.ndarray


def is_strictly_convex(metric: MetricField, samples: int = 100, seed: int = 0) -> ConvexityResult:
    if metric.domain.kind != "disc":
        raise DomainError("convexity check needs a unit-disc chart")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    pts = sphere_points(metric.dimension, samples, seed)
    best, arg = np.inf, None
    for x in pts:
        k = boundary_geometry(metric, x).principal_curvatures[0]
        if k < best:
            best, arg = k, x
    return ConvexityResult(bool(best > 0), float(best), arg)


def check_positive_definite(metric: MetricField, probes: int = 10_000, seed: int = 0) -> float:
    """Smallest eigenvalue over quasi-random probes; raises if not positive."""
    lam = np.inf
    for x in metric.domain.sample(probes, seed):
        lam = min(lam, np.linalg.eigvalsh(metric.components(x))[0])
    if not lam > 0:
        raise NotPositiveDefiniteError(f"smallest eigenvalue {lam}")
    return float(lam)
