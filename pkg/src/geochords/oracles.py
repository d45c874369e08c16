"""Independent reference computations used to cross-check the solvers.

Nothing here reuses the shooting or Jacobi machinery: the index form is
assembled from a separately transported parallel frame and finite-difference
curvature, straight-line problems are solved by enumeration or scanning, and
distances come from a graph shortest path.
"""
from __future__ import annotations

import itertools
from typing import NamedTuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .metric import MetricField, QuadricLevelSet


# ---------------------------------------------------------------------------
# flat tori


def lattice_vectors(offset, periods, cap, diagonal=None) -> list[np.ndarray]:
    """All ``offset + k * periods`` (``k`` integer) with g-length in
    ``(0, cap]`` for the constant metric ``diag(diagonal)``."""
    offset = np.asarray(offset, float)
    periods = np.asarray(periods, float)
    a = np.ones_like(offset) if diagonal is None else np.asarray(diagonal, float)
    reach = [int(np.ceil(cap / (np.sqrt(ai) * pi))) + 1 for ai, pi in zip(a, periods)]
    out = []
    for k in itertools.product(*[range(-r, r + 1) for r in reach]):
        w = offset + np.asarray(k) * periods
        ln = np.sqrt(np.sum(a * w * w))
        if 0 < ln <= cap:
            out.append(w)
    return out


def lattice_count(p, q, periods, cap, diagonal=None) -> int:
    """Number of geodesic segments from ``p`` to ``q`` of length at most
    ``cap`` on a flat torus; for loops, ``w`` and ``-w`` are one curve."""
    d = np.asarray(q, float) - np.asarray(p, float)
    vecs = lattice_vectors(d, periods, cap, diagonal)
    if np.allclose(d, 0.0):
        return len(vecs) // 2
    return len(vecs)


# ---------------------------------------------------------------------------
# double normals of a constant metric on the unit ball


class Chord(NamedTuple):
    start: np.ndarray
    end: np.ndarray
    length: float


def double_normals_constant(diagonal, cap, grid: int = 20000, seed: int = 0) -> list[Chord]:
    """Straight chords of the unit ball meeting the sphere g-orthogonally at
    both ends, for ``g = diag(diagonal)``, found by a residual scan over the
    sphere followed by local refinement."""
    a = np.asarray(diagonal, float)
    n = a.size
    G = np.diag(a)
    Ginv = np.diag(1 / a)

    def chord(x0):
        x0 = x0 / np.linalg.norm(x0)
        d = -Ginv @ x0
        s = -2 * (x0 @ d) / (d @ d)
        return x0, x0 + s * d

    def res(x0):
        x0 = x0 / np.linalg.norm(x0)
        _, x1 = chord(x0)
        # end velocity must point along the outward g-normal at x1
        w = Ginv @ x1
        v = -Ginv @ x0
        diff = v / np.linalg.norm(v) - w / np.linalg.norm(w)
        return float(diff @ diff)

    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((grid, n))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    d = -pts / a
    s = -2 * np.einsum("ij,ij->i", pts, d) / np.einsum("ij,ij->i", d, d)
    x1 = pts + s[:, None] * d
    w = x1 / a
    diff = d / np.linalg.norm(d, axis=1, keepdims=True) - w / np.linalg.norm(w, axis=1, keepdims=True)
    vals = np.einsum("ij,ij->i", diff, diff)
    order = np.argsort(vals)
    found: list[Chord] = []
    seeds: list[np.ndarray] = []
    for i in order:
        if vals[i] > 0.5:
            break
        if any(min(np.linalg.norm(pts[i] - y), np.linalg.norm(pts[i] + y)) < 0.3 for y in seeds):
            continue
        seeds.append(pts[i])
        r = minimize(res, pts[i], method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-24, "maxiter": 4000})
        if r.fun > 1e-14:
            continue
        x0, x1 = chord(r.x)
        ln = float(np.sqrt((x1 - x0) @ G @ (x1 - x0)))
        if ln > cap:
            continue
        same = any(
            (np.linalg.norm(c.start - x0) < 1e-5 and np.linalg.norm(c.end - x1) < 1e-5)
            or (np.linalg.norm(c.start - x1) < 1e-5 and np.linalg.norm(c.end - x0) < 1e-5)
            for c in found
        )
        if not same:
            found.append(Chord(x0, x1, ln))
    return sorted(found, key=lambda c: c.length)


# ---------------------------------------------------------------------------
# graph distance


def grid_distance(metric: MetricField, p, q, spacing: float, stencil: int = 3) -> float:
    """Shortest-path length between the grid nodes nearest ``p`` and ``q``
    on a regular grid over a 2D box chart, with edges to all primitive
    offsets up to ``stencil`` and Simpson-rule edge lengths."""
    if metric.dimension != 2 or metric.domain.kind != "box":
        raise ValueError("grid distance oracle needs a 2D box chart")
    (x0, x1), (y0, y1) = metric.domain.bounds
    nx = int(round((x1 - x0) / spacing)) + 1
    ny = int(round((y1 - y0) / spacing)) + 1
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    hx, hy = xs[1] - xs[0], ys[1] - ys[0]
    offsets = [
        (i, j)
        for i in range(-stencil, stencil + 1)
        for j in range(-stencil, stencil + 1)
        if (i, j) != (0, 0) and np.gcd(abs(i), abs(j)) == 1
    ]
    # metric components on the half grid for midpoints
    def gmat(x, y):
        return metric.components(np.array([x, y]))

    rows, cols, w = [], [], []
    G = np.empty((nx, ny, 2, 2))
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            G[i, j] = gmat(x, y)
    for i in range(nx):
        for j in range(ny):
            for di, dj in offsets:
                k, l = i + di, j + dj
                if not (0 <= k < nx and 0 <= l < ny) or (di, dj) < (0, 0):
                    continue
                d = np.array([di * hx, dj * hy])
                gm = gmat(xs[i] + 0.5 * d[0], ys[j] + 0.5 * d[1])
                s0 = np.sqrt(d @ G[i, j] @ d)
                sm = np.sqrt(d @ gm @ d)
                s1 = np.sqrt(d @ G[k, l] @ d)
                rows.append(i * ny + j)
                cols.append(k * ny + l)
                w.append((s0 + 4 * sm + s1) / 6)
    A = coo_matrix((w, (rows, cols)), shape=(nx * ny, nx * ny)).tocsr()
    src = int(np.argmin(np.abs(xs - p[0]))) * ny + int(np.argmin(np.abs(ys - p[1])))
    dst = int(np.argmin(np.abs(xs - q[0]))) * ny + int(np.argmin(np.abs(ys - q[1])))
    dist = dijkstra(A, directed=False, indices=src)
    return float(dist[dst])


# ---------------------------------------------------------------------------
# round sphere in stereographic coordinates


def stereographic_radius(arc: float, radius: float = 1.0) -> float:
    """Chart radius reached by a radial geodesic of length ``arc`` from the
    origin of the stereographic chart of a sphere of the given radius."""
    return float(np.tan(arc / (2 * radius)))


def sphere_jacobi_block(speed: float, t: float) -> np.ndarray:
    """Transverse Jacobi propagator on the unit sphere for a geodesic of
    the given speed over parameter ``t``: ``[[cos, sin/s], [-s sin, cos]]``."""
    c, s = np.cos(speed * t), np.sin(speed * t)
    return np.array([[c, s / speed], [-speed * s, c]])


def clairaut_constant(metric, x, v) -> float:
    """``g(v, K x)`` for the rotation field ``K x = (-x2, x1, 0, ...)``;
    conserved along geodesics of metrics invariant under that rotation."""
    x = np.asarray(x, float)
    K = np.zeros_like(x)
    K[0], K[1] = -x[1], x[0]
    return float(np.asarray(v) @ metric.components(x) @ K)


# ---------------------------------------------------------------------------
# discretized index form


def fd_christoffel(metric: MetricField, x, h: float = 1e-5) -> np.ndarray:
    """Christoffel symbols from central differences of the components only."""
    x = np.asarray(x, float)
    n = x.size
    dg = np.empty((n, n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        dg[k] = (metric.components(x + e) - metric.components(x - e)) / (2 * h)
    ginv = np.linalg.inv(metric.components(x))
    low = 0.5 * (dg.transpose(2, 0, 1) + dg.transpose(2, 1, 0) - dg)
    return np.einsum("kl,lij->kij", ginv, low)


def fd_curvature_operator(metric: MetricField, x, v, h: float = 1e-4) -> np.ndarray:
    """Matrix of ``Y -> R(Y, v) v`` from finite differences of
    finite-difference Christoffel symbols."""
    x = np.asarray(x, float)
    n = x.size
    gam = fd_christoffel(metric, x)
    dgam = np.empty((n, n, n, n))
    for m in range(n):
        e = np.zeros(n)
        e[m] = h
        dgam[m] = (fd_christoffel(metric, x + e) - fd_christoffel(metric, x - e)) / (2 * h)
    R = (
        np.einsum("cadb->abcd", dgam)
        - np.einsum("dacb->abcd", dgam)
        + np.einsum("ace,edb->abcd", gam, gam)
        - np.einsum("ade,ecb->abcd", gam, gam)
    )
    return np.einsum("abcd,b,d->ac", R, v, v)


def _transport(metric, x0, v0, frame0, nodes):
    """Integrate the geodesic together with a parallel frame."""
    n = x0.size
    k = frame0.shape[1]

    def rhs(t, z):
        x, v = z[:n], z[n:2 * n]
        E = z[2 * n:].reshape(n, k)
        gam = fd_christoffel(metric, x, h=1e-6)
        acc = -np.einsum("kij,i,j->k", gam, v, v)
        dE = -np.einsum("kij,i,ja->ka", gam, v, E)
        return np.concatenate([v, acc, dE.ravel()])

    z0 = np.concatenate([x0, v0, frame0.ravel()])
    sol = solve_ivp(rhs, (0, nodes[-1]), z0, method="RK45", rtol=1e-11, atol=1e-12, t_eval=nodes)
    return sol.y[:n].T, sol.y[n:2 * n].T, sol.y[2 * n:].T.reshape(-1, n, k)


def _weingarten_form(metric, level: QuadricLevelSet, x, frame):
    """``<W e_a, e_b>`` for the Weingarten map w.r.t. the normal pointing to
    ``F < 0``, from the covariant Hessian with difference-quotient symbols."""
    g = metric.components(x)
    dF = level.gradient(x)
    gnorm = np.sqrt(dF @ np.linalg.solve(g, dF))
    hess = level.hessian(x) - np.einsum("kij,k->ij", fd_christoffel(metric, x), dF)
    return frame.T @ hess @ frame / gnorm


class IndexFormResult(NamedTuple):
    kernel_dimension: int
    index: int
    eigenvalues: np.ndarray


def _assemble(K, B0, B1, dirichlet, N):
    """Stiffness minus curvature on P1 elements with lumped curvature and
    mass; ``K`` is sampled at the ``N + 1`` nodes."""
    m = K.shape[1]
    h = 1.0 / N
    size = (N + 1) * m
    A = np.zeros((size, size))
    I = np.eye(m)
    for e in range(N):
        i, j = e * m, (e + 1) * m
        A[i:i + m, i:i + m] += I / h
        A[j:j + m, j:j + m] += I / h
        A[i:i + m, j:j + m] -= I / h
        A[j:j + m, i:i + m] -= I / h
    w = np.full(N + 1, h)
    w[0] = w[-1] = h / 2
    for i in range(N + 1):
        A[i * m:(i + 1) * m, i * m:(i + 1) * m] -= w[i] * K[i]
    A[:m, :m] -= B0
    A[-m:, -m:] += B1
    M = np.repeat(w, m)
    if dirichlet:
        A = A[m:-m, m:-m]
        M = M[m:-m]
    # symmetric scaling turns the lumped generalized problem into a standard one
    s = 1 / np.sqrt(M)
    return np.linalg.eigvalsh(s[:, None] * A * s[None, :])


def index_form_spectrum(metric: MetricField, x0, v0, condition, N: int) -> np.ndarray:
    """Lowest eigenvalues of the discretized index form of the geodesic with
    initial data ``(x0, v0)`` on ``[0, 1]``."""
    x0, v0 = np.asarray(x0, float), np.asarray(v0, float)
    n = x0.size
    nodes = np.linspace(0.0, 1.0, N + 1)
    g0 = metric.components(x0)
    # frame of the complement of v0: project axes, drop the most parallel
    u = v0 / np.sqrt(v0 @ g0 @ v0)
    drop = int(np.argmax(np.abs(u @ g0) / np.sqrt(np.diag(g0))))
    cols = []
    for i in range(n):
        if i == drop:
            continue
        w = np.eye(n)[i] - (u @ g0 @ np.eye(n)[i]) * u
        for c in cols:
            w = w - (c @ g0 @ w) * c
        cols.append(w / np.sqrt(w @ g0 @ w))
    E0 = np.array(cols).T
    xs, vs, Es = _transport(metric, x0, v0, E0, nodes)
    K = np.array([E.T @ metric.components(x) @ fd_curvature_operator(metric, x, v) @ E for x, v, E in zip(xs, vs, Es)])
    K = 0.5 * (K + K.transpose(0, 2, 1))
    kind = getattr(condition, "kind", "point-pair")
    m = n - 1
    if kind == "point-pair":
        B0 = B1 = np.zeros((m, m))
        dirichlet = True
    else:
        level = condition.level_set(n)
        mus = []
        for x, v in ((xs[0], vs[0]), (xs[-1], vs[-1])):
            g = metric.components(x)
            dF = level.gradient(x)
            nu = -np.linalg.solve(g, dF)
            nu /= np.sqrt(nu @ g @ nu)
            mus.append(float(v @ g @ nu))
        B0 = mus[0] * _weingarten_form(metric, level, xs[0], Es[0])
        B1 = mus[1] * _weingarten_form(metric, level, xs[-1], Es[-1])
        B0, B1 = 0.5 * (B0 + B0.T), 0.5 * (B1 + B1.T)
        dirichlet = False
    return _assemble(K, B0, B1, dirichlet, N)


def index_form_oracle(metric: MetricField, x0, v0, condition, N: int = 200, zero_tol: float = 1e-3) -> IndexFormResult:
    """Kernel dimension and index of the discretized index form, with
    Richardson extrapolation of the eigenvalues between ``N`` and ``2N``."""
    lo = index_form_spectrum(metric, x0, v0, condition, N)
    hi = index_form_spectrum(metric, x0, v0, condition, 2 * N)
    k = min(lo.size, hi.size, 12)
    lam = (4 * hi[:k] - lo[:k]) / 3
    return IndexFormResult(int(np.sum(np.abs(lam) < zero_tol)), int(np.sum(lam < -zero_tol)), lam)
