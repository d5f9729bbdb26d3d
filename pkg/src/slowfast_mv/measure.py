"""Empirical measures, Wasserstein-2 distances and Lions derivatives."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionMismatch, IndexOutOfRange, MeasureError, SizeCapExceeded

__all__ = [
    "ParticleCloud",
    "W2Value",
    "as_samples",
    "wasserstein2",
    "empirical_mean",
    "CylinderFunctional",
    "mean_functional",
    "half_second_moment",
    "sin_of_mean",
    "lions_derivative_cylinder",
    "lions_derivative_fd",
    "save_cloud_csv",
    "load_cloud_csv",
]

EXACT_SIZE_CAP = 4096
DEFAULT_PROJECTIONS = 64


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """Equal-weight empirical measure on R^dim."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise MeasureError(f"samples must be a non-empty (N, dim) array, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise MeasureError("cloud contains non-finite entries")
        object.__setattr__(self, "samples", s)

    @property
    def N(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def second_moment(self) -> float:
        return float(np.mean(np.sum(self.samples**2, axis=1)))

    def shifted(self, index: int, delta: np.ndarray) -> "ParticleCloud":
        s = self.samples.copy()
        s[index] += delta
        return ParticleCloud(s)


def as_samples(obj) -> np.ndarray:
    """Sample array ``(N, dim)`` from a cloud or array-like."""
    if isinstance(obj, ParticleCloud):
        return obj.samples
    s = np.asarray(obj, dtype=float)
    return s[:, None] if s.ndim == 1 else s


class W2Value(float):
    """A W2 distance that remembers how it was computed."""

    exact: bool
    method: str

    def __new__(cls, value, exact=True, method="sorted"):
        obj = super().__new__(cls, value)
        obj.exact = exact
        obj.method = method
        return obj

    def __repr__(self):
        return f"W2Value({float(self)!r}, exact={self.exact}, method={self.method!r})"


def _w2_1d(a: np.ndarray, b: np.ndarray) -> float:
    a = np.sort(a)
    b = np.sort(b)
    if a.size == b.size:
        return math.sqrt(float(np.mean((a - b) ** 2)))
    # quantile coupling on the merged grid of CDF jumps
    qa = np.arange(1, a.size + 1) / a.size
    qb = np.arange(1, b.size + 1) / b.size
    grid = np.union1d(qa, qb)
    widths = np.diff(np.concatenate(([0.0], grid)))
    ia = np.minimum(np.searchsorted(qa, grid - 1e-15), a.size - 1)
    ib = np.minimum(np.searchsorted(qb, grid - 1e-15), b.size - 1)
    return math.sqrt(float(np.sum(widths * (a[ia] - b[ib]) ** 2)))


def _w2_assignment(a: np.ndarray, b: np.ndarray) -> float:
    n, m = a.shape[0], b.shape[0]
    if n != m:
        L = n * m // math.gcd(n, m)
        a = np.repeat(a, L // n, axis=0)
        b = np.repeat(b, L // m, axis=0)
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return math.sqrt(float(cost[rows, cols].mean()))


def _assignment_size(n: int, m: int) -> int:
    if n == m:
        return n * m
    L = n * m // math.gcd(n, m)
    return L * L


def wasserstein2(a, b, *, mode: str = "auto", projections: int = DEFAULT_PROJECTIONS,
                 rng: Optional[np.random.Generator] = None, size_cap: int = EXACT_SIZE_CAP) -> W2Value:
    """Wasserstein-2 distance between two equal-weight clouds.

    In one dimension the quantile coupling is exact for any sizes. In higher
    dimension an optimal assignment is used while the cost matrix (after
    least-common-multiple replication for unequal sizes) stays within
    ``size_cap`` entries; otherwise the sliced estimate with ``projections``
    random directions is returned with ``exact=False``. ``mode="exact"``
    forbids the fallback, ``mode="sliced"`` forces it.
    """
    a, b = as_samples(a), as_samples(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if mode not in ("auto", "exact", "sliced"):
        raise ValueError(f"unknown mode {mode!r}")
    dim = a.shape[1]
    if dim == 1 and mode != "sliced":
        return W2Value(_w2_1d(a[:, 0], b[:, 0]), True, "sorted")
    if mode != "sliced":
        if _assignment_size(a.shape[0], b.shape[0]) <= size_cap:
            return W2Value(_w2_assignment(a, b), True, "assignment")
        if mode == "exact":
            raise SizeCapExceeded(
                f"exact W2 needs {_assignment_size(a.shape[0], b.shape[0])} cost entries > cap {size_cap}")
    rng = rng if rng is not None else np.random.default_rng(0)
    dirs = rng.standard_normal((projections, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa, pb = a @ dirs.T, b @ dirs.T
    sq = [_w2_1d(pa[:, k], pb[:, k]) ** 2 for k in range(projections)]
    return W2Value(math.sqrt(float(np.mean(sq))), False, "sliced")


def empirical_mean(cloud) -> np.ndarray:
    return as_samples(cloud).mean(axis=0)


@dataclass(frozen=True)
class CylinderFunctional:
    """``u(mu) = g(integral of h d mu)`` with analytic derivatives.

    ``inner(x)`` maps ``(n, d) -> (n, k)`` and ``inner_grad(x)`` returns the
    Jacobians ``(n, k, d)``. ``outer``, ``outer_grad`` and ``outer_hess`` act on
    a single ``(k,)`` vector. ``inner_hess(x)``, if given, returns
    ``(n, k, d, d)`` and enables the second-order Lions derivative in the
    particle variable.
    """

    inner: Callable
    inner_grad: Callable
    outer: Callable
    outer_grad: Callable
    outer_hess: Callable
    inner_hess: Optional[Callable] = None

    def moments(self, samples) -> np.ndarray:
        return self.inner(as_samples(samples)).mean(axis=0)

    def value(self, samples) -> float:
        return float(self.outer(self.moments(samples)))

    def lions(self, samples, at=None) -> np.ndarray:
        """``d_mu u(mu)(x)`` at every particle (or at the points ``at``)."""
        s = as_samples(samples)
        pts = s if at is None else as_samples(at)
        gg = np.asarray(self.outer_grad(self.moments(s)))
        return np.einsum("k,nkd->nd", gg, self.inner_grad(pts))

    def lions_grad(self, samples, at=None) -> np.ndarray:
        """``d_x d_mu u(mu)(x)``, shape ``(n, d, d)``."""
        if self.inner_hess is None:
            raise MeasureError("inner_hess not provided")
        s = as_samples(samples)
        pts = s if at is None else as_samples(at)
        gg = np.asarray(self.outer_grad(self.moments(s)))
        return np.einsum("k,nkde->nde", gg, self.inner_hess(pts))

    def check_derivatives(self, dim: int, probes: int = 10, rng_seed: int = 0, step: float = 1e-5) -> float:
        """Worst relative error of the analytic gradients against central differences."""
        rng = np.random.default_rng(rng_seed)
        worst = 0.0
        for _ in range(probes):
            x = rng.standard_normal((1, dim))
            jac = self.inner_grad(x)[0]
            for i in range(dim):
                e = np.zeros((1, dim))
                e[0, i] = step
                fd = (self.inner(x + e)[0] - self.inner(x - e)[0]) / (2 * step)
                worst = max(worst, _relerr(jac[:, i], fd))
            m = self.inner(x)[0]
            gg = np.asarray(self.outer_grad(m))
            for j in range(m.size):
                e = np.zeros_like(m)
                e[j] = step
                fd = (self.outer(m + e) - self.outer(m - e)) / (2 * step)
                worst = max(worst, _relerr(gg[j], fd))
        return worst


def _relerr(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def mean_functional(dim: int = 1, component: int = 0) -> CylinderFunctional:
    """``u(mu) = m(mu)_component``."""

    def inner_grad(x):
        g = np.zeros((x.shape[0], 1, dim))
        g[:, 0, component] = 1.0
        return g

    return CylinderFunctional(
        inner=lambda x: x[:, component:component + 1],
        inner_grad=inner_grad,
        outer=lambda m: m[0],
        outer_grad=lambda m: np.array([1.0]),
        outer_hess=lambda m: np.zeros((1, 1)),
        inner_hess=lambda x: np.zeros((x.shape[0], 1, dim, dim)),
    )


def half_second_moment(dim: int = 1) -> CylinderFunctional:
    """``u(mu) = 1/2 int |x|^2 mu(dx)``."""
    return CylinderFunctional(
        inner=lambda x: 0.5 * np.sum(x**2, axis=1, keepdims=True),
        inner_grad=lambda x: x[:, None, :],
        outer=lambda m: m[0],
        outer_grad=lambda m: np.array([1.0]),
        outer_hess=lambda m: np.zeros((1, 1)),
        inner_hess=lambda x: np.broadcast_to(np.eye(dim), (x.shape[0], 1, dim, dim)).copy(),
    )


def sin_of_mean(dim: int = 1, component: int = 0) -> CylinderFunctional:
    """``u(mu) = sin(m(mu)_component)``."""
    base = mean_functional(dim, component)
    return CylinderFunctional(
        inner=base.inner,
        inner_grad=base.inner_grad,
        outer=lambda m: math.sin(m[0]),
        outer_grad=lambda m: np.array([math.cos(m[0])]),
        outer_hess=lambda m: np.array([[-math.sin(m[0])]]),
        inner_hess=base.inner_hess,
    )


def lions_derivative_cylinder(u: CylinderFunctional, cloud, at: int) -> np.ndarray:
    """``d_mu u(mu^N)(x_at)`` by the cylinder chain rule."""
    s = as_samples(cloud)
    if not 0 <= at < s.shape[0]:
        raise IndexOutOfRange(f"particle index {at} out of range for N={s.shape[0]}")
    return u.lions(s, at=s[at:at + 1])[0]


def lions_derivative_fd(fun: Callable, cloud, at: int, delta: float = 1e-5) -> np.ndarray:
    """Finite-difference Lions derivative of any functional of the samples.

    Uses the empirical projection identity: moving particle ``at`` by
    ``delta e_i`` changes ``u`` by about ``delta / N`` times the Lions
    derivative, so the probe is ``N (u(shifted) - u) / delta``.
    """
    s = as_samples(cloud)
    n, dim = s.shape
    if not 0 <= at < n:
        raise IndexOutOfRange(f"particle index {at} out of range for N={n}")
    base = fun(s)
    out = np.empty(dim)
    for i in range(dim):
        t = s.copy()
        t[at, i] += delta
        out[i] = n * (fun(t) - base) / delta
    return out


def save_cloud_csv(path, cloud) -> None:
    s = as_samples(cloud)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{i}" for i in range(s.shape[1])])
        for row in s:
            w.writerow([repr(float(v)) for v in row])


def load_cloud_csv(path) -> ParticleCloud:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MeasureError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if header != [f"x_{i}" for i in range(len(header))]:
        raise MeasureError(f"{path}: header must be x_0..x_(dim-1), got {header}")
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=float)
    except ValueError as exc:
        raise MeasureError(f"{path}: {exc}") from exc
    return ParticleCloud(data.reshape(len(body), len(header)))
