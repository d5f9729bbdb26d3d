"""Invariant measure of the frozen fast dynamics and its mixing rate."""

from __future__ import annotations

import csv
import hashlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .engine import simulate_frozen
from .errors import DegenerateFit, Unconverged
from .measure import ParticleCloud, as_samples, wasserstein2
from .model import ModelSpec
from .rng import NoisePlan

__all__ = [
    "InvariantEstimate",
    "estimate_invariant_measure",
    "default_burn_in",
    "clear_invariant_cache",
    "MixingFit",
    "coupling_curve",
    "estimate_mixing_rate",
    "decay_curve",
    "fit_log_linear",
    "check_centering",
    "save_decay_csv",
]

DEFAULT_THRESHOLD = 0.05


@dataclass(frozen=True)
class InvariantEstimate:
    """Terminal frozen cloud used as the estimate of the invariant measure."""

    zeta: ParticleCloud
    burn_in: float
    horizon: float
    convergence_diagnostic: float
    mu_frozen: ParticleCloud
    threshold: float = DEFAULT_THRESHOLD
    converged: bool = True

    @property
    def samples(self) -> np.ndarray:
        return self.zeta.samples

    def mean(self) -> np.ndarray:
        return self.zeta.mean()

    def mean_stderr(self) -> np.ndarray:
        s = self.zeta.samples
        return s.std(axis=0, ddof=1) / math.sqrt(s.shape[0])

    def variance(self) -> np.ndarray:
        return self.zeta.samples.var(axis=0, ddof=1)

    def variance_stderr(self) -> np.ndarray:
        """Delta-method standard error of the per-component sample variance."""
        s = self.zeta.samples
        c = s - s.mean(axis=0)
        m4 = np.mean(c**4, axis=0)
        v = np.mean(c**2, axis=0)
        return np.sqrt(np.maximum(m4 - v**2, 0.0) / s.shape[0])


def default_burn_in(model: ModelSpec) -> float:
    return 10.0 / model.mixing_scale


_CACHE: dict = {}
_CACHE_LOCK = threading.Lock()


def clear_invariant_cache() -> None:
    with _CACHE_LOCK:
        _CACHE.clear()


def _cloud_hash(samples: np.ndarray) -> str:
    a = np.ascontiguousarray(samples, dtype=float)
    return hashlib.sha256(a.tobytes() + str(a.shape).encode()).hexdigest()[:16]


def _diagnostic(half: np.ndarray, full: np.ndarray) -> float:
    """Relative W2 drift between the clouds at H/2 and H, net of sampling noise.

    The sampling floor is the W2 distance between the even and odd halves of
    the terminal cloud.
    """
    drift = float(wasserstein2(half, full))
    floor = float(wasserstein2(full[0::2], full[1::2])) if full.shape[0] >= 4 else 0.0
    rms = math.sqrt(float(np.mean(np.sum(full**2, axis=1))))
    return max(drift - floor, 0.0) / max(rms, 1.0)


def estimate_invariant_measure(model: ModelSpec, mu, N: int, burn_in: Optional[float], plan: NoisePlan, *,
                               threshold: float = DEFAULT_THRESHOLD, max_doublings: int = 4,
                               init: Optional[np.ndarray] = None, strict: bool = True,
                               use_cache: bool = True) -> InvariantEstimate:
    """Run the frozen dynamics from a standard Gaussian cloud past the burn-in.

    The horizon doubles until the convergence diagnostic drops below
    ``threshold``; after ``max_doublings`` failures ``Unconverged`` is raised
    (or, with ``strict=False``, the estimate is returned flagged).
    """
    mu = as_samples(mu)
    if N < 2:
        raise ValueError("N must be at least 2")
    H = default_burn_in(model) if burn_in is None else float(burn_in)
    if H <= 0:
        raise ValueError("burn_in must be positive")
    key = None
    if use_cache and init is None:
        key = (model.fingerprint, _cloud_hash(mu), N, H, plan.master_seed, plan.path, plan.dt,
               threshold, max_doublings)
        with _CACHE_LOCK:
            hit = _CACHE.get(key)
        if hit is not None:
            if not hit.converged and strict:
                raise Unconverged(f"invariant estimate unconverged (diagnostic {hit.convergence_diagnostic:.3g})")
            return hit
    y0 = plan.normals("zeta_init", 0, N, model.d2) if init is None else as_samples(init)
    horizon = H
    for attempt in range(max_doublings + 1):
        traj = simulate_frozen(model, mu, y0, horizon, plan, snapshot_times=[horizon / 2, horizon])
        diag = _diagnostic(traj.Y[0], traj.Y[-1])
        if diag < threshold:
            break
        if attempt < max_doublings:
            horizon *= 2
    est = InvariantEstimate(
        zeta=ParticleCloud(traj.Y[-1]), burn_in=H, horizon=horizon, convergence_diagnostic=diag,
        mu_frozen=ParticleCloud(mu), threshold=threshold, converged=diag < threshold,
    )
    if key is not None:
        with _CACHE_LOCK:
            _CACHE.setdefault(key, est)
    if not est.converged and strict:
        raise Unconverged(f"invariant estimate unconverged after horizon {horizon:.3g} (diagnostic {diag:.3g})")
    return est


class MixingFit(NamedTuple):
    rate: float
    r_squared: float


def fit_log_linear(t, values, min_points: int = 5, floor: float = 0.0) -> tuple:
    """Least-squares fit of ``log(values)`` against ``t`` over points above ``floor``.

    Returns ``(-slope, R^2, mask)``.
    """
    t = np.asarray(t, float)
    v = np.asarray(values, float)
    mask = v > floor
    # keep only the leading run above the floor
    if not mask.all():
        first_bad = int(np.argmin(mask))
        mask[first_bad:] = False
    if mask.sum() < min_points:
        raise DegenerateFit(f"only {int(mask.sum())} usable points (need {min_points})")
    tt, lv = t[mask], np.log(v[mask])
    slope, intercept = np.polyfit(tt, lv, 1)
    resid = lv - (slope * tt + intercept)
    ss_tot = float(np.sum((lv - lv.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return -float(slope), r2, mask


def coupling_curve(model: ModelSpec, mu, nu0_a, nu0_b, T: float, plan: NoisePlan,
                   grid_points: int = 40) -> tuple:
    """W2 between two frozen clouds driven by identical noise, on a time grid."""
    times = np.linspace(0.0, T, grid_points + 1)
    ta = simulate_frozen(model, mu, nu0_a, T, plan, snapshot_times=times)
    tb = simulate_frozen(model, mu, nu0_b, T, plan, snapshot_times=times)
    w2 = np.array([float(wasserstein2(a, b)) for a, b in zip(ta.Y, tb.Y)])
    return ta.times, w2


def estimate_mixing_rate(model: ModelSpec, mu, nu0_a, nu0_b, T: float, plan: NoisePlan, *,
                         grid_points: int = 40, zero_tol: float = 1e-12) -> MixingFit:
    """Exponential contraction rate of the synchronous coupling.

    Raises ``DegenerateFit`` when the distance reaches numerical zero before
    five grid points.
    """
    t, w2 = coupling_curve(model, mu, nu0_a, nu0_b, T, plan, grid_points)
    floor = zero_tol * max(1.0, float(w2[0]))
    rate, r2, _ = fit_log_linear(t, w2, floor=floor)
    return MixingFit(rate, r2)


def decay_curve(model: ModelSpec, mu, nu0, zeta, T: float, plan: NoisePlan, grid_points: int = 40) -> tuple:
    """Law-level curve ``t -> W2(nu_t, zeta)`` for the frozen dynamics from ``nu0``."""
    times = np.linspace(0.0, T, grid_points + 1)
    traj = simulate_frozen(model, mu, nu0, T, plan, snapshot_times=times)
    z = as_samples(zeta.zeta if isinstance(zeta, InvariantEstimate) else zeta)
    return traj.times, np.array([float(wasserstein2(y, z)) for y in traj.Y])


def check_centering(model: ModelSpec, f: Callable, x, mu, zeta: InvariantEstimate) -> tuple:
    """Monte Carlo average of ``f(x, mu, Y, zeta)`` over ``Y ~ zeta`` and its standard error.

    ``f`` follows the ``F`` evaluator signature. Returns per-component
    ``(residual, stderr)`` arrays.
    """
    z = zeta.samples
    mu = as_samples(mu)
    x = np.atleast_2d(np.asarray(x, float))
    xs = np.repeat(x[:1], z.shape[0], axis=0)
    vals = np.asarray(f(xs, mu, z, z), dtype=float).reshape(z.shape[0], -1)
    resid = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(z.shape[0])
    return resid, se


def save_decay_csv(path, t, w2) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "W2", "log_W2"])
        for ti, wi in zip(t, w2):
            w.writerow([repr(float(ti)), repr(float(wi)), repr(math.log(wi)) if wi > 0 else "-inf"])
