"""Euler-Maruyama particle integrators for the slow-fast, frozen, averaged and
limit fluctuation systems.

Measures are always frozen at the start of a step (explicit scheme). The
common noise ``W1`` drives both the slow update and the fast update of a
particle with the same increment, and the averaged system reads the same
``W1`` stream, which is what makes strong errors measurable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GridMismatch, NonFiniteState, NotCLTCompatible, StepSizeTooLarge
from .measure import ParticleCloud, as_samples
from .model import ModelSpec
from .rng import NoisePlan

__all__ = [
    "InitLaw",
    "time_grid",
    "snapshot_steps",
    "MultiscaleEnsemble",
    "step_slow_fast",
    "simulate_slow_fast",
    "SlowFastTrajectory",
    "frozen_step",
    "simulate_frozen",
    "FrozenTrajectory",
    "simulate_averaged",
    "AveragedTrajectory",
    "deviation_process",
    "CLTEnsemble",
    "step_limit_clt",
    "simulate_limit_clt",
    "LimitTrajectory",
]

BLOWUP = 1e8
DEFAULT_H_MAX = 0.1


@dataclass(frozen=True)
class InitLaw:
    """Gaussian initial law ``mean + std * N(0, I)``."""

    mean: float = 0.0
    std: float = 1.0

    def sample(self, plan: NoisePlan, tag: str, n: int, d: int) -> np.ndarray:
        return self.mean + self.std * plan.normals(tag, 0, n, d)


def time_grid(T: float, dt: float) -> tuple:
    """Number of steps and the step actually used so that ``n * dt == T``."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    if T == 0:
        return 0, dt
    n = max(1, math.ceil(T / dt - 1e-9))
    return n, T / n


def snapshot_steps(T: float, n_steps: int, times: Optional[Sequence[float]]) -> np.ndarray:
    if times is None:
        times = np.linspace(0.0, T, min(n_steps, 10) + 1)
    if T == 0:
        return np.zeros(1, dtype=int)
    steps = np.unique(np.clip(np.rint(np.asarray(times, float) / T * n_steps).astype(int), 0, n_steps))
    return steps


def _matvec(M, v):
    return np.einsum("nij,nj->ni", M, v)


def _check_finite(arr, what, t):
    bad = ~np.isfinite(arr) | (np.abs(arr) > BLOWUP)
    if bad.any():
        i = int(np.argmax(bad.any(axis=1)))
        raise NonFiniteState(f"{what} blew up at particle {i}, t={t:.6g}", particle=i, time=t)


# slow-fast system -----------------------------------------------------------


@dataclass
class MultiscaleEnsemble:
    model: ModelSpec
    epsilon: float
    X: np.ndarray
    Y: np.ndarray
    plan: NoisePlan
    t: float = 0.0
    step: int = 0
    h_max: float = DEFAULT_H_MAX

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("X and Y must have the same particle count")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    def clouds(self) -> tuple:
        return ParticleCloud(self.X), ParticleCloud(self.Y)


def step_slow_fast(ens: MultiscaleEnsemble, trace: Optional[list] = None) -> MultiscaleEnsemble:
    """One Euler-Maruyama step of the coupled particle system."""
    m, eps, plan = ens.model, ens.epsilon, ens.plan
    dt = plan.dt
    if dt > eps**2 * ens.h_max * (1 + 1e-12):
        raise StepSizeTooLarge(f"dt={dt:.3g} exceeds eps^2*h_max={eps**2 * ens.h_max:.3g}")
    X, Y = ens.X, ens.Y
    n = X.shape[0]
    dW1 = plan.increments("W1", ens.step, n, m.d1)
    dW2 = plan.increments("W2", ens.step, n, m.d2)
    if trace is not None:
        trace.append({"step": ens.step, "dW1": dW1, "dW2": dW2})
    Xn = X + m.F(X, X, Y, Y) * dt + _matvec(m.G(X, X, Y), dW1)
    fast_drift = m.c(X, X, Y, Y) / eps + m.b(X, Y, Y) / eps**2
    fast_noise = _matvec(m.sigma1(X, Y, Y), dW1) + _matvec(m.sigma2(X, Y, Y), dW2)
    Yn = Y + fast_drift * dt + fast_noise / eps
    t = ens.t + dt
    _check_finite(Xn, "X", t)
    _check_finite(Yn, "Y", t)
    return replace(ens, X=Xn, Y=Yn, t=t, step=ens.step + 1)


@dataclass
class SlowFastTrajectory:
    times: np.ndarray
    X: np.ndarray  # (S, N, d1)
    Y: np.ndarray  # (S, N, d2)
    m4_X: np.ndarray
    m4_Y: np.ndarray
    epsilon: float
    dt: float


def _m4(a):
    return float(np.mean(np.sum(a**2, axis=1) ** 2))


def simulate_slow_fast(model: ModelSpec, epsilon: float, N: int, T: float, plan: NoisePlan, *,
                       h: Optional[float] = None, snapshot_times=None, init_x: InitLaw = InitLaw(),
                       init_y: InitLaw = InitLaw(), h_max: float = DEFAULT_H_MAX,
                       observer: Optional[Callable] = None) -> SlowFastTrajectory:
    """Integrate the slow-fast particle system on ``[0, T]``.

    With ``h`` given the micro step is ``h * epsilon**2`` (rounded down so it
    divides ``T``); otherwise ``plan.dt`` is used. ``observer(step, t, X, Y,
    dt)`` is called before every step and once at the end.
    """
    dt_target = h * epsilon**2 if h is not None else plan.dt
    n_steps, dt = time_grid(T, dt_target)
    plan = plan.with_dt(dt)
    X0 = init_x.sample(plan, "init_X", N, model.d1)
    Y0 = init_y.sample(plan, "init_Y", N, model.d2)
    ens = MultiscaleEnsemble(model, epsilon, X0, Y0, plan, h_max=max(h_max, h or 0.0))
    snaps = set(snapshot_steps(T, n_steps, snapshot_times).tolist())
    times, xs, ys, m4x, m4y = [], [], [], [], []

    def record(e):
        times.append(e.step * dt)
        xs.append(e.X)
        ys.append(e.Y)
        m4x.append(_m4(e.X))
        m4y.append(_m4(e.Y))

    for k in range(n_steps):
        if k in snaps:
            record(ens)
        if observer is not None:
            observer(k, k * dt, ens.X, ens.Y, dt)
        ens = step_slow_fast(ens)
    if observer is not None:
        observer(n_steps, n_steps * dt, ens.X, ens.Y, dt)
    if n_steps in snaps:
        record(ens)
    return SlowFastTrajectory(np.array(times), np.array(xs), np.array(ys), np.array(m4x),
                              np.array(m4y), epsilon, dt)


# frozen fast system ----------------------------------------------------------


def frozen_step(model: ModelSpec, mu: np.ndarray, Y: np.ndarray, plan: NoisePlan, step: int,
                tags=("W1hat", "W2hat")) -> np.ndarray:
    n = Y.shape[0]
    dW1 = plan.increments(tags[0], step, n, model.d1)
    dW2 = plan.increments(tags[1], step, n, model.d2)
    return (Y + model.b(mu, Y, Y) * plan.dt
            + _matvec(model.sigma1(mu, Y, Y), dW1) + _matvec(model.sigma2(mu, Y, Y), dW2))


@dataclass
class FrozenTrajectory:
    times: np.ndarray
    Y: np.ndarray  # (S, N, d2)
    mu: np.ndarray
    dt: float

    def cloud(self, k: int = -1) -> ParticleCloud:
        return ParticleCloud(self.Y[k])


def simulate_frozen(model: ModelSpec, mu, nu0, T: float, plan: NoisePlan, *, snapshot_times=None,
                    tags=("W1hat", "W2hat"), start_step: int = 0) -> FrozenTrajectory:
    """Frozen fast McKean-Vlasov dynamics with ``mu`` held fixed.

    Uses its own noise tags, independent of the slow-fast ``W1``/``W2``. Two
    calls with the same plan share increments (synchronous coupling).
    """
    if T <= 0:
        raise ValueError("T must be positive")
    mu = as_samples(mu)
    Y = as_samples(nu0).copy()
    n_steps, dt = time_grid(T, plan.dt)
    plan = plan.with_dt(dt)
    snaps = set(snapshot_steps(T, n_steps, snapshot_times).tolist())
    times, ys = [], []
    for k in range(n_steps + 1):
        if k in snaps:
            times.append(k * dt)
            ys.append(Y)
        if k == n_steps:
            break
        Y = frozen_step(model, mu, Y, plan, start_step + k, tags)
        _check_finite(Y, "frozen Y", (k + 1) * dt)
    return FrozenTrajectory(np.array(times), np.array(ys), mu, dt)


# averaged system ---------------------------------------------------------------


@dataclass
class AveragedTrajectory:
    times: np.ndarray
    X: np.ndarray  # (S, N, d1)
    dt: float


def simulate_averaged(model: ModelSpec, avg, N: int, T: float, plan: NoisePlan, *, snapshot_times=None,
                      init_x: InitLaw = InitLaw(), store_all: bool = False) -> AveragedTrajectory:
    """Averaged McKean-Vlasov equation driven by the plan's ``W1`` stream.

    ``avg`` needs ``F_bar(x, mu)`` and ``G_bar(x, mu)``. With the same plan
    as a slow-fast run the initial condition and every ``W1`` increment are
    shared.
    """
    n_steps, dt = time_grid(T, plan.dt)
    plan = plan.with_dt(dt)
    X = init_x.sample(plan, "init_X", N, model.d1)
    snaps = set(range(n_steps + 1)) if store_all else set(snapshot_steps(T, n_steps, snapshot_times).tolist())
    times, xs = [], []
    for k in range(n_steps + 1):
        if k in snaps:
            times.append(k * dt)
            xs.append(X)
        if k == n_steps:
            break
        dW1 = plan.increments("W1", k, N, model.d1)
        X = X + avg.F_bar(X, X) * dt + _matvec(avg.G_bar(X, X), dW1)
        _check_finite(X, "Xbar", (k + 1) * dt)
    return AveragedTrajectory(np.array(times), np.array(xs), dt)


@dataclass
class DeviationTrajectory:
    times: np.ndarray
    Z: np.ndarray  # (S, N, d1)


def deviation_process(slow_fast: SlowFastTrajectory, averaged: AveragedTrajectory,
                      epsilon: float) -> DeviationTrajectory:
    """``Z = (X^eps - Xbar) / eps`` per particle and snapshot."""
    if slow_fast.X.shape != averaged.X.shape:
        raise GridMismatch(f"shape mismatch {slow_fast.X.shape} vs {averaged.X.shape}")
    if not np.allclose(slow_fast.times, averaged.times, rtol=0, atol=1e-12):
        raise GridMismatch("snapshot times differ")
    return DeviationTrajectory(slow_fast.times.copy(), (slow_fast.X - averaged.X) / epsilon)


# limit fluctuation system ---------------------------------------------------------


@dataclass
class CLTEnsemble:
    Xbar: np.ndarray
    Z: np.ndarray
    plan: NoisePlan
    t: float = 0.0
    step: int = 0

    def __post_init__(self):
        if self.Xbar.shape != self.Z.shape:
            raise ValueError("Xbar and Z must have the same shape")


def step_limit_clt(ens: CLTEnsemble, model: ModelSpec, avg, coeffs, terms=None) -> CLTEnsemble:
    """One Euler-Maruyama step of the averaged path together with the limit
    fluctuation equation.

    ``avg`` supplies the averaged coefficients and their derivatives
    (``F_bar``, ``G_bar``, ``dx_F_bar``, ``dmu_F_bar_apply``, ``dx_G_bar``,
    ``dmu_G_bar_apply``); ``coeffs.evaluate(xbar, mu)`` supplies the
    corrector-based terms. ``terms`` may carry precomputed corrector terms
    (used for snapshot interpolation). Independent-copy expectations are
    full-cloud averages.
    """
    if not model.clt_compatible:
        raise NotCLTCompatible("the limit equation needs G free of the fast law")
    Xb, Z, plan = ens.Xbar, ens.Z, ens.plan
    n, d1 = Xb.shape
    dt = plan.dt
    if terms is None:
        terms = coeffs.evaluate(Xb, Xb)
    dW1 = plan.increments("W1", ens.step, n, d1)
    dWt = plan.increments("Wtilde", ens.step, n, d1)
    G = avg.G_bar(Xb, Xb)
    drift = (_matvec(avg.dx_F_bar(Xb, Xb), Z) + avg.dmu_F_bar_apply(Xb, Xb, Z) + terms.const_drift(G))
    diff1 = (np.einsum("nilk,nk->nil", avg.dx_G_bar(Xb, Xb), Z) + avg.dmu_G_bar_apply(Xb, Xb, Z)
             + terms.dyPhi_sigma1)
    Zn = Z + drift * dt + _matvec(diff1, dW1) + _matvec(terms.sqrt_sigma, dWt)
    Xn = Xb + avg.F_bar(Xb, Xb) * dt + _matvec(G, dW1)
    t = ens.t + dt
    _check_finite(Zn, "Zbar", t)
    _check_finite(Xn, "Xbar", t)
    return replace(ens, Xbar=Xn, Z=Zn, t=t, step=ens.step + 1)


@dataclass
class LimitTrajectory:
    times: np.ndarray
    Xbar: np.ndarray
    Z: np.ndarray
    dt: float


def simulate_limit_clt(model: ModelSpec, avg, coeffs, N: int, T: float, plan: NoisePlan, *,
                       snapshot_times=None, init_x: InitLaw = InitLaw(),
                       refresh_every: int = 1) -> LimitTrajectory:
    """Simulate ``(Xbar, Zbar)`` with ``Zbar_0 = 0``.

    With ``refresh_every > 1`` the corrector terms are evaluated only every
    ``refresh_every`` steps along the averaged path and linearly
    interpolated in between.
    """
    if not model.clt_compatible:
        raise NotCLTCompatible("the limit equation needs G free of the fast law")
    n_steps, dt = time_grid(T, plan.dt)
    plan = plan.with_dt(dt)
    X0 = init_x.sample(plan, "init_X", N, model.d1)
    ens = CLTEnsemble(X0, np.zeros_like(X0), plan)
    interp = None
    if refresh_every > 1 and n_steps > 0:
        path = simulate_averaged(model, avg, N, T, plan, init_x=init_x, store_all=True).X
        knots = sorted(set(range(0, n_steps + 1, refresh_every)) | {n_steps})
        interp = (knots, [coeffs.evaluate(path[k], path[k]) for k in knots])
    snaps = set(snapshot_steps(T, n_steps, snapshot_times).tolist())
    times, xs, zs = [], [], []
    for k in range(n_steps + 1):
        if k in snaps:
            times.append(k * dt)
            xs.append(ens.Xbar)
            zs.append(ens.Z)
        if k == n_steps:
            break
        terms = None
        if interp is not None:
            knots, vals = interp
            j = int(np.searchsorted(knots, k, side="right")) - 1
            j = min(j, len(knots) - 2)
            w = (k - knots[j]) / (knots[j + 1] - knots[j])
            terms = vals[j].interpolate(vals[j + 1], w)
        ens = step_limit_clt(ens, model, avg, coeffs, terms)
    return LimitTrajectory(np.array(times), np.array(xs), np.array(zs), dt)
