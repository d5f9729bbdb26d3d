"""Poisson-equation corrector, averaged coefficients and the limit coefficients
of the fluctuation equation.

The corrector is estimated by its Feynman-Kac representation
``Phi = E int_0^inf dF(x, mu, Y_t^{y,nu}, Law(Y_t^eta)) dt``. Every
derivative is a finite difference of that estimator under common random
numbers: all start points, all perturbed measures and all query points share
the same path and auxiliary-cloud noise, so differences carry only the noise
that genuinely depends on the perturbation.

Each estimate carries a standard error combining the path-to-path Monte Carlo
error with a systematic allowance of 30% of the extrapolated truncation tail.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (NegativeBeyondTolerance, NonPSDSigma, NotCLTCompatible, NotSymmetric,
                     StepTooSmall, TailNotConverged)
from .ergodic import InvariantEstimate, estimate_invariant_measure
from .measure import as_samples
from .model import LinearBenchmark, ModelSpec
from .rng import NoisePlan

__all__ = [
    "TAIL_SYS_FACTOR",
    "NUMERIC_FLOOR",
    "Estimate",
    "BenchmarkAveraged",
    "benchmark_averaged",
    "MonteCarloAveraged",
    "averaged_coefficients",
    "FKResult",
    "FeynmanKacCorrector",
    "BenchmarkCorrector",
    "solve_poisson_feynman_kac",
    "CorrectorDerivatives",
    "corrector_derivatives",
    "poisson_residual",
    "sqrt_psd",
    "LimitCoefficients",
    "assemble_limit_coefficients",
    "LimitTerms",
    "BenchmarkLimitProvider",
    "ConstantLimitProvider",
    "MonteCarloLimitProvider",
    "save_limit_coefficients_csv",
]

TAIL_SYS_FACTOR = 0.3
NUMERIC_FLOOR = 1e-8
DELTA = 1e-3
DELTA2 = 3e-2


@dataclass(frozen=True)
class Estimate:
    """Point estimate with its combined standard error.

    ``stderr**2 = mc_stderr**2 + (0.3 * tail)**2`` where ``tail`` is the
    extrapolated contribution beyond the truncation horizon.
    """

    value: np.ndarray
    stderr: np.ndarray
    mc_stderr: np.ndarray
    tail: np.ndarray

    def within(self, target, k: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.value - target) <= k * self.stderr + NUMERIC_FLOOR))

    def zscore(self, target) -> float:
        dev = np.abs(self.value - target)
        return float(np.max(dev / np.maximum(self.stderr, NUMERIC_FLOOR)))


def _combine(mc_se, tail):
    return np.sqrt(np.asarray(mc_se) ** 2 + (TAIL_SYS_FACTOR * np.asarray(tail)) ** 2)


def _estimate(full: np.ndarray, trunc: np.ndarray, axis: int) -> Estimate:
    """Estimate from per-path samples along ``axis`` (with and without tail)."""
    m = full.shape[axis]
    value = full.mean(axis=axis)
    mc = full.std(axis=axis, ddof=1) / math.sqrt(m) if m > 1 else np.zeros_like(value)
    tail = value - trunc.mean(axis=axis)
    return Estimate(value, _combine(mc, tail), mc, tail)


# averaged coefficients ---------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkAveraged:
    """Closed-form averaged coefficients of the linear benchmark."""

    bench: LinearBenchmark

    def m_star(self, mu) -> float:
        return self.bench.m_star(float(as_samples(mu).mean()))

    def F_bar(self, x, mu):
        return self.bench.A * x + self.bench.averaged_mean_rate * float(as_samples(mu).mean())

    def G_bar(self, x, mu):
        return (self.bench.g0 + self.bench.g1 * x)[:, :, None]

    def dx_F_bar(self, x, mu):
        return np.full((x.shape[0], 1, 1), self.bench.A)

    def dmu_F_bar_apply(self, x, mu, v):
        return np.full((x.shape[0], 1), self.bench.averaged_mean_rate * float(np.mean(v)))

    def dx_G_bar(self, x, mu):
        return np.full((x.shape[0], 1, 1, 1), self.bench.g1)

    def dmu_G_bar_apply(self, x, mu, v):
        return np.zeros((x.shape[0], 1, 1))


def benchmark_averaged(bench: LinearBenchmark) -> BenchmarkAveraged:
    return BenchmarkAveraged(bench)


class MonteCarloAveraged:
    """Averaged coefficients from an estimated invariant measure.

    ``zeta(mu)`` is solved on demand (and cached by the ergodic module).
    ``F_bar`` averages ``F`` over at most ``inner`` invariant samples.
    The measure derivatives are directional:
    ``dmu_F_bar_apply(x, mu, v) = sum_j (1/N) d_mu Fbar(x, mu)(mu_j) v_j``,
    obtained by re-solving the invariant measure for ``mu +- delta v`` under
    the same noise.
    """

    def __init__(self, model: ModelSpec, plan: NoisePlan, *, N_zeta: int = 512, burn_in: Optional[float] = None,
                 inner: int = 256, delta: float = DELTA, preset: Optional[tuple] = None):
        self.model = model
        self.plan = plan
        self.N_zeta = N_zeta
        self.burn_in = burn_in
        self.inner = inner
        self.delta = delta
        self._preset = preset

    def zeta(self, mu) -> InvariantEstimate:
        mu = as_samples(mu)
        if self._preset is not None and np.array_equal(self._preset[0], mu):
            return self._preset[1]
        return estimate_invariant_measure(self.model, mu, self.N_zeta, self.burn_in, self.plan)

    def F_bar(self, x, mu):
        mu = as_samples(mu)
        z = self.zeta(mu).samples
        zi = z[: self.inner]
        n, k = x.shape[0], zi.shape[0]
        vals = self.model.F(np.repeat(x, k, axis=0), mu, np.tile(zi, (n, 1)), z)
        return vals.reshape(n, k, -1).mean(axis=1)

    def G_bar(self, x, mu):
        mu = as_samples(mu)
        return self.model.G(x, mu, self.zeta(mu).samples)

    def dx_F_bar(self, x, mu):
        d1 = x.shape[1]
        out = np.empty((x.shape[0], d1, d1))
        for k in range(d1):
            e = np.zeros(d1)
            e[k] = self.delta
            out[:, :, k] = (self.F_bar(x + e, mu) - self.F_bar(x - e, mu)) / (2 * self.delta)
        return out

    def dmu_F_bar_apply(self, x, mu, v):
        mu = as_samples(mu)
        d = self.delta
        return (self.F_bar(x, mu + d * v) - self.F_bar(x, mu - d * v)) / (2 * d)

    def dx_G_bar(self, x, mu):
        d1 = x.shape[1]
        out = np.empty((x.shape[0], d1, d1, d1))
        for k in range(d1):
            e = np.zeros(d1)
            e[k] = self.delta
            out[..., k] = (self.G_bar(x + e, mu) - self.G_bar(x - e, mu)) / (2 * self.delta)
        return out

    def dmu_G_bar_apply(self, x, mu, v):
        mu = as_samples(mu)
        d = self.delta
        return (self.G_bar(x, mu + d * v) - self.G_bar(x, mu - d * v)) / (2 * d)


def averaged_coefficients(model: ModelSpec, mu, zeta: InvariantEstimate, plan: Optional[NoisePlan] = None,
                          **kwargs) -> MonteCarloAveraged:
    """Averaged coefficients with ``zeta`` pinned as the invariant measure at ``mu``."""
    plan = plan if plan is not None else NoisePlan(0, 0.01)
    return MonteCarloAveraged(model, plan, N_zeta=zeta.zeta.N, burn_in=zeta.burn_in,
                              preset=(as_samples(mu).copy(), zeta), **kwargs)


# Feynman-Kac corrector ---------------------------------------------------------


@dataclass
class FKResult:
    """Per-path time integrals of ``dF``, shape ``(nx, S, M, d1)``.

    ``trunc`` is the left-point sum up to the horizon, ``tail`` the
    extrapolated remainder beyond it, and ``late`` the part of ``trunc``
    accumulated over the second half of the horizon.
    """

    trunc: np.ndarray
    tail: np.ndarray
    late: np.ndarray

    @property
    def full(self) -> np.ndarray:
        return self.trunc + self.tail


class FeynmanKacCorrector:
    """Monte Carlo corrector field ``Phi(x, mu, y, nu)``.

    ``horizon`` defaults to ``12 / (c2 - c1)``. Paths are Euler steps of the
    frozen dynamics against one auxiliary cloud started at ``nu``; the
    auxiliary increments are centred and rescaled each step so the cloud's
    mean feels no sampling drift. The tail beyond the horizon is
    extrapolated as ``dF(T) / lam`` with ``lam = (c2 - c1) / 2``.
    """

    def __init__(self, model: ModelSpec, avg, plan: NoisePlan, *, horizon: Optional[float] = None, M: int = 2000,
                 dt: float = 0.02, tail_rtol: float = 0.1, strict_tail: bool = True):
        if M < 2:
            raise ValueError("M must be at least 2")
        self.model = model
        self.avg = avg
        self.plan = plan
        self.horizon = 12.0 / model.mixing_scale if horizon is None else float(horizon)
        self.M = M
        self.steps = max(2, math.ceil(self.horizon / dt - 1e-9))
        self.dt = self.horizon / self.steps
        self.lam = model.mixing_scale / 2
        self.tail_rtol = tail_rtol
        self.strict_tail = strict_tail
        self.tail_flagged = False

    def delta_F(self, x, mu, y, nu):
        """``F(x, mu, y, nu) - Fbar(x, mu)`` row by row."""
        mu = as_samples(mu)
        fbar = self.avg.F_bar(x, mu)
        return self.model.F(x, mu, y, nu) - fbar

    def integrate(self, x, mu, starts, nu) -> FKResult:
        m = self.model
        mu, nu = as_samples(mu), as_samples(nu)
        x = np.atleast_2d(np.asarray(x, float))
        starts = np.atleast_2d(np.asarray(starts, float))
        nx, S, M = x.shape[0], starts.shape[0], self.M
        plan = self.plan.with_dt(self.dt)
        fbar = self.avg.F_bar(x, mu)
        xr = np.repeat(x, S * M, axis=0)
        fbar_r = np.repeat(fbar, S * M, axis=0)
        Y = np.repeat(starts, M, axis=0)
        aux = nu.copy()
        na = aux.shape[0]
        rescale = math.sqrt(na / (na - 1)) if na > 1 else 1.0
        acc = np.zeros((nx * S * M, m.d1))
        mid = self.steps // 2
        acc_mid = None

        def integrand(Y, aux):
            return m.F(xr, mu, np.tile(Y, (nx, 1)), aux) - fbar_r

        for k in range(self.steps):
            if k == mid:
                acc_mid = acc.copy()
            acc += integrand(Y, aux) * self.dt
            w1 = plan.increments("fk_W1", k, M, m.d1)
            w2 = plan.increments("fk_W2", k, M, m.d2)
            a1 = plan.increments("fk_aux_W1", k, na, m.d1)
            a2 = plan.increments("fk_aux_W2", k, na, m.d2)
            if na > 1:
                a1 = (a1 - a1.mean(axis=0)) * rescale
                a2 = (a2 - a2.mean(axis=0)) * rescale
            dW1, dW2 = np.tile(w1, (S, 1)), np.tile(w2, (S, 1))
            Y_new = (Y + m.b(mu, Y, aux) * self.dt + np.einsum("nij,nj->ni", m.sigma1(mu, Y, aux), dW1)
                     + np.einsum("nij,nj->ni", m.sigma2(mu, Y, aux), dW2))
            aux = (aux + m.b(mu, aux, aux) * self.dt + np.einsum("nij,nj->ni", m.sigma1(mu, aux, aux), a1)
                   + np.einsum("nij,nj->ni", m.sigma2(mu, aux, aux), a2))
            Y = Y_new
        tail = integrand(Y, aux) / self.lam
        shape = (nx, S, M, m.d1)
        return FKResult(acc.reshape(shape), tail.reshape(shape), (acc - acc_mid).reshape(shape))

    def check_tail(self, res: FKResult) -> bool:
        """True when the late-window contribution is small relative to ``Phi``."""
        phi = np.abs(res.full.mean(axis=2))
        late = res.late.mean(axis=2)
        late_se = res.late.std(axis=2, ddof=1) / math.sqrt(res.late.shape[2])
        ok = bool(np.all(np.abs(late) <= self.tail_rtol * phi + 3 * late_se + NUMERIC_FLOOR))
        if not ok:
            self.tail_flagged = True
            if self.strict_tail:
                raise TailNotConverged(
                    f"late-window contribution {float(np.max(np.abs(late))):.3g} exceeds tolerance; "
                    "increase the horizon")
        return ok

    def phi(self, x, mu, y, nu) -> Estimate:
        res = self.integrate(x, mu, np.atleast_2d(y), nu)
        self.check_tail(res)
        return _estimate(res.full[0, 0], res.trunc[0, 0], axis=0)


class BenchmarkCorrector:
    """Closed-form ``Phi = p (y - m*) + q (m(nu) - m*)`` with the Feynman-Kac interface."""

    M = 1

    def __init__(self, bench: LinearBenchmark):
        self.bench = bench
        self.model = bench.model
        self.avg = BenchmarkAveraged(bench)
        self.p, self.q = bench.pq
        self.tail_flagged = False

    def delta_F(self, x, mu, y, nu):
        return self.model.F(x, as_samples(mu), y, as_samples(nu)) - self.avg.F_bar(x, mu)

    def integrate(self, x, mu, starts, nu) -> FKResult:
        x = np.atleast_2d(np.asarray(x, float))
        starts = np.atleast_2d(np.asarray(starts, float))
        ms = self.avg.m_star(mu)
        vals = self.p * (starts[:, 0] - ms) + self.q * (float(as_samples(nu).mean()) - ms)
        trunc = np.broadcast_to(vals[None, :, None, None], (x.shape[0], starts.shape[0], 1, 1)).copy()
        return FKResult(trunc, np.zeros_like(trunc), np.zeros_like(trunc))

    def check_tail(self, res) -> bool:
        return True

    def phi(self, x, mu, y, nu) -> Estimate:
        res = self.integrate(x, mu, np.atleast_2d(y), nu)
        v = res.full[0, 0, 0]
        return Estimate(v, np.zeros_like(v), np.zeros_like(v), np.zeros_like(v))


def solve_poisson_feynman_kac(model: ModelSpec, x, mu, y, nu, T_inf: Optional[float] = None, M: int = 2000,
                              plan: Optional[NoisePlan] = None, *, avg=None, dt: float = 0.02) -> tuple:
    """``(phi, stderr)`` at one point; ``avg`` defaults to Monte Carlo averages."""
    plan = plan if plan is not None else NoisePlan(0, dt)
    if avg is None:
        avg = MonteCarloAveraged(model, plan.child("avg"))
    field_ = FeynmanKacCorrector(model, avg, plan, horizon=T_inf, M=M, dt=dt)
    est = field_.phi(np.atleast_2d(x), mu, y, nu)
    return est.value, est.stderr


# derivatives ----------------------------------------------------------------------


def _unit(d, j, scale):
    e = np.zeros(d)
    e[j] = scale
    return e


@dataclass
class CorrectorDerivatives:
    dyPhi: Estimate  # (d1, d2)
    dxdyPhi: Estimate  # (d1, d2, d1), [i, j, k] = d/dx_k d/dy_j Phi_i
    dnuPhi: Estimate  # (K, d1, d2) at the probed nu particles
    nu_indices: np.ndarray
    step_too_small: bool


def _too_small(est: Estimate, scale: float) -> bool:
    # raw difference = derivative * scale; flag when noise exceeds half of it
    diff = np.abs(est.value) * scale
    return bool(np.any(est.mc_stderr * scale > 0.5 * diff))


def corrector_derivatives(field_, x, mu, y, nu, *, nu_indices=None, delta: float = DELTA,
                          strict: bool = False) -> CorrectorDerivatives:
    """Central differences of the corrector under common random numbers."""
    m = field_.model
    d1, d2 = m.d1, m.d2
    mu, nu = as_samples(mu), as_samples(nu)
    x = np.atleast_2d(np.asarray(x, float))[:1]
    y = np.atleast_1d(np.asarray(y, float)).reshape(d2)
    N = nu.shape[0]
    if nu_indices is None:
        nu_indices = np.arange(min(3, N))
    nu_indices = np.asarray(nu_indices, dtype=int)

    xs = [x[0]] + [x[0] + s * _unit(d1, k, delta) for k in range(d1) for s in (1, -1)]
    starts = [y] + [y + s * _unit(d2, j, delta) for j in range(d2) for s in (1, -1)]
    res = field_.integrate(np.array(xs), mu, np.array(starts), nu)
    field_.check_tail(res)

    def dy_samples(arr, xi):
        out = np.empty((arr.shape[2], d1, d2))
        for j in range(d2):
            out[:, :, j] = (arr[xi, 1 + 2 * j] - arr[xi, 2 + 2 * j]) / (2 * delta)
        return out

    dy = _estimate(dy_samples(res.full, 0), dy_samples(res.trunc, 0), axis=0)

    def dxdy_samples(arr):
        out = np.empty((arr.shape[2], d1, d2, d1))
        for k in range(d1):
            out[..., k] = (dy_samples(arr, 1 + 2 * k) - dy_samples(arr, 2 + 2 * k)) / (2 * delta)
        return out

    dxdy = _estimate(dxdy_samples(res.full), dxdy_samples(res.trunc), axis=0)

    full_nu, trunc_nu = [], []
    for k in nu_indices:
        f_k, t_k = [], []
        for j in range(d2):
            pair = []
            for s in (1, -1):
                shifted = nu.copy()
                shifted[k, j] += s * delta
                pair.append(field_.integrate(x, mu, y[None, :], shifted))
            scale = N / (2 * delta)
            f_k.append((pair[0].full[0, 0] - pair[1].full[0, 0]) * scale)
            t_k.append((pair[0].trunc[0, 0] - pair[1].trunc[0, 0]) * scale)
        full_nu.append(np.stack(f_k, axis=-1))
        trunc_nu.append(np.stack(t_k, axis=-1))
    dnu = _estimate(np.stack(full_nu, axis=1), np.stack(trunc_nu, axis=1), axis=0)

    flag = _too_small(dy, 2 * delta) or _too_small(dnu, 2 * delta / N)
    if flag and strict:
        raise StepTooSmall("finite difference below the Monte Carlo noise floor")
    return CorrectorDerivatives(dy, dxdy, dnu, nu_indices, flag)


# Poisson residual -------------------------------------------------------------------


def _diffusion_factor(model, mu, y, nu):
    """``L`` with ``L L^T = sigma1 sigma1^T + sigma2 sigma2^T``, shape ``(n, d2, d1 + d2)``."""
    return np.concatenate([model.sigma1(mu, y, nu), model.sigma2(mu, y, nu)], axis=2)


def poisson_residual(model: ModelSpec, field_, x, mu, y, nu, *, hutchinson_probes: int = 4,
                     delta: float = DELTA, delta2: float = DELTA2) -> tuple:
    """``(L0 Phi + dF)(x, mu, y, nu)`` and its standard error.

    ``L0`` is the generator of the frozen McKean-Vlasov dynamics. The
    measure-drift term is a directional derivative along the drift of every
    particle; the measure second-order term uses Rademacher probes shifted
    through the diffusion factor of each particle.
    """
    d1, d2 = model.d1, model.d2
    mu, nu = as_samples(mu), as_samples(nu)
    x = np.atleast_2d(np.asarray(x, float))[:1]
    y = np.atleast_1d(np.asarray(y, float)).reshape(d2)
    N = nu.shape[0]

    starts = [y]
    for j in range(d2):
        starts += [y + _unit(d2, j, delta), y - _unit(d2, j, delta),
                   y + _unit(d2, j, delta2), y - _unit(d2, j, delta2)]
    pairs = [(j, l) for j in range(d2) for l in range(j + 1, d2)]
    for j, l in pairs:
        for sj in (1, -1):
            for sl in (1, -1):
                starts.append(y + _unit(d2, j, sj * delta2) + _unit(d2, l, sl * delta2))
    base = field_.integrate(x, mu, np.array(starts), nu)
    field_.check_tail(base)

    yy = y[None, :]
    b_y = model.b(mu, yy, nu)[0]
    L_y = _diffusion_factor(model, mu, yy, nu)[0]
    a_y = L_y @ L_y.T
    dF = field_.delta_F(x, mu, yy, nu)[0]

    b_nu = model.b(mu, nu, nu)
    L_nu = _diffusion_factor(model, mu, nu, nu)
    shifts = [field_.integrate(x, mu, yy, nu + s * delta * b_nu) for s in (1, -1)]
    rng = field_.plan.generator("hutchinson", 0) if hasattr(field_, "plan") else np.random.default_rng(0)
    hut = []
    for _ in range(hutchinson_probes):
        xi = rng.choice([-1.0, 1.0], size=(N, L_nu.shape[2]))
        s = np.einsum("nij,nj->ni", L_nu, xi)
        hut.append([field_.integrate(x, mu, yy, nu + sg * delta2 * s) for sg in (1, -1)])

    def combine(kind):
        arr = getattr(base, kind)[0]  # (S, M, d1)
        phi0 = arr[0]
        out = np.zeros_like(phi0)
        for j in range(d2):
            i1 = 1 + 4 * j
            dyj = (arr[i1] - arr[i1 + 1]) / (2 * delta)
            d2jj = (arr[i1 + 2] - 2 * phi0 + arr[i1 + 3]) / delta2**2
            out += b_y[j] * dyj + 0.5 * a_y[j, j] * d2jj
        off = 1 + 4 * d2
        for p, (j, l) in enumerate(pairs):
            pp, pm, mp, mm = (arr[off + 4 * p + r] for r in range(4))
            out += a_y[j, l] * (pp - pm - mp + mm) / (4 * delta2**2)
        out += (getattr(shifts[0], kind)[0, 0] - getattr(shifts[1], kind)[0, 0]) / (2 * delta)
        per_probe = []
        for hp, hm in hut:
            per_probe.append(0.5 * (getattr(hp, kind)[0, 0] - 2 * phi0 + getattr(hm, kind)[0, 0]) / delta2**2)
        if per_probe:
            out += np.mean(per_probe, axis=0)
        return out + dF, per_probe

    full, probes_full = combine("full")
    trunc, _ = combine("trunc")
    est = _estimate(full, trunc, axis=0)
    se = est.stderr
    if len(probes_full) > 1:
        probe_means = np.array([p.mean(axis=0) for p in probes_full])
        se = np.sqrt(se**2 + probe_means.var(axis=0, ddof=1) / len(probes_full))
    return est.value, se


# symmetric square root -------------------------------------------------------------------


def sqrt_psd(S, clamp_tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD square root after clamping eigenvalues in ``[-clamp_tol, 0)`` to zero.

    Accepts a single matrix or a stack ``(n, d, d)``.
    """
    S = np.asarray(S, dtype=float)
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if np.max(np.abs(S - np.swapaxes(S, -1, -2)), initial=0.0) > 1e-10 * scale:
        raise NotSymmetric("matrix is not symmetric to 1e-10")
    Ssym = 0.5 * (S + np.swapaxes(S, -1, -2))
    w, V = np.linalg.eigh(Ssym)
    if np.min(w, initial=0.0) < -clamp_tol:
        raise NegativeBeyondTolerance(f"eigenvalue {float(np.min(w)):.3g} below -{clamp_tol:g}")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


# limit coefficients ------------------------------------------------------------------------


@dataclass
class LimitCoefficients:
    """Limit-equation coefficients at query points ``x`` (leading axis) for one ``mu``.

    ``cbarbar_dnuPhi`` is stored already averaged over the independent copy
    ``x~ ~ mu``, which is the only form the limit drift uses.
    ``sigma1_dxdyPhi[i, m, k] = E sum_j sigma1[j, m] d/dx_k d/dy_j Phi_i``;
    its drift contribution is ``trace(S_i G)``.
    """

    x: np.ndarray
    cbar_dyPhi: np.ndarray
    cbarbar_dnuPhi: np.ndarray
    sigma1_dxdyPhi: np.ndarray
    dyPhi_sigma1: np.ndarray
    sigma11: np.ndarray
    sigma2: np.ndarray
    Sigma: np.ndarray
    sqrtSigma: np.ndarray
    stderr: dict = field(default_factory=dict)
    mu_hash: str = ""

    def quantities(self) -> dict:
        return {
            "cbar_dyPhi": self.cbar_dyPhi, "cbarbar_dnuPhi": self.cbarbar_dnuPhi,
            "sigma1_dxdyPhi": self.sigma1_dxdyPhi, "dyPhi_sigma1": self.dyPhi_sigma1,
            "sigma11": self.sigma11, "sigma2": self.sigma2, "Sigma": self.Sigma, "sqrtSigma": self.sqrtSigma,
        }

    def within(self, name: str, target, k: float = 3.0) -> bool:
        v = self.quantities()[name]
        se = self.stderr.get(name, np.zeros_like(v))
        return bool(np.all(np.abs(v - target) <= k * se + NUMERIC_FLOOR))


def _mu_hash(mu) -> str:
    a = np.ascontiguousarray(as_samples(mu))
    return hashlib.sha256(a.tobytes()).hexdigest()[:12]


def _ustat_outer(A, B):
    """Mean of ``A_b B_c^T`` over ordered block pairs ``b != c``; blocks on axis 0.

    ``A`` and ``B`` hold matrices in their last two axes; the product contracts
    the column index.
    """
    nb = A.shape[0]
    SA, SB = A.sum(axis=0), B.sum(axis=0)
    diag = np.einsum("b...ik,b...jk->...ij", A, B)
    return (np.einsum("...ik,...jk->...ij", SA, SB) - diag) / (nb * (nb - 1))


def _sym(Q):
    return 0.5 * (Q + np.swapaxes(Q, -1, -2))


def assemble_limit_coefficients(model: ModelSpec, field_, mu, zeta: InvariantEstimate, x=None, *,
                                outer: int = 32, blocks: int = 16, delta: float = DELTA,
                                mu_sub: int = 256, psd_tol: float = 1e-6) -> LimitCoefficients:
    """Monte Carlo averages over ``y ~ zeta`` of the corrector products.

    ``x`` are the query points (default: the mean of ``mu``). Outer points
    are the first ``outer`` samples of ``zeta``; paths are split into
    ``blocks`` groups so quadratic forms use independent blocks (unbiased)
    and standard errors come from a delete-one-block jackknife plus the
    outer-sample spread. ``zeta`` also serves as the fast measure argument.
    """
    if not model.clt_compatible:
        raise NotCLTCompatible("limit coefficients need G free of the fast law")
    d1, d2 = model.d1, model.d2
    mu = as_samples(mu)
    z = zeta.samples
    if x is None:
        x = mu.mean(axis=0, keepdims=True)
    x = np.atleast_2d(np.asarray(x, float))
    nx = x.shape[0]
    ys = z[: min(outer, z.shape[0])]
    S = ys.shape[0]

    xs = [x] + [x + s * _unit(d1, k, delta) for k in range(d1) for s in (1, -1)]
    xs = np.concatenate(xs, axis=0)  # blocks of nx rows
    starts = [ys] + [ys + s * _unit(d2, j, delta) for j in range(d2) for s in (1, -1)]
    starts = np.concatenate(starts, axis=0)  # blocks of S rows
    res = field_.integrate(xs, mu, starts, z)
    field_.check_tail(res)

    # x~-averaged fast drift at each zeta sample, for the double integral
    mus = mu[:mu_sub]
    nz, nm = z.shape[0], mus.shape[0]
    c_tilde = model.c(np.repeat(mus, nz, axis=0), mu, np.tile(z, (nm, 1)), z).reshape(nm, nz, d2).mean(axis=0)
    dir_res = [field_.integrate(x, mu, ys, z + s * delta * c_tilde) for s in (1, -1)]

    sig1 = model.sigma1(mu, ys, z)  # (S, d2, d1)
    sig2 = model.sigma2(mu, ys, z)
    c_y = np.stack([model.c(x[i:i + 1].repeat(S, axis=0), mu, ys, z) for i in range(nx)])  # (nx, S, d2)

    M = res.trunc.shape[2]
    nb = max(2, min(blocks, M)) if M > 1 else 1
    groups = np.array_split(np.arange(M), nb)

    def block_means(a):
        # a: (..., M, ...) with path axis 2 -> blocks on new axis 0
        return np.stack([a[:, :, g].mean(axis=2) for g in groups])

    def pieces(kind):
        arr = getattr(res, kind)  # (nx*(1+2d1), S*(1+2d2), M, d1)

        def dy(xi):
            out = np.empty((nx, S, M, d1, d2))
            for j in range(d2):
                plus = arr[xi * nx:(xi + 1) * nx, (1 + 2 * j) * S:(2 + 2 * j) * S]
                minus = arr[xi * nx:(xi + 1) * nx, (2 + 2 * j) * S:(3 + 2 * j) * S]
                out[..., j] = (plus - minus) / (2 * delta)
            return out

        dy0 = dy(0)
        dxdy = np.empty(dy0.shape + (d1,))
        for k in range(d1):
            dxdy[..., k] = (dy(1 + 2 * k) - dy(2 + 2 * k)) / (2 * delta)
        dnu = (getattr(dir_res[0], kind) - getattr(dir_res[1], kind)) / (2 * delta)  # (nx, S, M, d1)
        a1 = np.einsum("xsmij,sjk->xsmik", dy0, sig1)
        a2 = np.einsum("xsmij,sjk->xsmik", dy0, sig2)
        cb = np.einsum("xsmij,xsj->xsmi", dy0, c_y)
        sG = np.einsum("sjq,xspijk->xspiqk", sig1, dxdy)
        return {k_: block_means(v) for k_, v in
                dict(a1=a1, a2=a2, cb=cb, cbb=dnu, sG=sG).items()}  # each (nb, nx, S, ...)

    def reduce(P):
        """All coefficients from block means ``P`` (blocks on axis 0)."""
        out = {}
        out["cbar_dyPhi"] = P["cb"].mean(axis=(0, 2))
        out["cbarbar_dnuPhi"] = P["cbb"].mean(axis=(0, 2))
        out["sigma1_dxdyPhi"] = P["sG"].mean(axis=(0, 2))
        out["dyPhi_sigma1"] = P["a1"].mean(axis=(0, 2))
        if P["a1"].shape[0] > 1:
            q11 = _sym(_ustat_outer(P["a1"], P["a1"])).mean(axis=1)
            q2 = _sym(_ustat_outer(P["a2"], P["a2"])).mean(axis=1)
            m1 = P["a1"].mean(axis=2)  # (nb, nx, d1, d1)
            mm = _sym(np.einsum("bxik,cxjk->bcxij", m1, m1))
            nbk = m1.shape[0]
            off = mm.sum(axis=(0, 1)) - np.einsum("bbxij->xij", mm)
            outer_m = off / (nbk * (nbk - 1))
        else:
            q11 = np.einsum("bxsik,bxsjk->xij", P["a1"], P["a1"]) / P["a1"].shape[2]
            q2 = np.einsum("bxsik,bxsjk->xij", P["a2"], P["a2"]) / P["a2"].shape[2]
            m1 = P["a1"].mean(axis=(0, 2))
            outer_m = np.einsum("xik,xjk->xij", m1, m1)
        out["sigma11"] = q11
        out["sigma2"] = q2
        out["Sigma"] = q11 - outer_m + q2
        return out

    P_full, P_trunc = pieces("full"), pieces("trunc")
    val = reduce(P_full)
    val_trunc = reduce(P_trunc)

    # delete-one-block jackknife
    mc_var = {k: np.zeros_like(v) for k, v in val.items()}
    if nb > 2:
        jk = []
        for b in range(nb):
            keep = [i for i in range(nb) if i != b]
            jk.append(reduce({k: v[keep] for k, v in P_full.items()}))
        for k in val:
            arr = np.stack([j[k] for j in jk])
            mc_var[k] = (nb - 1) / nb * np.sum((arr - arr.mean(axis=0)) ** 2, axis=0)

    # outer-sample spread through per-sample influence values
    per_y = {k: v.mean(axis=0) for k, v in P_full.items()}  # (nx, S, ...)
    m1 = per_y["a1"].mean(axis=1)
    infl = {
        "cbar_dyPhi": per_y["cb"], "cbarbar_dnuPhi": per_y["cbb"], "sigma1_dxdyPhi": per_y["sG"],
        "dyPhi_sigma1": per_y["a1"],
        "sigma11": np.einsum("xsik,xsjk->xsij", per_y["a1"], per_y["a1"]),
        "sigma2": np.einsum("xsik,xsjk->xsij", per_y["a2"], per_y["a2"]),
    }
    cross = np.einsum("xsik,xjk->xsij", per_y["a1"], m1)
    infl["Sigma"] = infl["sigma11"] - cross - np.swapaxes(cross, -1, -2) + infl["sigma2"]
    stderr = {}
    for k in val:
        y_var = infl[k].var(axis=1, ddof=1) / S if S > 1 else np.zeros_like(val[k])
        stderr[k] = np.sqrt(mc_var[k] + y_var + (TAIL_SYS_FACTOR * (val[k] - val_trunc[k])) ** 2)

    Sigma = _sym(val["Sigma"])
    w = np.linalg.eigvalsh(Sigma)
    if np.min(w) < -psd_tol:
        raise NonPSDSigma(f"Sigma has eigenvalue {float(np.min(w)):.3g}; increase the path count M")
    sq = sqrt_psd(Sigma, clamp_tol=psd_tol)
    stderr["sqrtSigma"] = np.zeros_like(sq)
    return LimitCoefficients(
        x=x, cbar_dyPhi=val["cbar_dyPhi"], cbarbar_dnuPhi=val["cbarbar_dnuPhi"],
        sigma1_dxdyPhi=val["sigma1_dxdyPhi"], dyPhi_sigma1=val["dyPhi_sigma1"],
        sigma11=val["sigma11"], sigma2=val["sigma2"], Sigma=Sigma, sqrtSigma=sq,
        stderr=stderr, mu_hash=_mu_hash(mu),
    )


def save_limit_coefficients_csv(path, coeffs: LimitCoefficients) -> None:
    """Rows ``(x, mu_hash, quantity, value, stderr)``, one per component."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "mu_hash", "quantity", "value", "stderr"])
        for name, arr in coeffs.quantities().items():
            se = coeffs.stderr.get(name, np.zeros_like(arr))
            for i in range(arr.shape[0]):
                xlabel = " ".join(repr(float(v)) for v in coeffs.x[i])
                for idx in np.ndindex(arr.shape[1:]):
                    label = name + ("[" + ",".join(map(str, idx)) + "]" if idx else "")
                    w.writerow([xlabel, coeffs.mu_hash, label, repr(float(arr[i][idx])), repr(float(se[i][idx]))])


# limit-term providers for the fluctuation equation ------------------------------------------


@dataclass
class LimitTerms:
    """Per-particle corrector terms entering one limit step."""

    drift_const: np.ndarray  # (n, d1): cbar + x~-averaged cbarbar
    sG: np.ndarray  # (n, d1, d1, d1)
    dyPhi_sigma1: np.ndarray  # (n, d1, d1)
    sqrt_sigma: np.ndarray  # (n, d1, d1)

    def const_drift(self, G) -> np.ndarray:
        return self.drift_const + np.einsum("nimk,nkm->ni", self.sG, G)

    def interpolate(self, other: "LimitTerms", w: float) -> "LimitTerms":
        return LimitTerms(*((1 - w) * a + w * b for a, b in
                            zip((self.drift_const, self.sG, self.dyPhi_sigma1, self.sqrt_sigma),
                                (other.drift_const, other.sG, other.dyPhi_sigma1, other.sqrt_sigma))))


def _broadcast_terms(n, drift, sG, s1, sq) -> LimitTerms:
    return LimitTerms(np.broadcast_to(drift, (n,) + drift.shape).copy(),
                      np.broadcast_to(sG, (n,) + sG.shape).copy(),
                      np.broadcast_to(s1, (n,) + s1.shape).copy(),
                      np.broadcast_to(sq, (n,) + sq.shape).copy())


class BenchmarkLimitProvider:
    """Closed-form limit terms of the linear benchmark (constant in ``x`` and ``mu``)."""

    def __init__(self, bench: LinearBenchmark):
        p, q = bench.pq
        self.drift = np.array([bench.c0 * (p + q)])
        self.sG = np.zeros((1, 1, 1))
        self.s1 = np.array([[p * bench.s1]])
        self.sigma = np.array([[(p * bench.s2) ** 2]])
        self.sq = np.array([[abs(p * bench.s2)]])

    def evaluate(self, xbar, mu) -> LimitTerms:
        return _broadcast_terms(xbar.shape[0], self.drift, self.sG, self.s1, self.sq)


class ConstantLimitProvider:
    """Terms from coefficients assembled at a single point, reused everywhere.

    Appropriate when the coefficients do not depend on ``(x, mu)``, as for
    the linear benchmark.
    """

    def __init__(self, coeffs: LimitCoefficients, index: int = 0):
        self.coeffs = coeffs
        self.drift = coeffs.cbar_dyPhi[index] + coeffs.cbarbar_dnuPhi[index]
        self.sG = coeffs.sigma1_dxdyPhi[index]
        self.s1 = coeffs.dyPhi_sigma1[index]
        self.sq = coeffs.sqrtSigma[index]

    def evaluate(self, xbar, mu) -> LimitTerms:
        return _broadcast_terms(xbar.shape[0], self.drift, self.sG, self.s1, self.sq)


class MonteCarloLimitProvider:
    """Assembles coefficients on the fly at a few nodes and interpolates.

    In one slow dimension the nodes are quantiles of the current cloud and
    values are linearly interpolated in ``x``; otherwise the value at the
    cloud mean is used for every particle. The invariant measure is
    re-estimated for each queried ``mu``.
    """

    def __init__(self, model: ModelSpec, field_, plan: NoisePlan, *, nodes: int = 5, N_zeta: int = 512, **assemble_kw):
        self.model = model
        self.field = field_
        self.plan = plan
        self.nodes = nodes
        self.N_zeta = N_zeta
        self.assemble_kw = assemble_kw

    def evaluate(self, xbar, mu) -> LimitTerms:
        mu = as_samples(mu)
        zeta = estimate_invariant_measure(self.model, mu, self.N_zeta, None, self.plan.child("zeta"))
        if self.model.d1 == 1 and self.nodes > 1:
            q = np.quantile(xbar[:, 0], np.linspace(0.05, 0.95, self.nodes))
            nodes = np.unique(q)[:, None]
        else:
            nodes = mu.mean(axis=0, keepdims=True)
        co = assemble_limit_coefficients(self.model, self.field, mu, zeta, nodes, **self.assemble_kw)
        parts = [co.cbar_dyPhi + co.cbarbar_dnuPhi, co.sigma1_dxdyPhi, co.dyPhi_sigma1, co.sqrtSigma]
        n = xbar.shape[0]
        if nodes.shape[0] == 1:
            return _broadcast_terms(n, *(p[0] for p in parts))
        xq = np.clip(xbar[:, 0], nodes[0, 0], nodes[-1, 0])
        out = []
        for p in parts:
            flat = p.reshape(p.shape[0], -1)
            cols = [np.interp(xq, nodes[:, 0], flat[:, c]) for c in range(flat.shape[1])]
            out.append(np.stack(cols, axis=1).reshape((n,) + p.shape[1:]))
        return LimitTerms(*out)
