"""Verification harness: convergence-rate experiments, ergodic decay and the
Ito-formula check, with log-log slope fitting.

Replica jobs run on a thread pool but every job draws from its own noise
plan ``plan.child("eps", k, "rep", r)`` and results are reduced in job
order, so reports are bit-for-bit identical whatever the worker count.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .engine import (InitLaw, deviation_process, simulate_averaged, simulate_frozen, simulate_limit_clt,
                     simulate_slow_fast)
from .ergodic import coupling_curve, estimate_invariant_measure, fit_log_linear
from .errors import InsufficientReplicas, NonPositiveValue
from .measure import (CylinderFunctional, as_samples, half_second_moment, mean_functional, sin_of_mean,
                      wasserstein2)
from .model import LinearBenchmark, ModelSpec
from .rng import NoisePlan

__all__ = [
    "SlopeFit",
    "fit_loglog_slope",
    "RateReport",
    "run_jobs",
    "run_strong_rate",
    "WEAK_STATISTICS",
    "run_weak_clt_rate",
    "limit_moment_oracle",
    "run_fluctuation_estimate",
    "ErgodicReport",
    "run_ergodic_decay",
    "ItoFunctional",
    "bilinear_functional",
    "measure_functional",
    "mixed_functional",
    "builtin_ito_functionals",
    "ItoReport",
    "run_ito_check",
]


# slope fitting ----------------------------------------------------------------------


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    ci95: tuple


def fit_loglog_slope(points: Sequence[tuple], *, bootstrap: int = 2000, seed: int = 0) -> SlopeFit:
    """Weighted least squares of ``log value`` on ``log epsilon``.

    Weights are ``(value / stderr)**2`` (relative errors propagated to the
    log scale). The 95% interval comes from a parametric bootstrap that
    redraws each value from ``N(value, stderr**2)``.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("need at least 3 points (epsilon, value, stderr)")
    eps, val = pts[:, 0], pts[:, 1]
    se = pts[:, 2] if pts.shape[1] > 2 else np.zeros_like(val)
    if np.any(val <= 0) or np.any(eps <= 0):
        raise NonPositiveValue("log-log fit needs positive epsilons and values")
    rel = se / val
    if np.all(rel > 0):
        w = 1.0 / rel**2
    elif np.any(rel > 0):
        w = 1.0 / np.maximum(rel, rel[rel > 0].min()) ** 2
    else:
        w = np.ones_like(val)

    def wls(v):
        x, y = np.log(eps), np.log(v)
        W = w.sum()
        xm, ym = (w * x).sum() / W, (w * y).sum() / W
        slope = (w * (x - xm) * (y - ym)).sum() / (w * (x - xm) ** 2).sum()
        return slope, ym - slope * xm

    slope, intercept = wls(val)
    if np.all(se == 0) or bootstrap <= 0:
        return SlopeFit(float(slope), float(intercept), (float(slope), float(slope)))
    rng = np.random.default_rng(seed)
    draws = val + se * rng.standard_normal((bootstrap, val.size))
    draws = np.maximum(draws, 0.1 * val)
    boot = np.array([wls(d)[0] for d in draws])
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return SlopeFit(float(slope), float(intercept), (float(lo), float(hi)))


@dataclass
class RateReport:
    """Per-epsilon error estimates and the fitted log-log slope."""

    name: str
    epsilon_grid: list
    errors: list
    stderrs: list
    replicas: list
    fit: SlopeFit
    fingerprint: str = ""
    raw: list = field(default_factory=list)  # (eps_index, replica, value)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        g = np.asarray(self.epsilon_grid, float)
        if g.size < 3 or np.any(np.diff(g) >= 0):
            raise ValueError("epsilon grid must be strictly decreasing with at least 3 points")

    @property
    def slope(self) -> float:
        return self.fit.slope

    def passes(self, lo: float, hi: float) -> bool:
        return lo <= self.fit.slope <= hi

    def summary(self) -> dict:
        return {
            "name": self.name, "slope": self.fit.slope, "intercept": self.fit.intercept,
            "ci95": list(self.fit.ci95), "epsilon_grid": list(self.epsilon_grid),
            "errors": list(self.errors), "stderrs": list(self.stderrs), "replicas": list(self.replicas),
            "fingerprint": self.fingerprint, "extra": _jsonable(self.extra),
        }

    def write_rate_table(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", "mean", "stderr", "n"])
            for e, m, s, n in zip(self.epsilon_grid, self.errors, self.stderrs, self.replicas):
                w.writerow([repr(float(e)), repr(float(m)), repr(float(s)), int(n)])

    def write_raw(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epsilon", "replica", "statistic", "value"])
            for row in self.raw:
                k, r, stat, v = row
                w.writerow([repr(float(self.epsilon_grid[k])), r, stat, repr(float(v))])


def _fit_points(points, seed):
    """Log-log fit, or an all-NaN fit when every error is exactly zero."""
    if all(v == 0 for _, v, _ in points):
        nan = float("nan")
        return SlopeFit(nan, nan, (nan, nan))
    return fit_loglog_slope(points, seed=seed)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    return obj


def run_jobs(fn: Callable, jobs: list, workers: int = 1) -> list:
    """Apply ``fn`` to every job, returning results in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _check_grid(grid):
    g = [float(e) for e in grid]
    if len(g) < 3 or any(b >= a for a, b in zip(g, g[1:])):
        raise ValueError("epsilon grid must be strictly decreasing with at least 3 points")
    if any(not 0 < e <= 1 for e in g):
        raise ValueError("epsilon values must lie in (0, 1]")
    return g


def _mean_se(values):
    v = np.asarray(values, float)
    se = v.std(ddof=1) / math.sqrt(v.size) if v.size > 1 else 0.0
    return float(v.mean()), float(se)


def _rms_point(eps, errs):
    """RMS of replica mean-square errors with a delta-method stderr."""
    m, se = _mean_se(errs)
    r = math.sqrt(max(m, 0.0))
    return r, (se / (2 * r) if r > 0 else 0.0), m, se


# strong rate ----------------------------------------------------------------------


def run_strong_rate(model: ModelSpec, avg, epsilon_grid, N: int, T: float, replicas: int, plan: NoisePlan, *,
                    h: float = 0.05, workers: int = 1, snapshots: int = 20, init_x: InitLaw = InitLaw(),
                    init_y: InitLaw = InitLaw(), halving_probe: bool = True,
                    fingerprint: str = "") -> RateReport:
    """Strong averaging error ``sup_t mean_i |X^eps_i - Xbar_i|^2`` against epsilon.

    The fitted quantity is the RMS error, so the expected slope is 1.
    """
    grid = _check_grid(epsilon_grid)
    times = np.linspace(0.0, T, snapshots + 1)

    def job(args):
        k, r, n_particles, tag = args
        sub = plan.child(tag, k, "rep", r)
        sf = simulate_slow_fast(model, grid[k], n_particles, T, sub, h=h, snapshot_times=times,
                                init_x=init_x, init_y=init_y)
        av = simulate_averaged(model, avg, n_particles, T, sub.with_dt(sf.dt), snapshot_times=times, init_x=init_x)
        err = float(np.max(np.mean(np.sum((sf.X - av.X) ** 2, axis=2), axis=1)))
        return err, float(np.max(sf.m4_X)), float(np.max(sf.m4_Y))

    jobs = [(k, r, N, "eps") for k in range(len(grid)) for r in range(replicas)]
    out = run_jobs(job, jobs, workers)
    errors, stderrs, reps, points, raw = [], [], [], [], []
    m4x, m4y = [], []
    for k, e in enumerate(grid):
        cell = out[k * replicas:(k + 1) * replicas]
        errs = [c[0] for c in cell]
        raw += [(k, r, "sup_mse", v) for r, v in enumerate(errs)]
        rms, rms_se, m, se = _rms_point(e, errs)
        if m > 0 and replicas > 1 and se / m > 0.5:
            raise InsufficientReplicas(f"stderr/mean={se / m:.2f} > 0.5 at epsilon={e}")
        errors.append(rms)
        stderrs.append(rms_se)
        reps.append(replicas)
        points.append((e, rms, rms_se))
        m4x.append(float(np.mean([c[1] for c in cell])))
        m4y.append(float(np.mean([c[2] for c in cell])))
    fit = _fit_points(points, plan.seed_int("bootstrap") % 2**32)
    extra = {"m4_X": m4x, "m4_Y": m4y, "m4_ratio": max(m4x) / m4x[0], "h": h, "N": N, "T": T}
    if halving_probe:
        half = run_jobs(job, [(0, r, max(2, N // 2), "half") for r in range(replicas)], workers)
        half_rms = _rms_point(grid[0], [c[0] for c in half])[0]
        trend = abs(errors[0] - errors[1])
        extra.update(halving_rms=half_rms, halving_change=abs(half_rms - errors[0]), grid_step_trend=trend,
                     halving_ok=abs(half_rms - errors[0]) < trend)
    return RateReport("strong-rate", grid, errors, stderrs, reps, fit, fingerprint, raw, extra)


# weak CLT rate --------------------------------------------------------------------------


def _stat_tanh(Z):
    return float(np.mean(np.tanh(Z[:, 0])))


def _stat_second(Z):
    return float(np.mean(np.sum(Z**2, axis=1)))


def _stat_sin_mean(Z):
    return float(math.sin(Z[:, 0].mean()))


WEAK_STATISTICS = {"tanh": _stat_tanh, "second_moment": _stat_second, "sin_mean": _stat_sin_mean}


def limit_moment_oracle(bench: LinearBenchmark, T: float) -> tuple:
    """Mean and second moment of the limit fluctuation at ``T`` for the benchmark.

    Solves ``m' = (A + K) m + c`` and
    ``s' = (2A + g1^2) s + 2 K m^2 + 2 c m + 2 g1 p s1 m + p^2 (s1^2 + s2^2)``
    with ``c = c0 (p + q)`` from zero initial data.
    """
    p, q = bench.pq
    A, K, g1 = bench.A, bench.averaged_mean_rate, bench.g1
    c = bench.c0 * (p + q)

    def rhs(t, u):
        m, s = u
        return [(A + K) * m + c,
                (2 * A + g1**2) * s + 2 * K * m**2 + 2 * c * m + 2 * g1 * p * bench.s1 * m
                + p**2 * (bench.s1**2 + bench.s2**2)]

    sol = solve_ivp(rhs, (0.0, T), [0.0, 0.0], rtol=1e-11, atol=1e-13)
    return float(sol.y[0, -1]), float(sol.y[1, -1])


def run_weak_clt_rate(model: ModelSpec, avg, provider, epsilon_grid, N: int, T: float, replicas: int,
                      plan: NoisePlan, *, statistics: Optional[dict] = None, h: float = 0.05,
                      dt_limit: float = 1e-3, refresh_every: int = 1, workers: int = 1,
                      init_x: InitLaw = InitLaw(), init_y: InitLaw = InitLaw(),
                      oracle_second_moment: Optional[float] = None, fingerprint: str = "") -> RateReport:
    """Weak error ``|phi(law Z^eps_T) - phi(law Zbar_T)|`` against epsilon.

    Each (epsilon, replica) cell runs the coupled slow-fast and averaged
    systems and an independent limit simulation; the signed per-replica
    differences are averaged before taking the absolute value. The reported
    slope is the smallest statistic's slope; every statistic's fit is in
    ``extra``.
    """
    grid = _check_grid(epsilon_grid)
    stats = dict(WEAK_STATISTICS if statistics is None else statistics)

    def job(args):
        k, r = args
        sub = plan.child("eps", k, "rep", r)
        sf = simulate_slow_fast(model, grid[k], N, T, sub, h=h, snapshot_times=[T], init_x=init_x, init_y=init_y)
        av = simulate_averaged(model, avg, N, T, sub.with_dt(sf.dt), snapshot_times=[T], init_x=init_x)
        Z = deviation_process(sf, av, grid[k]).Z[-1]
        lim = simulate_limit_clt(model, avg, provider, N, T, sub.child("limit").with_dt(dt_limit),
                                 snapshot_times=[T], init_x=init_x, refresh_every=refresh_every)
        Zb = lim.Z[-1]
        return {name: (f(Z), f(Zb)) for name, f in stats.items()}

    jobs = [(k, r) for k in range(len(grid)) for r in range(replicas)]
    out = run_jobs(job, jobs, workers)
    per_stat, raw = {}, []
    for name in stats:
        errs, ses, points = [], [], []
        for k, e in enumerate(grid):
            cell = out[k * replicas:(k + 1) * replicas]
            diffs = [c[name][0] - c[name][1] for c in cell]
            raw += [(k, r, name, d) for r, d in enumerate(diffs)]
            m, se = _mean_se(diffs)
            errs.append(abs(m))
            ses.append(se)
            points.append((e, abs(m), se))
        fit = _fit_points(points, plan.seed_int("bootstrap_" + name) % 2**32)
        per_stat[name] = {"errors": errs, "stderrs": ses, "slope": fit.slope, "ci95": list(fit.ci95), "fit": fit}
    worst = min(per_stat, key=lambda s: (np.nan_to_num(per_stat[s]["slope"], nan=np.inf), s))
    extra = {"statistics": {k: {kk: vv for kk, vv in v.items() if kk != "fit"} for k, v in per_stat.items()},
             "reported_statistic": worst, "h": h, "N": N, "T": T}
    zb2 = [c["second_moment"][1] for c in out[:replicas]] if "second_moment" in stats else []
    if zb2:
        m, se = _mean_se(zb2)
        extra["limit_second_moment"] = m
        extra["limit_second_moment_stderr"] = se
        if oracle_second_moment is not None:
            extra["oracle_second_moment"] = oracle_second_moment
            extra["oracle_ok"] = abs(m - oracle_second_moment) <= 3 * se
    sel = per_stat[worst]
    return RateReport("clt-rate", grid, sel["errors"], sel["stderrs"], [replicas] * len(grid), sel["fit"],
                      fingerprint, raw, extra)


# fluctuation estimate ------------------------------------------------------------------


def run_fluctuation_estimate(model: ModelSpec, avg, epsilon_grid, N: int, T: float, replicas: int,
                             plan: NoisePlan, *, h: float = 0.05, workers: int = 1,
                             init_x: InitLaw = InitLaw(), init_y: InitLaw = InitLaw(),
                             fingerprint: str = "") -> RateReport:
    """RMS of ``int_0^T dF(X_s, mu_s, Y_s, nu_s) ds`` along the slow-fast run against epsilon."""
    grid = _check_grid(epsilon_grid)

    def job(args):
        k, r = args
        sub = plan.child("eps", k, "rep", r)
        state = {"I": np.zeros((N, model.d1)), "prev": None}

        def observer(step, t, X, Y, dt):
            f = model.F(X, X, Y, Y) - avg.F_bar(X, X)
            if state["prev"] is not None:
                state["I"] += 0.5 * dt * (state["prev"] + f)
            state["prev"] = f

        simulate_slow_fast(model, grid[k], N, T, sub, h=h, snapshot_times=[T], init_x=init_x, init_y=init_y,
                           observer=observer)
        return float(np.mean(np.sum(state["I"] ** 2, axis=1)))

    out = run_jobs(job, [(k, r) for k in range(len(grid)) for r in range(replicas)], workers)
    errors, stderrs, points, raw = [], [], [], []
    for k, e in enumerate(grid):
        cell = out[k * replicas:(k + 1) * replicas]
        raw += [(k, r, "mean_sq_integral", v) for r, v in enumerate(cell)]
        rms, rms_se, _, _ = _rms_point(e, cell)
        errors.append(rms)
        stderrs.append(rms_se)
        points.append((e, rms, rms_se))
    fit = _fit_points(points, plan.seed_int("bootstrap") % 2**32)
    return RateReport("fluctuation", grid, errors, stderrs, [replicas] * len(grid), fit, fingerprint, raw,
                      {"h": h, "N": N, "T": T})


# ergodic decay ---------------------------------------------------------------------------


@dataclass
class ErgodicReport:
    rate: float
    r_squared: float
    law_times: np.ndarray
    law_w2: np.ndarray
    law_rate: float
    law_r_squared: float
    floor: float
    monotone: bool
    zeta_mean: np.ndarray
    zeta_mean_stderr: np.ndarray
    zeta_var: np.ndarray
    zeta_var_stderr: np.ndarray

    def summary(self) -> dict:
        return _jsonable({k: getattr(self, k) for k in self.__dataclass_fields__})


def run_ergodic_decay(model: ModelSpec, mu, T: float, plan: NoisePlan, *, N: int = 2000, start_shift: float = 3.0,
                      grid_points: int = 40, r2_min: float = 0.9) -> ErgodicReport:
    """Synchronous-coupling rate plus the law-level decay ``W2(nu_t, zeta)``.

    The law-level fit uses the leading part of the curve above three times
    the sampling floor (the W2 distance between two halves of the invariant
    cloud).
    """
    mu = as_samples(mu)
    zeta = estimate_invariant_measure(model, mu, N, None, plan.child("zeta"))
    g0 = plan.normals("nu0_a", 0, N, model.d2)
    g1 = plan.normals("nu0_b", 0, N, model.d2)
    t, w2 = coupling_curve(model, mu, g0, start_shift + 0.5 * g1, T, plan.child("coupling"), grid_points)
    rate, r2, _ = fit_log_linear(t, w2, floor=1e-12 * max(1.0, float(w2[0])))
    nu0 = start_shift + plan.normals("nu0_law", 0, N, model.d2)
    traj = simulate_frozen(model, mu, nu0, T, plan.child("law"), snapshot_times=np.linspace(0, T, grid_points + 1))
    z = zeta.samples
    lw = np.array([float(wasserstein2(y, z)) for y in traj.Y])
    floor = float(wasserstein2(z[0::2], z[1::2]))
    law_rate, law_r2, mask = fit_log_linear(traj.times, lw, floor=3 * floor)
    smooth = np.convolve(lw[mask], np.ones(3) / 3, mode="valid")
    monotone = bool(np.all(np.diff(smooth) <= 0))
    return ErgodicReport(rate, r2, traj.times, lw, law_rate, law_r2, floor, monotone,
                         zeta.mean(), zeta.mean_stderr(), zeta.variance(), zeta.variance_stderr())


# Ito formula check ------------------------------------------------------------------------


@dataclass(frozen=True)
class ItoFunctional:
    """``u(x, mu, y, nu) = phi(x, y) + sum_j coef_j U_j(mu) V_j(nu)``.

    ``phi`` and its derivatives act row-wise; ``U_j``/``V_j`` are cylinder
    functionals (``None`` stands for the constant 1). ``phi_dydx`` has shape
    ``(n, d2, d1)`` with entry ``[j, k] = d/dy_j d/dx_k phi``.
    """

    name: str
    phi: Callable
    phi_dx: Callable
    phi_dxx: Callable
    phi_dy: Callable
    phi_dyy: Callable
    phi_dydx: Callable
    terms: tuple = ()

    def value(self, x, mu, y, nu) -> np.ndarray:
        v = self.phi(x, y)
        for coef, U, V in self.terms:
            v = v + coef * (U.value(mu) if U else 1.0) * (V.value(nu) if V else 1.0)
        return v


def _zeros_like_rows(n, *shape):
    return np.zeros((n,) + shape)


def bilinear_functional() -> ItoFunctional:
    """``u = x . y`` (needs ``d1 == d2``); its cross derivative is the identity."""
    return ItoFunctional(
        name="bilinear",
        phi=lambda x, y: np.sum(x * y, axis=1),
        phi_dx=lambda x, y: y.copy(),
        phi_dxx=lambda x, y: _zeros_like_rows(x.shape[0], x.shape[1], x.shape[1]),
        phi_dy=lambda x, y: x.copy(),
        phi_dyy=lambda x, y: _zeros_like_rows(y.shape[0], y.shape[1], y.shape[1]),
        phi_dydx=lambda x, y: np.broadcast_to(np.eye(y.shape[1], x.shape[1]), (x.shape[0], y.shape[1], x.shape[1])),
    )


def _no_phi(name, terms):
    return ItoFunctional(
        name=name,
        phi=lambda x, y: np.zeros(x.shape[0]),
        phi_dx=lambda x, y: np.zeros_like(x),
        phi_dxx=lambda x, y: _zeros_like_rows(x.shape[0], x.shape[1], x.shape[1]),
        phi_dy=lambda x, y: np.zeros_like(y),
        phi_dyy=lambda x, y: _zeros_like_rows(y.shape[0], y.shape[1], y.shape[1]),
        phi_dydx=lambda x, y: _zeros_like_rows(x.shape[0], y.shape[1], x.shape[1]),
        terms=terms,
    )


def measure_functional(d1: int = 1, d2: int = 1) -> ItoFunctional:
    """``u = sin(m(mu)) + 1/2 m2(nu)``: only the Lions-derivative terms act."""
    return _no_phi("measure", ((1.0, sin_of_mean(d1), None), (1.0, None, half_second_moment(d2))))


def mixed_functional(d1: int = 1, d2: int = 1) -> ItoFunctional:
    """``u = sin(x_0) cos(y_0) + m(mu)_0 m(nu)_0``."""

    def dx(x, y):
        out = np.zeros_like(x)
        out[:, 0] = np.cos(x[:, 0]) * np.cos(y[:, 0])
        return out

    def dxx(x, y):
        out = _zeros_like_rows(x.shape[0], x.shape[1], x.shape[1])
        out[:, 0, 0] = -np.sin(x[:, 0]) * np.cos(y[:, 0])
        return out

    def dy(x, y):
        out = np.zeros_like(y)
        out[:, 0] = -np.sin(x[:, 0]) * np.sin(y[:, 0])
        return out

    def dyy(x, y):
        out = _zeros_like_rows(y.shape[0], y.shape[1], y.shape[1])
        out[:, 0, 0] = -np.sin(x[:, 0]) * np.cos(y[:, 0])
        return out

    def dydx(x, y):
        out = _zeros_like_rows(x.shape[0], y.shape[1], x.shape[1])
        out[:, 0, 0] = -np.cos(x[:, 0]) * np.sin(y[:, 0])
        return out

    return ItoFunctional(
        name="mixed", phi=lambda x, y: np.sin(x[:, 0]) * np.cos(y[:, 0]), phi_dx=dx, phi_dxx=dxx,
        phi_dy=dy, phi_dyy=dyy, phi_dydx=dydx,
        terms=((1.0, mean_functional(d1), mean_functional(d2)),),
    )


def builtin_ito_functionals(d1: int = 1, d2: int = 1) -> list:
    return [bilinear_functional(), measure_functional(d1, d2), mixed_functional(d1, d2)]


def _lions_terms(U: CylinderFunctional, cloud, drift, diff):
    """``mean_k drift_k . dU(cloud_k) + 1/2 mean_k tr(diff_k diff_k^T d dU(cloud_k))``."""
    first = float(np.mean(np.sum(drift * U.lions(cloud), axis=1)))
    a = np.einsum("nij,nkj->nik", diff, diff)
    second = 0.5 * float(np.mean(np.einsum("nij,nji->n", a, U.lions_grad(cloud))))
    return first + second


def ito_generator(model: ModelSpec, u: ItoFunctional, X, Y, epsilon: float = 1.0) -> tuple:
    """Cloud average of every generator term; returns ``(total, cross_term)``."""
    f = model.F(X, X, Y, Y)
    g = model.G(X, X, Y)
    s1 = model.sigma1(X, Y, Y) / epsilon
    s2 = model.sigma2(X, Y, Y) / epsilon
    by = model.c(X, X, Y, Y) / epsilon + model.b(X, Y, Y) / epsilon**2
    gg = np.einsum("nij,nkj->nik", g, g)
    aa = np.einsum("nij,nkj->nik", s1, s1) + np.einsum("nij,nkj->nik", s2, s2)
    gs = np.einsum("nij,nkj->nik", g, s1)  # (n, d1, d2)
    point = (np.sum(f * u.phi_dx(X, Y), axis=1)
             + 0.5 * np.einsum("nij,nji->n", gg, u.phi_dxx(X, Y))
             + np.sum(by * u.phi_dy(X, Y), axis=1)
             + 0.5 * np.einsum("nij,nji->n", aa, u.phi_dyy(X, Y)))
    cross = float(np.mean(np.einsum("nkj,njk->n", gs, u.phi_dydx(X, Y))))
    total = float(np.mean(point)) + cross
    ydiff = np.concatenate([s1, s2], axis=2)
    for coef, U, V in u.terms:
        uval = U.value(X) if U else 1.0
        vval = V.value(Y) if V else 1.0
        if U is not None:
            total += coef * vval * _lions_terms(U, X, f, g)
        if V is not None:
            total += coef * uval * _lions_terms(V, Y, by, ydiff)
    return total, cross


@dataclass
class ItoReport:
    name: str
    residual: float
    stderr: float
    residual_without_cross: float
    cross_integral: float
    passed: bool
    cross_detected: bool

    def summary(self) -> dict:
        return _jsonable(asdict(self))


def run_ito_check(model: ModelSpec, functionals: Optional[list], T: float, N: int, replicas: int,
                  plan: NoisePlan, *, dt: float = 1e-3, epsilon: float = 1.0, workers: int = 1,
                  init_x: InitLaw = InitLaw(), init_y: InitLaw = InitLaw()) -> list:
    """Compare ``E u(T) - E u(0)`` with the integrated generator along slow-fast runs.

    The residual is averaged over replicas; a functional passes when
    ``|residual| <= 3 stderr``. The same run with the common-noise cross
    term dropped is reported as ``residual_without_cross``.
    """
    funcs = builtin_ito_functionals(model.d1, model.d2) if functionals is None else functionals

    def job(r):
        sub = plan.child("ito", r).with_dt(dt)
        acc = {u.name: [0.0, 0.0, 0.0, 0.0] for u in funcs}  # u0, uT, integral, cross integral

        def observer(step, t, X, Y, h):
            for u in funcs:
                a = acc[u.name]
                if step == 0:
                    a[0] = float(np.mean(u.value(X, X, Y, Y)))
                a[1] = float(np.mean(u.value(X, X, Y, Y)))
                if t < T - 0.5 * h:
                    gen, cross = ito_generator(model, u, X, Y, epsilon)
                    a[2] += gen * h
                    a[3] += cross * h

        simulate_slow_fast(model, epsilon, N, T, sub, snapshot_times=[T], init_x=init_x, init_y=init_y,
                           observer=observer, h_max=max(0.1, dt / epsilon**2))
        return {k: (v[1] - v[0] - v[2], v[3]) for k, v in acc.items()}

    out = run_jobs(job, list(range(replicas)), workers)
    reports = []
    for u in funcs:
        res = [o[u.name][0] for o in out]
        crosses = [o[u.name][1] for o in out]
        m, se = _mean_se(res)
        m_no, se_no = _mean_se([a + b for a, b in zip(res, crosses)])
        reports.append(ItoReport(u.name, m, se, m_no, float(np.mean(crosses)), abs(m) <= 3 * se,
                                 abs(m_no) > 3 * max(se_no, 1e-300)))
    return reports


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
