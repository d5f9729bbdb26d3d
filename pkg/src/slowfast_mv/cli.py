"""Command-line entry point: ``slowfast-mv CONFIG [key=value ...]``.

Exit status is 0 when the run passes its thresholds, 2 when it completes but
fails a threshold, and 1 on any error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import apply_overrides, config_fingerprint, load_config, validate_config
from .corrector import (BenchmarkLimitProvider, ConstantLimitProvider, FeynmanKacCorrector, MonteCarloAveraged,
                        MonteCarloLimitProvider, assemble_limit_coefficients, benchmark_averaged,
                        corrector_derivatives, save_limit_coefficients_csv)
from .engine import InitLaw, simulate_averaged, simulate_frozen, simulate_slow_fast
from .ergodic import estimate_invariant_measure, save_decay_csv
from .errors import ConfigInvalid, SlowFastError
from .experiments import (limit_moment_oracle, run_ergodic_decay, run_fluctuation_estimate, run_ito_check,
                          run_strong_rate, run_weak_clt_rate, write_json)
from .measure import save_cloud_csv
from .model import model_from_config
from .rng import NoisePlan

__all__ = ["main", "run"]

DEFAULT_SLOPE_BANDS = {"strong-rate": (0.8, 1.2), "clt-rate": (0.6, 1.4), "fluctuation": (0.7, 1.3)}


class Context:
    def __init__(self, cfg, out_dir, workers):
        self.cfg = cfg
        self.exp = cfg.get("experiment") or {}
        self.thr = cfg.get("thresholds") or {}
        self.out = out_dir
        self.workers = workers
        model_cfg = dict(cfg["model"])
        mode = model_cfg.pop("mode", "full")
        self.model, self.bench = model_from_config(model_cfg)
        if self.bench is not None and mode != "full":
            if mode == "ex_i":
                self.bench = self.bench.example_i()
            elif mode == "ex_ii":
                self.bench = self.bench.example_ii()
            else:
                raise ConfigInvalid(f"model.mode must be full, ex_i or ex_ii; got {mode!r}", key="model.mode")
            self.model = self.bench.model
        self.seed = int(cfg.get("master_seed", 0))
        self.fingerprint = config_fingerprint(cfg)

    def get(self, key, default=None, cast=float):
        v = self.exp.get(key, default)
        return v if v is None else cast(v)

    def plan(self, dt=None):
        return NoisePlan(self.seed, float(dt if dt is not None else self.get("dt", 1e-3)))

    def init(self, which):
        block = (self.cfg.get("init") or {}).get(which) or {}
        return InitLaw(float(block.get("mean", 0.0)), float(block.get("std", 1.0)))

    def averaged(self):
        if self.bench is not None:
            return benchmark_averaged(self.bench)
        return MonteCarloAveraged(self.model, self.plan(self.get("zeta_dt", 0.01)).child("avg"),
                                  N_zeta=self.get("N_zeta", 512, int))

    def mu_cloud(self):
        n = self.get("N_mu", 256, int)
        return self.get("mu_mean", 1.0) + self.get("mu_std", 0.0) * self.plan().normals("mu", 0, n, self.model.d1)

    def path(self, name):
        return self.out / name


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _verdict(ok):
    return "PASS" if ok else "FAIL"


def _plot(kind, ctx, data):
    if not ctx.cfg.get("plot"):
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    if kind == "rate":
        rep = data
        e = np.asarray(rep.epsilon_grid)
        ax.errorbar(e, rep.errors, yerr=2 * np.asarray(rep.stderrs), fmt="o", label="estimate")
        ax.plot(e, np.exp(rep.fit.intercept) * e**rep.fit.slope, "-", label=f"slope {rep.fit.slope:.2f}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("epsilon")
        ax.set_ylabel("error")
        ax.legend()
        fig.savefig(ctx.path("rate.svg"))
    elif kind == "decay":
        t, w = data
        ax.semilogy(t, w, "o-")
        ax.set_xlabel("t")
        ax.set_ylabel("W2")
        fig.savefig(ctx.path("decay.svg"))
    plt.close(fig)


# commands -------------------------------------------------------------------------------


def cmd_simulate(ctx):
    eps, N, T, h = ctx.get("epsilon"), ctx.get("N", cast=int), ctx.get("T"), ctx.get("h")
    traj = simulate_slow_fast(ctx.model, eps, N, T, ctx.plan(), h=h, init_x=ctx.init("x"), init_y=ctx.init("y"),
                              snapshot_times=ctx.exp.get("snapshot_times"))
    rows = []
    for s, t in enumerate(traj.times):
        for which, arr in (("X", traj.X[s]), ("Y", traj.Y[s])):
            for i in range(arr.shape[0]):
                rows.append([0, t, i, which] + list(arr[i]))
    width = max(ctx.model.d1, ctx.model.d2)
    _write_rows(ctx.path("results.csv"), ["replica", "time", "particle", "which"] + [f"c{j}" for j in range(width)],
                rows)
    summary = {"mean_X_T": traj.X[-1].mean(axis=0), "m4_X_max": float(traj.m4_X.max()),
               "m4_Y_max": float(traj.m4_Y.max()), "dt": traj.dt}
    return True, summary, f"mean_X(T)={float(traj.X[-1].mean()):.4f} m4_max={float(traj.m4_X.max()):.3f} PASS"


def _oracle_check(ctx, samples, mu_mean):
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    summary = {"mean": mean, "mean_stderr": se, "variance": samples.var(axis=0, ddof=1)}
    if ctx.bench is None:
        return True, summary
    m_star = ctx.bench.m_star(mu_mean)
    ok = bool(np.all(np.abs(mean - m_star) <= 3 * se))
    summary["oracle_mean"] = m_star
    summary["oracle_variance"] = ctx.bench.v_star
    return ok, summary


def cmd_frozen(ctx):
    mu = ctx.mu_cloud()
    N, T = ctx.get("N", cast=int), ctx.get("T")
    nu0 = ctx.plan().normals("nu0", 0, N, ctx.model.d2)
    traj = simulate_frozen(ctx.model, mu, nu0, T, ctx.plan())
    save_cloud_csv(ctx.path("results.csv"), traj.Y[-1])
    ok, summary = _oracle_check(ctx, traj.Y[-1], float(mu.mean()))
    return ok, summary, f"mean={float(summary['mean'][0]):.4f} {_verdict(ok)}"


def cmd_invariant(ctx):
    mu = ctx.mu_cloud()
    est = estimate_invariant_measure(ctx.model, mu, ctx.get("N", cast=int), ctx.get("burn_in"), ctx.plan(),
                                     threshold=ctx.get("threshold", 0.05))
    save_cloud_csv(ctx.path("results.csv"), est.zeta)
    ok, summary = _oracle_check(ctx, est.samples, float(mu.mean()))
    if ctx.bench is not None:
        var_ok = bool(np.all(np.abs(est.variance() - ctx.bench.v_star) <= 3 * est.variance_stderr()))
        ok = ok and var_ok
    summary.update(horizon=est.horizon, diagnostic=est.convergence_diagnostic)
    return ok, summary, f"mean={float(est.mean()[0]):.4f} var={float(est.variance()[0]):.4f} {_verdict(ok)}"


def cmd_averaged(ctx):
    N, T = ctx.get("N", cast=int), ctx.get("T")
    x0 = ctx.init("x")
    traj = simulate_averaged(ctx.model, ctx.averaged(), N, T, ctx.plan(), init_x=x0)
    means = traj.X.mean(axis=1)
    _write_rows(ctx.path("results.csv"), ["time"] + [f"mean_{j}" for j in range(ctx.model.d1)],
                [[t] + list(m) for t, m in zip(traj.times, means)])
    ok, summary = True, {"final_mean": means[-1]}
    if ctx.bench is not None:
        # Euler is exact for the mean recursion of the linear benchmark
        rate = ctx.bench.A + ctx.bench.averaged_mean_rate
        n = round(T / traj.dt)
        oracle = float(traj.X[0].mean()) * (1 + rate * traj.dt) ** n
        se = float(traj.X[-1].std(ddof=1)) / np.sqrt(N)
        tol = float(ctx.thr.get("mean_sigmas", 3.0)) * se + 1e-12
        ok = abs(float(means[-1, 0]) - oracle) <= tol
        summary.update(oracle_mean=oracle, tolerance=tol)
    return ok, summary, f"mean(T)={float(means[-1, 0]):.4f} {_verdict(ok)}"


def cmd_corrector(ctx):
    mu = ctx.mu_cloud()
    zplan = ctx.plan(ctx.get("zeta_dt", 0.01))
    zeta = estimate_invariant_measure(ctx.model, mu, ctx.get("N", cast=int), None, zplan.child("zeta"))
    avg = ctx.averaged()
    field_ = FeynmanKacCorrector(ctx.model, avg, ctx.plan().child("fk"), M=ctx.get("M", cast=int),
                                 dt=ctx.get("dt"), horizon=ctx.get("horizon"))
    coeffs = assemble_limit_coefficients(ctx.model, field_, mu, zeta, outer=ctx.get("outer", 32, int))
    save_limit_coefficients_csv(ctx.path("results.csv"), coeffs)
    summary = {k: v for k, v in coeffs.quantities().items()}
    summary["stderr"] = coeffs.stderr
    ok = True
    if ctx.bench is not None:
        b = ctx.bench
        p, q = b.pq
        checks = {"cbar_dyPhi": b.c0 * p, "cbarbar_dnuPhi": b.c0 * q, "dyPhi_sigma1": p * b.s1,
                  "Sigma": (p * b.s2) ** 2, "sigma1_dxdyPhi": 0.0}
        results = {k: coeffs.within(k, v) for k, v in checks.items()}
        ders = corrector_derivatives(field_, mu.mean(axis=0, keepdims=True), mu, zeta.samples[0], zeta.samples)
        results["dyPhi"] = ders.dyPhi.within(p)
        results["dnuPhi"] = ders.dnuPhi.within(q)
        summary["checks"] = results
        ok = all(results.values())
    sig = float(coeffs.Sigma.ravel()[0])
    return ok, summary, f"Sigma={sig:.5f} {_verdict(ok)}"


def _rate_outputs(ctx, rep):
    rep.write_rate_table(ctx.path("rate_table.csv"))
    rep.write_raw(ctx.path("results.csv"))
    lo, hi = ctx.thr.get("slope", DEFAULT_SLOPE_BANDS[rep.name])
    ok = rep.passes(lo, hi)
    _plot("rate", ctx, rep)
    return ok, rep.summary(), f"slope={rep.slope:.2f} [{lo:g},{hi:g}] {_verdict(ok)}"


def _rate_args(ctx):
    return ([float(e) for e in ctx.exp["epsilon_grid"]], ctx.get("N", cast=int), ctx.get("T"),
            ctx.get("replicas", cast=int))


def cmd_strong_rate(ctx):
    grid, N, T, R = _rate_args(ctx)
    rep = run_strong_rate(ctx.model, ctx.averaged(), grid, N, T, R, ctx.plan(), h=ctx.get("h"),
                          workers=ctx.workers, init_x=ctx.init("x"), init_y=ctx.init("y"),
                          halving_probe=bool(ctx.exp.get("halving_probe", True)), fingerprint=ctx.fingerprint)
    return _rate_outputs(ctx, rep)


def _limit_provider(ctx, avg):
    source = (ctx.cfg.get("limit") or {}).get("source", "closed_form" if ctx.bench is not None else "monte_carlo")
    lim = ctx.cfg.get("limit") or {}
    if source == "closed_form":
        if ctx.bench is None:
            raise ConfigInvalid("limit.source closed_form needs the linear benchmark", key="limit.source")
        return BenchmarkLimitProvider(ctx.bench)
    field_ = FeynmanKacCorrector(ctx.model, avg, ctx.plan(float(lim.get("dt", 0.02))).child("fk"),
                                 M=int(lim.get("M", 512)))
    if source == "assembled":
        mu = ctx.init("x").mean + ctx.init("x").std * ctx.plan().normals("mu", 0, 256, ctx.model.d1)
        zeta = estimate_invariant_measure(ctx.model, mu, int(lim.get("N_zeta", 512)), None,
                                          ctx.plan(0.01).child("zeta"))
        return ConstantLimitProvider(assemble_limit_coefficients(ctx.model, field_, mu, zeta))
    if source == "monte_carlo":
        return MonteCarloLimitProvider(ctx.model, field_, ctx.plan(0.01).child("limit_zeta"))
    raise ConfigInvalid(f"limit.source must be closed_form, assembled or monte_carlo; got {source!r}",
                        key="limit.source")


def cmd_clt_rate(ctx):
    grid, N, T, R = _rate_args(ctx)
    avg = ctx.averaged()
    provider = _limit_provider(ctx, avg)
    oracle = limit_moment_oracle(ctx.bench, T)[1] if ctx.bench is not None else None
    refresh = int((ctx.cfg.get("limit") or {}).get("refresh_every", 1))
    rep = run_weak_clt_rate(ctx.model, avg, provider, grid, N, T, R, ctx.plan(), h=ctx.get("h"),
                            dt_limit=ctx.get("dt_limit", 1e-3), refresh_every=refresh, workers=ctx.workers,
                            init_x=ctx.init("x"), init_y=ctx.init("y"), oracle_second_moment=oracle,
                            fingerprint=ctx.fingerprint)
    ok, summary, line = _rate_outputs(ctx, rep)
    stats = rep.extra["statistics"]
    lo, hi = ctx.thr.get("slope", DEFAULT_SLOPE_BANDS["clt-rate"])
    ok = all(lo <= s["slope"] <= hi for s in stats.values()) and rep.extra.get("oracle_ok", True)
    line = f"slope={rep.slope:.2f} [{lo:g},{hi:g}] {_verdict(ok)}"
    return ok, summary, line


def cmd_fluctuation(ctx):
    grid, N, T, R = _rate_args(ctx)
    rep = run_fluctuation_estimate(ctx.model, ctx.averaged(), grid, N, T, R, ctx.plan(), h=ctx.get("h"),
                                   workers=ctx.workers, init_x=ctx.init("x"), init_y=ctx.init("y"),
                                   fingerprint=ctx.fingerprint)
    return _rate_outputs(ctx, rep)


def cmd_ergodic(ctx):
    rep = run_ergodic_decay(ctx.model, ctx.mu_cloud(), ctx.get("T"), ctx.plan(), N=ctx.get("N", cast=int))
    save_decay_csv(ctx.path("results.csv"), rep.law_times, rep.law_w2)
    ref = ctx.thr.get("reference_rate", ctx.bench.kappa if ctx.bench is not None else None)
    r2_min = ctx.thr.get("r2_min", 0.9)
    ok = rep.law_r_squared >= r2_min
    if ref is not None:
        ok = ok and abs(rep.rate - ref) <= ctx.thr.get("rate_rtol", 0.3) * ref
    _plot("decay", ctx, (rep.law_times, rep.law_w2))
    return ok, rep.summary(), f"rate={rep.rate:.3f} R2={rep.law_r_squared:.3f} {_verdict(ok)}"


def cmd_ito_check(ctx):
    reps = run_ito_check(ctx.model, None, ctx.get("T"), ctx.get("N", cast=int), ctx.get("replicas", cast=int),
                         ctx.plan(), dt=ctx.get("dt"), workers=ctx.workers, init_x=ctx.init("x"),
                         init_y=ctx.init("y"))
    _write_rows(ctx.path("results.csv"),
                ["functional", "residual", "stderr", "residual_without_cross", "cross_integral", "passed",
                 "cross_detected"],
                [[r.name, r.residual, r.stderr, r.residual_without_cross, r.cross_integral, r.passed,
                  r.cross_detected] for r in reps])
    ok = all(r.passed for r in reps)
    bil = [r for r in reps if r.name == "bilinear"]
    if bil and ctx.bench is not None and ctx.bench.s1 * ctx.bench.g0 != 0:
        ok = ok and bil[0].cross_detected
    worst = max(abs(r.residual) / max(r.stderr, 1e-300) for r in reps)
    return ok, {r.name: r.summary() for r in reps}, f"max|residual|/stderr={worst:.2f} {_verdict(ok)}"


COMMAND_TABLE = {
    "simulate": cmd_simulate, "frozen": cmd_frozen, "invariant": cmd_invariant, "averaged": cmd_averaged,
    "corrector": cmd_corrector, "strong-rate": cmd_strong_rate, "clt-rate": cmd_clt_rate,
    "fluctuation": cmd_fluctuation, "ergodic": cmd_ergodic, "ito-check": cmd_ito_check,
}


def _output_dir(cfg, override):
    raw = override or cfg.get("output_dir") or f"results/{cfg['command']}"
    path = Path(raw)
    root = os.environ.get("SLOWFAST_OUTPUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def run(config_path, overrides=(), *, workers: int = 1, output_dir=None, stream=None) -> int:
    """Run one experiment from a config file; returns the exit status."""
    stream = stream or sys.stdout
    start = time.perf_counter()
    try:
        cfg = validate_config(apply_overrides(load_config(config_path), overrides))
        out = _output_dir(cfg, output_dir)
        out.mkdir(parents=True, exist_ok=True)
        ctx = Context(cfg, out, max(1, int(workers)))
        ok, summary, line = COMMAND_TABLE[cfg["command"]](ctx)
    except ConfigInvalid as exc:
        print(f"error: invalid config ({exc.key}): {exc}", file=sys.stderr)
        return 1
    except SlowFastError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    wall = time.perf_counter() - start
    write_json(out / "summary.json", {"command": cfg["command"], "passed": ok, "line": line, "summary": summary})
    write_json(out / "manifest.json", {"config": cfg, "config_fingerprint": ctx.fingerprint,
                                       "version": __version__, "wall_clock_seconds": wall,
                                       "workers": ctx.workers})
    print(f"{cfg['command']}: {line}", file=stream)
    return 0 if ok else 2


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="slowfast-mv", description=__doc__.splitlines()[0])
    ap.add_argument("config", help="YAML experiment config")
    ap.add_argument("overrides", nargs="*", help="dotted key=value overrides, e.g. experiment.N=500")
    ap.add_argument("--workers", type=int, default=1, help="worker threads for replica jobs")
    ap.add_argument("--output", default=None, help="output directory (overrides output_dir)")
    args = ap.parse_args(argv)
    return run(args.config, args.overrides, workers=args.workers, output_dir=args.output)


if __name__ == "__main__":
    sys.exit(main())
