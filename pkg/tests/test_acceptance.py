"""Acceptance criteria at their stated tolerances.

Each test prints one ``ACCEPTANCE <criterion>: PASS|FAIL ...`` line (also
collected into the terminal summary) and then asserts the verdict.
"""

import time

import numpy as np
import pytest

from slowfast_mv.corrector import (BenchmarkLimitProvider, FeynmanKacCorrector, assemble_limit_coefficients,
                                   benchmark_averaged,
                                   corrector_derivatives, poisson_residual, sqrt_psd)
from slowfast_mv.engine import InitLaw
from slowfast_mv.ergodic import estimate_invariant_measure
from slowfast_mv.experiments import (limit_moment_oracle, run_ergodic_decay,
                                     run_fluctuation_estimate, run_ito_check, run_strong_rate, run_weak_clt_rate)
from slowfast_mv.measure import (half_second_moment, lions_derivative_cylinder, lions_derivative_fd,
                                 mean_functional, sin_of_mean, wasserstein2)
from slowfast_mv.measure import _w2_1d, _w2_assignment
from slowfast_mv.model import LinearBenchmark
from slowfast_mv.rng import NoisePlan

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.slow

GRID = [0.4, 0.28, 0.2, 0.14, 0.1]


def report(name, ok, detail):
    line = f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def test_strong_averaging_rate():
    b = LinearBenchmark()
    t0 = time.perf_counter()
    rep = run_strong_rate(b.model, benchmark_averaged(b), GRID, 2000, 1.0, 16, NoisePlan(20260101, 1e-3), h=0.05)
    wall = time.perf_counter() - t0
    ok = rep.passes(0.8, 1.2) and wall <= 600
    assert report("strong-rate", ok,
                  f"slope={rep.slope:.3f} ci95=[{rep.fit.ci95[0]:.3f},{rep.fit.ci95[1]:.3f}] band=[0.8,1.2] "
                  f"wall={wall:.0f}s")


def test_weak_clt_rate():
    b = LinearBenchmark().example_i()
    oracle = limit_moment_oracle(b, 1.0)[1]
    t0 = time.perf_counter()
    rep = run_weak_clt_rate(b.model, benchmark_averaged(b), BenchmarkLimitProvider(b), GRID, 4000, 1.0, 32,
                            NoisePlan(20260102, 1e-3), h=0.05, init_y=InitLaw(1.0, 1.0),
                            oracle_second_moment=oracle)
    wall = time.perf_counter() - t0
    slopes = {k: v["slope"] for k, v in rep.extra["statistics"].items()}
    slopes_ok = all(0.6 <= s <= 1.4 for s in slopes.values())
    ok = slopes_ok and rep.extra["oracle_ok"] and wall <= 1200
    detail = " ".join(f"{k}={v:.3f}" for k, v in slopes.items())
    assert report("weak-clt-rate", ok,
                  f"{detail} band=[0.6,1.4] E(Zbar^2)={rep.extra['limit_second_moment']:.5f}"
                  f"+-{rep.extra['limit_second_moment_stderr']:.5f} oracle={oracle:.5f} wall={wall:.0f}s")


@pytest.mark.parametrize("params", [{}, {"b2": 0.5, "Bbar": 0.5}], ids=["default", "b2-Bbar"])
def test_corrector_oracle_equivalence(params):
    b = LinearBenchmark(**params)
    p, q = b.pq
    mu = np.ones((32, 1))
    zeta = estimate_invariant_measure(b.model, mu, 1000, None, NoisePlan(31, 0.01))
    field = FeynmanKacCorrector(b.model, benchmark_averaged(b), NoisePlan(32, 0.02), M=2000)
    rng = np.random.default_rng(33)
    m_star = b.m_star(1.0)
    fails = []
    worst = 0.0
    for k in range(10):
        y = m_star + rng.normal(0.0, 1.0)
        nu = zeta.samples + rng.normal(0.0, 0.5)
        x = [[rng.normal()]]
        phi = field.phi(x, mu, [y], nu)
        target = p * (y - m_star) + q * (float(nu.mean()) - m_star)
        d = corrector_derivatives(field, x, mu, [y], nu)
        r, se = poisson_residual(b.model, field, x, mu, [y], nu)
        checks = {
            "phi": phi.within(target),
            "dyPhi": d.dyPhi.within(p),
            "dxdyPhi": d.dxdyPhi.within(0.0),
            "dnuPhi": d.dnuPhi.within(q),
            "residual": bool(np.all(np.abs(r) <= 3 * se)),
        }
        worst = max(worst, phi.zscore(target), d.dyPhi.zscore(p), d.dnuPhi.zscore(q),
                    float(np.max(np.abs(r) / np.maximum(se, 1e-300))))
        fails += [f"{name}@{k}" for name, ok in checks.items() if not ok]
    tag = "default" if not params else "b2=0.5,Bbar=0.5"
    assert report(f"corrector-oracle[{tag}]", not fails,
                  f"probes=10 p={p:.4f} q={q:.4f} max|z|={worst:.2f} failures={fails or 'none'}")


def test_limit_coefficient_assembly():
    mu = np.ones((32, 1))
    results = []
    for label, b in (("sigma2-only", LinearBenchmark(s1=0.0)), ("sigma1-only", LinearBenchmark(s2=0.0))):
        zeta = estimate_invariant_measure(b.model, mu, 1000, None, NoisePlan(41, 0.01))
        field = FeynmanKacCorrector(b.model, benchmark_averaged(b), NoisePlan(42, 0.02), M=2000)
        co = assemble_limit_coefficients(b.model, field, mu, zeta)
        p = b.B / b.kappa
        sig = float(co.Sigma.ravel()[0])
        sig_se = float(co.stderr["Sigma"].ravel()[0])
        if label == "sigma2-only":
            ok = co.within("Sigma", (p * b.s2) ** 2)
            results.append((ok, f"{label}: Sigma={sig:.5f}+-{sig_se:.1e} target={(p * b.s2) ** 2:.5f}"))
        else:
            s1v = float(co.dyPhi_sigma1.ravel()[0])
            ok = co.within("Sigma", 0.0) and co.within("dyPhi_sigma1", p * b.s1) and abs(s1v) > 0
            results.append((ok, f"{label}: Sigma={sig:.2e}+-{sig_se:.1e} dyPhi_sigma1={s1v:.5f} "
                                f"target={p * b.s1:.5f}"))
    ok = all(r[0] for r in results)
    assert report("limit-assembly", ok, "; ".join(r[1] for r in results))


def test_ergodicity():
    b = LinearBenchmark()
    rep = run_ergodic_decay(b.model, np.ones((32, 1)), 4.0, NoisePlan(51, 1e-3), N=2000)
    m_star, v_star = b.m_star(1.0), b.v_star
    rate_ok = abs(rep.rate - b.kappa) <= 0.3 * b.kappa
    r2_ok = rep.law_r_squared >= 0.9
    mean_ok = abs(rep.zeta_mean[0] - m_star) <= 3 * rep.zeta_mean_stderr[0]
    var_ok = abs(rep.zeta_var[0] - v_star) <= 3 * rep.zeta_var_stderr[0]
    ok = rate_ok and r2_ok and mean_ok and var_ok
    assert report("ergodicity", ok,
                  f"coupling_rate={rep.rate:.3f} (kappa={b.kappa}) law_R2={rep.law_r_squared:.4f} "
                  f"mean={rep.zeta_mean[0]:.4f}+-{rep.zeta_mean_stderr[0]:.4f} (m*={m_star}) "
                  f"var={rep.zeta_var[0]:.4f}+-{rep.zeta_var_stderr[0]:.4f} (v*={v_star})")


def test_fluctuation_estimate():
    b = LinearBenchmark()
    rep = run_fluctuation_estimate(b.model, benchmark_averaged(b), GRID, 2000, 1.0, 16, NoisePlan(61, 1e-3),
                                   h=0.05)
    assert report("fluctuation", rep.passes(0.7, 1.3),
                  f"slope={rep.slope:.3f} ci95=[{rep.fit.ci95[0]:.3f},{rep.fit.ci95[1]:.3f}] band=[0.7,1.3]")


def test_ito_formula_check():
    b = LinearBenchmark()
    reps = run_ito_check(b.model, None, 1.0, 2000, 16, NoisePlan(71, 1e-3))
    passed = all(r.passed for r in reps)
    bil = next(r for r in reps if r.name == "bilinear")
    ok = passed and bil.cross_detected
    detail = " ".join(f"{r.name}={r.residual:.1e}+-{r.stderr:.1e}" for r in reps)
    assert report("ito-check", ok,
                  f"{detail} bilinear_without_cross={bil.residual_without_cross:.3f} detected={bil.cross_detected}")


def _determinism(workers_list):
    b = LinearBenchmark()
    avg = benchmark_averaged(b)
    grid = [0.4, 0.28, 0.2]
    runs = {
        "strong": lambda w: run_strong_rate(b.model, avg, grid, 100, 0.2, 4, NoisePlan(81, 1e-3), h=0.1,
                                            workers=w).raw,
        "weak": lambda w: run_weak_clt_rate(b.example_i().model, benchmark_averaged(b.example_i()),
                                            BenchmarkLimitProvider(b.example_i()), grid, 100, 0.2, 4,
                                            NoisePlan(82, 1e-3), h=0.1, dt_limit=1e-2, workers=w).raw,
        "fluctuation": lambda w: run_fluctuation_estimate(b.model, avg, grid, 100, 0.2, 4, NoisePlan(83, 1e-3),
                                                          h=0.1, workers=w).raw,
        "ito": lambda w: [r.summary() for r in run_ito_check(b.model, None, 0.05, 100, 4, NoisePlan(84, 1e-3),
                                                             workers=w)],
    }
    bad = []
    for name, fn in runs.items():
        outs = [fn(w) for w in workers_list]
        if not all(o == outs[0] for o in outs[1:]):
            bad.append(name)
    return bad


def test_property_suites():
    rng = np.random.default_rng(91)
    axiom_err = 0.0
    for _ in range(200):
        dim = int(rng.integers(1, 3))
        n = int(rng.integers(1, 8))
        a, bb, c = (rng.normal(size=(n, dim)) * rng.uniform(0.1, 5) for _ in range(3))
        ab = wasserstein2(a, bb, mode="exact")
        axiom_err = max(axiom_err, float(wasserstein2(a, a, mode="exact")),
                        abs(ab - wasserstein2(bb, a, mode="exact")),
                        float(wasserstein2(a, c, mode="exact")) - ab - float(wasserstein2(bb, c, mode="exact")),
                        -float(ab))
    sorted_err = 0.0
    for _ in range(200):
        a = rng.normal(size=(int(rng.integers(1, 9)), 1)) * 3
        bb = rng.normal(size=(int(rng.integers(1, 9)), 1)) * 3 + 1
        sorted_err = max(sorted_err, abs(_w2_1d(a[:, 0], bb[:, 0]) - _w2_assignment(a, bb)))
    lions_err = 0.0
    for u in (mean_functional(2), half_second_moment(2), sin_of_mean(2, 1)):
        cloud = rng.normal(size=(12, 2))
        for at in range(12):
            fd = lions_derivative_fd(u.value, cloud, at, delta=1e-6)
            lions_err = max(lions_err, float(np.max(np.abs(lions_derivative_cylinder(u, cloud, at) - fd))))
    psd_err = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 6))
        A = rng.normal(size=(d, d)) * rng.uniform(0.1, 3)
        S = A @ A.T
        R = sqrt_psd(S)
        psd_err = max(psd_err, float(np.max(np.abs(R @ R - S))))
    bad = _determinism([1, 2, 8])
    ok = axiom_err <= 1e-12 and sorted_err <= 1e-12 and lions_err <= 1e-4 and psd_err <= 1e-8 and not bad
    assert report("property-suites", ok,
                  f"w2_axioms={axiom_err:.1e} sorted_vs_assignment={sorted_err:.1e} lions_fd={lions_err:.1e} "
                  f"sqrt_psd={psd_err:.1e} workers_1_2_8_nondeterministic={bad or 'none'}")
