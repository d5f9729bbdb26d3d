import math

import numpy as np
import pytest

from slowfast_mv.corrector import benchmark_averaged
from slowfast_mv.ergodic import (check_centering, decay_curve, estimate_invariant_measure, estimate_mixing_rate,
                                 fit_log_linear, save_decay_csv)
from slowfast_mv.errors import DegenerateFit, Unconverged
from slowfast_mv.measure import wasserstein2
from slowfast_mv.model import LinearBenchmark, benchmark_corrector
from slowfast_mv.rng import NoisePlan

MU1 = np.ones((32, 1))


def test_invariant_benchmark_oracle(bench):
    est = estimate_invariant_measure(bench.model, MU1, 4000, None, NoisePlan(1, 1e-3))
    m_star, v_star = 0.5, (bench.s1**2 + bench.s2**2) / 4
    assert abs(est.mean()[0] - m_star) <= 3 * est.mean_stderr()[0]
    assert abs(est.variance()[0] - v_star) <= 3 * est.variance_stderr()[0]
    assert est.converged


def test_zero_noise_collapses_to_fixed_point():
    b = LinearBenchmark(s1=0.0, s2=0.0)
    H = 3.0
    est = estimate_invariant_measure(b.model, MU1, 200, H, NoisePlan(2, 1e-3))
    start = NoisePlan(2, 1e-3).normals("zeta_init", 0, 200, 1)
    w_start = float(wasserstein2(start, [[0.5]]))
    assert float(wasserstein2(est.zeta, [[0.5]])) <= math.exp(-b.kappa * est.horizon) * w_start * 1.01


def test_second_moment_scaling_bound(bench):
    ratios = []
    for scale in (0.5, 1.0, 2.0, 4.0, 8.0):
        est = estimate_invariant_measure(bench.model, scale * MU1, 2000, None, NoisePlan(3, 1e-2))
        w_zeta = float(np.mean(est.samples**2))
        w_mu = scale**2
        ratios.append(w_zeta / (1 + w_mu))
    assert max(ratios) <= 1.0
    assert max(ratios) / min(ratios) <= 2.5


def test_unconverged_strict_and_flagged(bench):
    with pytest.raises(Unconverged):
        estimate_invariant_measure(bench.model, MU1, 100, 0.1, NoisePlan(4, 1e-2), threshold=0.0,
                                   max_doublings=0)
    est = estimate_invariant_measure(bench.model, MU1, 100, 0.1, NoisePlan(4, 1e-2), threshold=0.0,
                                     max_doublings=0, strict=False, use_cache=False)
    assert not est.converged


def test_cache_returns_same_object(bench):
    a = estimate_invariant_measure(bench.model, MU1, 500, None, NoisePlan(5, 1e-2))
    b = estimate_invariant_measure(bench.model, MU1.copy(), 500, None, NoisePlan(5, 1e-2))
    assert a is b


def test_mixing_rate_matches_kappa():
    plan = NoisePlan(6, 1e-3)
    a = plan.normals("a", 0, 1000, 1)
    b = 3.0 + 0.5 * plan.normals("b", 0, 1000, 1)
    rates = {}
    for kappa in (2.0, 4.0):
        fit = estimate_mixing_rate(LinearBenchmark(kappa=kappa).model, MU1, a, b, 2.0, plan)
        rates[kappa] = fit.rate
        assert fit.r_squared > 0.99
    assert abs(rates[2.0] - 2.0) <= 0.15 * 2.0
    assert rates[4.0] >= 2 * rates[2.0] * 0.95


def test_mixing_rate_degenerate_for_identical_starts(bench):
    a = np.random.default_rng(0).standard_normal((50, 1))
    with pytest.raises(DegenerateFit):
        estimate_mixing_rate(bench.model, MU1, a, a.copy(), 1.0, NoisePlan(7, 1e-2))


def test_fit_log_linear_exact():
    t = np.linspace(0, 2, 11)
    rate, r2, mask = fit_log_linear(t, 3.0 * np.exp(-1.7 * t))
    assert rate == pytest.approx(1.7, abs=1e-12) and r2 == pytest.approx(1.0, abs=1e-12) and mask.all()
    with pytest.raises(DegenerateFit):
        fit_log_linear(t, np.exp(-t), floor=0.5)


def test_stationary_start_stays_at_floor(bench):
    plan = NoisePlan(8, 1e-3)
    est = estimate_invariant_measure(bench.model, MU1, 2000, None, plan.child("zeta"))
    z = est.samples
    floor = float(wasserstein2(z[0::2], z[1::2]))
    t, w = decay_curve(bench.model, MU1, z, est, 1.0, plan.child("decay"), grid_points=10)
    assert w[0] == 0.0
    assert np.max(w) <= 3 * floor


def test_centering_of_fluctuation_and_corrector(bench):
    est = estimate_invariant_measure(bench.model, MU1, 4000, None, NoisePlan(9, 1e-3))
    avg = benchmark_averaged(bench)
    x = np.array([[0.3]])

    def delta_f(xs, mu, y, nu):
        return bench.model.F(xs, mu, y, nu) - avg.F_bar(xs, mu)

    r, se = check_centering(bench.model, delta_f, x, MU1, est)
    assert np.all(np.abs(r) <= 3 * se)

    r0, se0 = check_centering(bench.model, lambda xs, mu, y, nu: np.zeros_like(xs), x, MU1, est)
    assert np.all(r0 == 0) and np.all(se0 == 0)

    p, q = benchmark_corrector(bench, 1.0)
    m_star = bench.m_star(1.0)

    def phi(xs, mu, y, nu):
        return p * (y - m_star) + q * (nu.mean(axis=0) - m_star)

    r, se = check_centering(bench.model, phi, x, MU1, est)
    assert np.all(np.abs(r) <= 3 * se)


def test_decay_csv(tmp_path):
    save_decay_csv(tmp_path / "d.csv", [0.0, 1.0], [1.0, 0.0])
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "t,W2,log_W2" and lines[2].endswith("-inf")
