import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from slowfast_mv.corrector import (BenchmarkCorrector, ConstantLimitProvider, FeynmanKacCorrector,
                                   MonteCarloAveraged, MonteCarloLimitProvider, assemble_limit_coefficients,
                                   averaged_coefficients, benchmark_averaged, corrector_derivatives,
                                   poisson_residual, save_limit_coefficients_csv, solve_poisson_feynman_kac,
                                   sqrt_psd)
from slowfast_mv.ergodic import estimate_invariant_measure
from slowfast_mv.errors import NegativeBeyondTolerance, NotCLTCompatible, NotSymmetric, TailNotConverged
from slowfast_mv.model import LinearBenchmark, benchmark_corrector
from slowfast_mv.rng import NoisePlan

from conftest import decoupled_benchmark

MU1 = np.ones((32, 1))


def fk(bench, M=2000, seed=0, **kw):
    return FeynmanKacCorrector(bench.model, benchmark_averaged(bench), NoisePlan(seed, 0.02), M=M, **kw)


def zeta_for(bench, N=1000, seed=1):
    return estimate_invariant_measure(bench.model, MU1, N, None, NoisePlan(seed, 0.01))


def closed_phi(bench, y, nu):
    p, q = benchmark_corrector(bench, 1.0)
    m = bench.m_star(1.0)
    return p * (y - m) + q * (float(np.mean(nu)) - m)


def test_phi_vanishes_exactly_without_fluctuation():
    b = decoupled_benchmark()
    z = zeta_for(b).samples
    est = fk(b, M=200).phi([[0.2]], MU1, [0.7], z)
    assert np.all(est.value == 0.0) and np.all(est.stderr == 0.0)


@pytest.mark.parametrize("params", [{}, {"b2": 0.5, "Bbar": 0.5}])
def test_phi_matches_linear_ansatz(params):
    b = LinearBenchmark(**params)
    nu = zeta_for(b).samples + 0.3
    for y in (-0.5, 0.5, 1.5):
        est = fk(b).phi([[0.0]], MU1, [y], nu)
        assert abs(est.value[0] - closed_phi(b, y, nu)) <= 3 * est.stderr[0]


def test_solve_poisson_wrapper(bench):
    z = zeta_for(bench).samples
    phi, se = solve_poisson_feynman_kac(bench.model, [[0.0]], MU1, [1.0], z, M=2000,
                                        plan=NoisePlan(2, 0.02), avg=benchmark_averaged(bench))
    assert abs(phi[0] - closed_phi(bench, 1.0, z)) <= 3 * se[0]


def test_phi_is_centred_under_invariant_measure(bench):
    est = zeta_for(bench, N=2000)
    z = est.samples
    res = fk(bench, M=400).integrate([[0.0]], MU1, z[:64], z)
    per_path = res.full[0].mean(axis=0)[:, 0]
    se = per_path.std(ddof=1) / math.sqrt(per_path.size)
    # the outer average over y ~ zeta adds its own spread
    y_spread = res.full[0].mean(axis=1)[:, 0].std(ddof=1) / math.sqrt(64)
    assert abs(per_path.mean()) <= 3 * math.hypot(se, y_spread)


def test_short_horizon_fails_tail_check(bench):
    field = fk(bench, M=200, horizon=0.1)
    with pytest.raises(TailNotConverged):
        field.phi([[0.0]], MU1, [3.0], zeta_for(bench).samples)
    lax = fk(bench, M=200, horizon=0.1, strict_tail=False)
    lax.phi([[0.0]], MU1, [3.0], zeta_for(bench).samples)
    assert lax.tail_flagged


def test_derivatives_match_closed_form(bench):
    z = zeta_for(bench).samples
    d = corrector_derivatives(fk(bench), [[0.0]], MU1, [0.4], z)
    p, q = benchmark_corrector(bench, 1.0)
    assert d.dyPhi.within(p)
    assert d.dxdyPhi.within(0.0)
    assert d.dnuPhi.within(q)
    assert d.dyPhi.value.shape == (1, 1) and d.dxdyPhi.value.shape == (1, 1, 1)


def test_derivatives_vanish_without_fluctuation():
    b = decoupled_benchmark()
    z = zeta_for(b).samples
    d = corrector_derivatives(fk(b, M=100), [[0.0]], MU1, [0.4], z)
    for est in (d.dyPhi, d.dxdyPhi, d.dnuPhi):
        assert np.all(est.value == 0.0)


def test_averaged_coefficients_benchmark_value(bench):
    zeta = zeta_for(bench, N=4000)
    avg = averaged_coefficients(bench.model, MU1, zeta, inner=4000)
    fbar = avg.F_bar(np.zeros((1, 1)), MU1)[0, 0]
    z = zeta.samples
    se = bench.B * z.std(ddof=1) / math.sqrt(z.shape[0])
    assert abs(fbar - 1.0) <= 3 * se


def test_averaged_coefficients_exact_for_decoupled_drift():
    b = decoupled_benchmark()
    zeta = zeta_for(b)
    avg = averaged_coefficients(b.model, MU1, zeta)
    x = np.array([[0.3], [-1.2]])
    # averaging identical rows, so equal up to summation rounding
    assert np.allclose(avg.F_bar(x, MU1), b.model.F(x, MU1, np.zeros_like(x), zeta.samples), rtol=0, atol=1e-14)


def test_monte_carlo_averaged_derivatives(bench):
    avg = MonteCarloAveraged(bench.model, NoisePlan(3, 0.01), N_zeta=2000)
    x = np.zeros((1, 1))
    assert avg.dx_F_bar(x, MU1)[0, 0, 0] == pytest.approx(bench.A, abs=1e-8)
    v = np.ones_like(MU1)
    # finite burn-in leaves a factor 1 - exp(-kappa * burn_in) on the mean response
    assert avg.dmu_F_bar_apply(x, MU1, v)[0, 0] == pytest.approx(bench.averaged_mean_rate, rel=1e-2)


def test_poisson_residual_closed_form_exact():
    for params in ({}, {"b2": 0.5, "Bbar": 0.5}):
        b = LinearBenchmark(**params)
        nu = np.random.default_rng(0).standard_normal((50, 1)) + 0.4
        r, se = poisson_residual(b.model, BenchmarkCorrector(b), [[0.1]], MU1, [0.8], nu)
        assert np.all(np.abs(r) <= 1e-8)


def test_poisson_residual_zero_field():
    b = decoupled_benchmark()
    z = zeta_for(b).samples
    r, se = poisson_residual(b.model, fk(b, M=50), [[0.0]], MU1, [0.2], z)
    assert np.all(r == 0.0)


def test_poisson_residual_monte_carlo_small():
    b = LinearBenchmark(b2=0.5, Bbar=0.5)
    z = zeta_for(b).samples
    r, se = poisson_residual(b.model, fk(b), [[0.0]], MU1, [0.9], z)
    assert np.all(np.abs(r) <= 3 * se)


def test_sqrt_psd_examples():
    assert np.allclose(sqrt_psd(np.eye(3)), np.eye(3), atol=1e-15)
    assert np.allclose(sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)
    assert np.allclose(sqrt_psd(np.diag([1.0, -1e-12])), np.diag([1.0, 0.0]))


def test_sqrt_psd_errors():
    with pytest.raises(NotSymmetric):
        sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(NegativeBeyondTolerance):
        sqrt_psd(np.diag([1.0, -1e-3]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5).flatmap(lambda d: arrays(float, (d, d), elements=st.floats(-3, 3))))
def test_sqrt_psd_reconstruction(A):
    S = A @ A.T
    R = sqrt_psd(S)
    assert np.max(np.abs(R @ R - S)) <= 1e-8
    assert np.allclose(R, R.T)


def test_sqrt_psd_batched():
    S = np.stack([np.diag([4.0, 1.0]), np.eye(2)])
    assert np.allclose(sqrt_psd(S), np.stack([np.diag([2.0, 1.0]), np.eye(2)]))


def test_assembly_independent_noise_only():
    b = LinearBenchmark(s1=0.0)
    co = assemble_limit_coefficients(b.model, fk(b), MU1, zeta_for(b))
    p = b.B / b.kappa
    assert co.within("Sigma", (p * b.s2) ** 2)
    assert co.within("dyPhi_sigma1", 0.0)
    assert co.within("cbar_dyPhi", b.c0 * p)
    assert co.within("sigma1_dxdyPhi", 0.0)


def test_assembly_common_noise_only():
    b = LinearBenchmark(s2=0.0)
    co = assemble_limit_coefficients(b.model, fk(b), MU1, zeta_for(b))
    p = b.B / b.kappa
    assert co.within("Sigma", 0.0)
    assert co.within("dyPhi_sigma1", p * b.s1)
    assert abs(co.dyPhi_sigma1[0, 0, 0]) > 0.1


def test_assembly_measure_term():
    b = LinearBenchmark(b2=0.5, Bbar=0.5)
    co = assemble_limit_coefficients(b.model, fk(b), MU1, zeta_for(b))
    p, q = b.pq
    assert co.within("cbarbar_dnuPhi", b.c0 * q)
    assert co.within("cbar_dyPhi", b.c0 * p)


def test_assembly_without_fast_drift():
    b = LinearBenchmark(c0=0.0)
    co = assemble_limit_coefficients(b.model, fk(b, M=500), MU1, zeta_for(b))
    assert np.all(co.cbar_dyPhi == 0.0) and np.all(co.cbarbar_dnuPhi == 0.0)


def test_assembly_requires_clt_compatible(bench):
    m = bench.model
    m = type(m)(**{**m.__dict__, "clt_compatible": False})
    with pytest.raises(NotCLTCompatible):
        assemble_limit_coefficients(m, fk(bench), MU1, zeta_for(bench))


def test_constant_provider_matches_closed_form(bench, tmp_path):
    co = assemble_limit_coefficients(bench.model, fk(bench), MU1, zeta_for(bench))
    terms = ConstantLimitProvider(co).evaluate(np.zeros((3, 1)), MU1)
    p, q = bench.pq
    assert terms.drift_const.shape == (3, 1)
    assert terms.sqrt_sigma[0, 0, 0] == pytest.approx(abs(p * bench.s2), abs=5 * float(np.ravel(co.stderr["Sigma"])[0]) + 1e-3)
    save_limit_coefficients_csv(tmp_path / "c.csv", co)
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "x,mu_hash,quantity,value,stderr" and len(rows) > 8


def test_monte_carlo_provider_interpolates_constant_terms(bench):
    provider = MonteCarloLimitProvider(bench.model, fk(bench, M=500), NoisePlan(4, 0.01), nodes=3)
    xbar = np.linspace(-1, 1, 7)[:, None]
    terms = provider.evaluate(xbar, MU1)
    assert terms.dyPhi_sigma1.shape == (7, 1, 1)
    assert np.allclose(terms.dyPhi_sigma1, terms.dyPhi_sigma1[0])


class _Linear2DAveraged:
    def __init__(self, A, g0):
        self.A, self.g0 = A, g0

    def F_bar(self, x, mu):
        return x @ self.A.T

    def G_bar(self, x, mu):
        return np.broadcast_to(self.g0 * np.eye(2), (x.shape[0], 2, 2)).copy()


def test_assembly_two_dimensional_sigma_is_full_matrix():
    from slowfast_mv.model import ModelSpec

    A = -np.eye(2)
    Bm = np.array([[1.0, 0.5], [0.0, 1.0]])
    kappa, s2 = 2.0, 0.5
    model = ModelSpec(
        d1=2, d2=2, c1=0.0, c2=2 * kappa, clt_compatible=True,
        F=lambda x, mu, y, nu: x @ A.T + y @ Bm.T,
        G=lambda x, mu, nu: np.broadcast_to(0.3 * np.eye(2), (x.shape[0], 2, 2)).copy(),
        c=lambda x, mu, y, nu: np.zeros_like(y),
        b=lambda mu, y, nu: -kappa * y,
        sigma1=lambda mu, y, nu: np.zeros((y.shape[0], 2, 2)),
        sigma2=lambda mu, y, nu: np.broadcast_to(s2 * np.eye(2), (y.shape[0], 2, 2)).copy(),
    )
    mu = np.zeros((16, 2))
    zeta = estimate_invariant_measure(model, mu, 500, None, NoisePlan(5, 0.01))
    field = FeynmanKacCorrector(model, _Linear2DAveraged(A, 0.3), NoisePlan(6, 0.02), M=500)
    co = assemble_limit_coefficients(model, field, mu, zeta)
    expected = (s2 / kappa) ** 2 * Bm @ Bm.T
    assert co.Sigma.shape == (1, 2, 2)
    assert co.within("Sigma", expected[None])
    assert np.allclose(co.sqrtSigma[0] @ co.sqrtSigma[0], co.Sigma[0], atol=1e-10)
