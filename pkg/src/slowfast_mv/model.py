"""Coefficient interface for slow-fast McKean-Vlasov models.

All evaluators are vectorised over particles. Points are arrays of shape
``(n, d)``; measures are passed as their sample arrays ``(N, d)`` (equal
weights). Return shapes:

====== ====================== =================
name   arguments              returns
====== ====================== =================
F      (x, mu, y, nu)         ``(n, d1)``
G      (x, mu, nu)            ``(n, d1, d1)``
c      (x, mu, y, nu)         ``(n, d2)``
b      (mu, y, nu)            ``(n, d2)``
sigma1 (mu, y, nu)            ``(n, d2, d1)``
sigma2 (mu, y, nu)            ``(n, d2, d2)``
====== ====================== =================
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .errors import ConfigInvalid, DegenerateModel, NonFiniteCoefficient

__all__ = [
    "ModelSpec",
    "LinearBenchmark",
    "ValidationReport",
    "validate_dissipativity",
    "check_clt_compatibility",
    "benchmark_frozen_stationary",
    "benchmark_corrector",
    "register_model",
    "registered_models",
    "model_from_config",
]


@dataclass(frozen=True, eq=False)
class ModelSpec:
    d1: int
    d2: int
    F: Callable
    G: Callable
    c: Callable
    b: Callable
    sigma1: Callable
    sigma2: Callable
    c1: float
    c2: float
    clt_compatible: bool = False
    lipschitz_bound: float = 1.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d1 < 1 or self.d2 < 1:
            raise DegenerateModel(f"dimensions must be >= 1, got d1={self.d1}, d2={self.d2}")
        if not (self.c2 > self.c1 >= 0):
            raise DegenerateModel(f"need c2 > c1 >= 0, got c1={self.c1}, c2={self.c2}")
        if not self.lipschitz_bound > 0:
            raise DegenerateModel("lipschitz_bound must be positive")

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(
            {"name": self.name, "params": self.params, "d1": self.d1, "d2": self.d2,
             "c1": self.c1, "c2": self.c2},
            sort_keys=True, default=float,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def mixing_scale(self) -> float:
        """``c2 - c1``: the squared-distance contraction rate of the frozen process."""
        return self.c2 - self.c1


def _mean(samples: np.ndarray) -> np.ndarray:
    return samples.mean(axis=0)


@dataclass(frozen=True)
class LinearBenchmark:
    """One-dimensional linear model with closed forms for every limit object.

    ``F = A x + Abar m(mu) + B y + Bbar m(nu)``, ``G = g0 + g1 x``,
    ``c = c0``, ``b = -kappa y + b1 m(mu) + b2 m(nu)``, ``sigma1 = s1``,
    ``sigma2 = s2``.
    """

    A: float = -1.0
    Abar: float = 0.5
    B: float = 1.0
    Bbar: float = 0.0
    g0: float = 0.3
    g1: float = 0.0
    kappa: float = 2.0
    b1: float = 1.0
    b2: float = 0.0
    s1: float = 0.5
    s2: float = 0.5
    c0: float = 0.2

    def __post_init__(self):
        if not 2 * self.kappa - 2 * abs(self.b2) > 0:
            raise DegenerateModel("need kappa > |b2| for dissipativity")
        if not self.kappa > self.b2:
            raise DegenerateModel("need kappa > b2 for the frozen fixed point")

    @property
    def c1(self) -> float:
        return abs(self.b2)

    @property
    def c2(self) -> float:
        return 2 * self.kappa - abs(self.b2)

    def replace(self, **changes) -> "LinearBenchmark":
        return replace(self, **changes)

    def example_i(self) -> "LinearBenchmark":
        """Independent fast noise only, constant slow diffusion."""
        return replace(self, s1=0.0, g1=0.0)

    def example_ii(self) -> "LinearBenchmark":
        """Common fast noise only, constant slow diffusion."""
        return replace(self, s2=0.0, g1=0.0)

    # closed forms -----------------------------------------------------------

    def m_star(self, mu_mean: float) -> float:
        return self.b1 * mu_mean / (self.kappa - self.b2)

    @property
    def v_star(self) -> float:
        return (self.s1**2 + self.s2**2) / (2 * self.kappa)

    @property
    def averaged_mean_rate(self) -> float:
        """``K`` in ``Fbar(x, mu) = A x + K m(mu)``."""
        return self.Abar + (self.B + self.Bbar) * self.b1 / (self.kappa - self.b2)

    def F_bar(self, x, mu_mean):
        return self.A * x + self.averaged_mean_rate * mu_mean

    @property
    def pq(self) -> tuple:
        p = self.B / self.kappa
        q = (self.Bbar + self.B * self.b2 / self.kappa) / (self.kappa - self.b2)
        return p, q

    @property
    def model(self) -> ModelSpec:
        return _benchmark_model(self)


def _benchmark_model(bm: LinearBenchmark) -> ModelSpec:
    A, Abar, B, Bbar = bm.A, bm.Abar, bm.B, bm.Bbar
    g0, g1, kappa, b1, b2 = bm.g0, bm.g1, bm.kappa, bm.b1, bm.b2
    s1, s2, c0 = bm.s1, bm.s2, bm.c0

    def F(x, mu, y, nu):
        return A * x + Abar * _mean(mu) + B * y + Bbar * _mean(nu)

    def G(x, mu, nu):
        return (g0 + g1 * x)[:, :, None]

    def c(x, mu, y, nu):
        return np.full(y.shape, c0)

    def b(mu, y, nu):
        return -kappa * y + b1 * _mean(mu) + b2 * _mean(nu)

    def sigma1(mu, y, nu):
        return np.full((y.shape[0], 1, 1), s1)

    def sigma2(mu, y, nu):
        return np.full((y.shape[0], 1, 1), s2)

    return ModelSpec(
        d1=1, d2=1, F=F, G=G, c=c, b=b, sigma1=sigma1, sigma2=sigma2,
        c1=bm.c1, c2=bm.c2, clt_compatible=True,
        lipschitz_bound=max(1.0, abs(A) + abs(Abar) + abs(B) + abs(Bbar), kappa + abs(b1) + abs(b2)),
        name="linear_benchmark", params=asdict(bm),
    )


def benchmark_frozen_stationary(bench: LinearBenchmark, mu_mean: float) -> tuple:
    """Stationary mean and variance of the frozen fast process."""
    if bench.kappa <= bench.b2:
        raise DegenerateModel("kappa must exceed b2")
    return bench.m_star(mu_mean), bench.v_star


def benchmark_corrector(bench: LinearBenchmark, mu_mean: float) -> tuple:
    """Coefficients ``(p, q)`` of ``Phi = p (y - m*) + q (m(nu) - m*)``.

    ``mu_mean`` only enters through ``m*``; the returned coefficients do not
    depend on it.
    """
    if bench.kappa == 0 or bench.kappa <= bench.b2:
        raise DegenerateModel("need kappa != 0 and kappa > b2")
    return bench.pq


# validation ---------------------------------------------------------------


@dataclass
class ValidationReport:
    passed: bool
    worst_margin: float
    worst_probe: int
    probe_count: int
    margins: np.ndarray = field(repr=False, default=None)


def _finite(name, arr):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteCoefficient(f"{name} returned non-finite values")
    return arr


def validate_dissipativity(model: ModelSpec, probe_count: int = 200, rng_seed: int = 0,
                           scale: float = 1.0, cloud_size: int = 32, tol: float = 1e-10) -> ValidationReport:
    """Spot-check the declared dissipativity constants on random probes.

    Checks ``3(|d sigma1|^2 + |d sigma2|^2) + 2<d b, y1 - y2>
    <= c1 W2(nu1, nu2)^2 - c2 |y1 - y2|^2``; a probe passes when the margin
    (left minus right) is at most ``tol``. Probe 0 uses identical inputs.
    """
    from .measure import wasserstein2

    if probe_count < 1:
        raise ValueError("probe_count must be positive")
    rng = np.random.default_rng(rng_seed)
    d1, d2 = model.d1, model.d2
    margins = np.empty(probe_count)
    for k in range(probe_count):
        mu = scale * rng.standard_normal((cloud_size, d1))
        y1 = scale * rng.standard_normal((1, d2))
        nu1 = scale * (rng.standard_normal((cloud_size, d2)) + rng.standard_normal(d2))
        if k == 0:
            y2, nu2 = y1.copy(), nu1.copy()
        else:
            y2 = scale * rng.standard_normal((1, d2))
            nu2 = scale * (rng.standard_normal((cloud_size, d2)) + rng.standard_normal(d2))
        ds1 = _finite("sigma1", model.sigma1(mu, y1, nu1)) - _finite("sigma1", model.sigma1(mu, y2, nu2))
        ds2 = _finite("sigma2", model.sigma2(mu, y1, nu1)) - _finite("sigma2", model.sigma2(mu, y2, nu2))
        db = _finite("b", model.b(mu, y1, nu1)) - _finite("b", model.b(mu, y2, nu2))
        dy = y1 - y2
        lhs = 3 * (np.sum(ds1**2) + np.sum(ds2**2)) + 2 * float(np.sum(db * dy))
        w2 = float(wasserstein2(nu1, nu2)) if k else 0.0
        rhs = model.c1 * w2**2 - model.c2 * float(np.sum(dy**2))
        margins[k] = lhs - rhs
    worst = int(np.argmax(margins))
    return ValidationReport(
        passed=bool(np.all(margins <= tol)), worst_margin=float(margins[worst]),
        worst_probe=worst, probe_count=probe_count, margins=margins,
    )


def check_clt_compatibility(model: ModelSpec, probes: int = 20, rng_seed: int = 0) -> bool:
    """True when ``G`` is exactly insensitive to its ``nu`` argument on probes."""
    rng = np.random.default_rng(rng_seed)
    for _ in range(probes):
        x = rng.standard_normal((4, model.d1))
        mu = rng.standard_normal((16, model.d1))
        nu1 = rng.standard_normal((16, model.d2))
        nu2 = 2.0 * rng.standard_normal((16, model.d2)) + 1.0
        if not np.array_equal(model.G(x, mu, nu1), model.G(x, mu, nu2)):
            return False
    return True


# config loading -----------------------------------------------------------

_REGISTRY: dict = {}


def register_model(name: str):
    """Decorator registering a factory ``(**params) -> ModelSpec`` under ``name``."""

    def deco(factory):
        _REGISTRY[name] = factory
        return factory

    return deco


def registered_models() -> list:
    return sorted(_REGISTRY)


_BENCH_KEYS = {f.name for f in fields(LinearBenchmark)}


def model_from_config(cfg: dict):
    """Build a model from a config block.

    Returns ``(model, bench)`` where ``bench`` is the :class:`LinearBenchmark`
    for ``kind: linear_benchmark`` and ``None`` otherwise.
    """
    cfg = dict(cfg or {})
    kind = cfg.pop("kind", None)
    if kind == "linear_benchmark":
        unknown = set(cfg) - _BENCH_KEYS
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigInvalid(f"unknown key 'model.{key}' for linear_benchmark", key=f"model.{key}")
        try:
            bench = LinearBenchmark(**{k: float(v) for k, v in cfg.items()})
        except DegenerateModel as exc:
            raise ConfigInvalid(f"model: {exc}", key="model") from exc
        return bench.model, bench
    if kind == "custom_registered":
        name = cfg.pop("name", None)
        if name not in _REGISTRY:
            raise ConfigInvalid(f"unknown registered model {name!r}; known: {registered_models()}",
                                key="model.name")
        params = cfg.pop("params", {}) or {}
        if cfg:
            key = sorted(cfg)[0]
            raise ConfigInvalid(f"unknown key 'model.{key}'", key=f"model.{key}")
        try:
            return _REGISTRY[name](**params), None
        except TypeError as exc:
            raise ConfigInvalid(f"model.params: {exc}", key="model.params") from exc
    raise ConfigInvalid(f"model.kind must be 'linear_benchmark' or 'custom_registered', got {kind!r}",
                        key="model.kind")


@register_model("tanh_coupled")
def tanh_coupled(kappa: float = 2.0, alpha: float = 0.5, beta: float = 0.3, s2: float = 0.6,
                 s1: float = 0.0, g0: float = 0.4, c0: float = 0.0) -> ModelSpec:
    """Small nonlinear example with no closed forms.

    ``F = -x + tanh(y) + alpha m(nu)``, ``G = g0``, ``c = c0 cos(x)``,
    ``b = -kappa y + beta tanh(m(mu))``, constant fast diffusions.
    """

    def F(x, mu, y, nu):
        return -x + np.tanh(y) + alpha * _mean(nu)

    def G(x, mu, nu):
        return np.full((x.shape[0], 1, 1), g0)

    def c(x, mu, y, nu):
        return c0 * np.cos(x) * np.ones_like(y)

    def b(mu, y, nu):
        return -kappa * y + beta * np.tanh(_mean(mu))

    def sigma1(mu, y, nu):
        return np.full((y.shape[0], 1, 1), s1)

    def sigma2(mu, y, nu):
        return np.full((y.shape[0], 1, 1), s2)

    params = dict(kappa=kappa, alpha=alpha, beta=beta, s2=s2, s1=s1, g0=g0, c0=c0)
    return ModelSpec(d1=1, d2=1, F=F, G=G, c=c, b=b, sigma1=sigma1, sigma2=sigma2,
                     c1=0.0, c2=2 * kappa, clt_compatible=True, lipschitz_bound=max(2.0, kappa),
                     name="tanh_coupled", params=params)
