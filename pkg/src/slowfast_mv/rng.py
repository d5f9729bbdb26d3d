"""Counter-based, splittable noise streams.

Every Brownian increment is addressed by ``(master_seed, path, tag, step)``.
The Philox key is derived from ``(master_seed, path, tag)`` through a
``SeedSequence``; the step index is written into the high words of the
Philox counter. Row ``i`` of the block drawn for a step belongs to particle
``i``. Nothing depends on call order, so the same increments come out
whatever the number of workers.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

__all__ = ["NoisePlan", "tag_id"]


def tag_id(label) -> int:
    """Stable 32-bit id for a string label (ints pass through)."""
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


@lru_cache(maxsize=4096)
def _philox_key(master_seed: int, path: tuple, tag: int) -> tuple:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=path + (tag,))
    k = ss.generate_state(2, dtype=np.uint64)
    return int(k[0]), int(k[1])


@dataclass(frozen=True)
class NoisePlan:
    """Deterministic noise source for one simulation job.

    ``dt`` is the micro step used by the integrators that consume this plan.
    ``path`` distinguishes independent jobs (replicas, epsilon cells, inner
    Monte Carlo runs) derived from the same master seed.
    """

    master_seed: int
    dt: float
    path: tuple = ()

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    def child(self, *labels) -> "NoisePlan":
        return replace(self, path=self.path + tuple(tag_id(x) for x in labels))

    def with_dt(self, dt: float) -> "NoisePlan":
        return replace(self, dt=float(dt))

    def generator(self, tag, counter: int = 0) -> np.random.Generator:
        key = _philox_key(int(self.master_seed), self.path, tag_id(tag))
        bitgen = np.random.Philox(
            key=np.array(key, dtype=np.uint64),
            counter=np.array([0, 0, int(counter), 0], dtype=np.uint64),
        )
        return np.random.Generator(bitgen)

    def normals(self, tag, step: int, n: int, d: int) -> np.ndarray:
        return self.generator(tag, step).standard_normal((n, d))

    def increments(self, tag, step: int, n: int, d: int) -> np.ndarray:
        """Brownian increments over one step, shape ``(n, d)``."""
        return np.sqrt(self.dt) * self.normals(tag, step, n, d)

    def seed_int(self, label="seed") -> int:
        """A plain integer seed for helpers that want one (bootstrap, probes)."""
        return int(self.generator(label, 0).integers(0, 2**63 - 1))
