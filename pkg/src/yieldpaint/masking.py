"""Corruption processes that turn full surfaces into sparse ones.

Uniform masking zeroes a fixed fraction ``nu`` of cells drawn without
replacement. Block masking keeps only a top-left block (best ratings,
shortest tenors), optionally thinned by uniform masking inside the block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from yieldpaint.surface import MaskedSurface, SurfaceDataset, YieldSurface

SeedLike = int | np.random.Generator | np.random.SeedSequence | None


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def masked_count(nu: float, n_cells: int) -> int:
    """Number of cells zeroed for fraction ``nu``: round half up of nu*n."""
    if not 0.0 <= nu <= 1.0:
        raise ValueError(f"nu must lie in [0, 1], got {nu}")
    return min(n_cells, int(math.floor(nu * n_cells + 0.5 + 1e-9)))


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "uniform"
    nu: float = 0.75
    keep_rows: int = 7
    keep_cols: int = 8
    nu_inside: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform", "block"):
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        masked_count(self.nu, 1)
        masked_count(self.nu_inside, 1)
        if self.kind == "block" and (self.keep_rows < 1 or self.keep_cols < 1):
            raise ValueError("block masking needs a non-empty kept block")

    @classmethod
    def uniform(cls, nu: float, seed: int = 0) -> CorruptionSpec:
        return cls(kind="uniform", nu=nu, seed=seed)

    @classmethod
    def block(cls, keep_rows: int, keep_cols: int, nu_inside: float = 0.0, seed: int = 0) -> CorruptionSpec:
        return cls(kind="block", keep_rows=keep_rows, keep_cols=keep_cols, nu_inside=nu_inside, seed=seed)

    @classmethod
    def default_block(cls, shape: tuple[int, int], nu_inside: float = 0.75, seed: int = 0) -> CorruptionSpec:
        """Top-left quadrant: ceil(R/2) x ceil(T/2)."""
        r, t = shape
        return cls.block(-(-r // 2), -(-t // 2), nu_inside, seed)

    def with_seed(self, seed: int) -> CorruptionSpec:
        return CorruptionSpec(self.kind, self.nu, self.keep_rows, self.keep_cols, self.nu_inside, seed)


def _values(surface) -> np.ndarray:
    return surface.values if isinstance(surface, YieldSurface) else np.asarray(surface, dtype=np.float64)


def _date(surface):
    return surface.date if isinstance(surface, YieldSurface) else None


def uniform_mask(shape: tuple[int, int], nu: float, rng: np.random.Generator) -> np.ndarray:
    n = shape[0] * shape[1]
    k = masked_count(nu, n)
    observed = np.ones(n, dtype=bool)
    observed[rng.permutation(n)[:k]] = False
    return observed.reshape(shape)


def block_mask(shape: tuple[int, int], keep_rows: int, keep_cols: int, nu_inside: float,
               rng: np.random.Generator) -> np.ndarray:
    r, t = shape
    if keep_rows < 1 or keep_cols < 1:
        raise ValueError("block masking needs a non-empty kept block")
    if keep_rows > r or keep_cols > t:
        raise ValueError(f"kept block {keep_rows}x{keep_cols} exceeds grid {r}x{t}")
    observed = np.zeros(shape, dtype=bool)
    observed[:keep_rows, :keep_cols] = uniform_mask((keep_rows, keep_cols), nu_inside, rng)
    return observed


def _apply(surface, observed: np.ndarray) -> MaskedSurface:
    v = _values(surface)
    return MaskedSurface(np.where(observed, v, 0.0), observed, _date(surface))


def mask_uniform(surface, nu: float, seed: SeedLike = None) -> MaskedSurface:
    v = _values(surface)
    observed = uniform_mask(v.shape, nu, _rng(seed))
    if not observed.any():
        raise ValueError(f"nu={nu} masks every cell; at least one must stay observed")
    return _apply(surface, observed)


def mask_block(surface, spec: CorruptionSpec, seed: SeedLike = None) -> MaskedSurface:
    v = _values(surface)
    rng = _rng(spec.seed if seed is None else seed)
    observed = block_mask(v.shape, spec.keep_rows, spec.keep_cols, spec.nu_inside, rng)
    if not observed.any():
        raise ValueError("block masking left no observed cell")
    return _apply(surface, observed)


def corrupt(surface, spec: CorruptionSpec, rng: SeedLike = None) -> MaskedSurface:
    rng = _rng(spec.seed if rng is None else rng)
    if spec.kind == "uniform":
        return mask_uniform(surface, spec.nu, rng)
    return mask_block(surface, spec, rng)


def replicate_and_corrupt(dataset: SurfaceDataset, spec: CorruptionSpec, k: int
                          ) -> list[tuple[MaskedSurface, YieldSurface]]:
    """k independently corrupted copies of every surface, paired with the clean target.

    Pairs are ordered surface-major: all replicas of surface 0, then surface 1, ...
    """
    if k < 1:
        raise ValueError("replication count k must be >= 1")
    rng = np.random.default_rng(spec.seed)
    return [(corrupt(s, spec, rng), s) for s in dataset.surfaces for _ in range(k)]
