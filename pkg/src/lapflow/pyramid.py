"""Laplacian pyramid decomposition and exact reconstruction.

An image is split into K residual levels: level K-1 is the K-1 times
average-pooled base, and each finer level k holds what pooling to level
k+1 discarded:

    level[K-1] = down^(K-1)(x)
    level[k]   = down^k(x) - up(down^(k+1)(x))       for k < K-1

Reconstruction telescopes back: x = sum_k up^k(level[k]), exactly in
exact arithmetic. Index 0 is the finest level throughout.
"""

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor, down2, up2


@dataclass
class Pyramid:
    """Ordered residual levels, finest (index 0) to coarsest (index K-1)."""

    levels: list

    @property
    def K(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, k):
        return self.levels[k]


def max_levels(h, w):
    """Largest K such that h and w stay divisible through K-1 poolings."""
    k = 1
    while h % 2 == 0 and w % 2 == 0 and min(h, w) > 1:
        h //= 2
        w //= 2
        k += 1
    return k


def _check_levels(shape, K):
    h, w = shape[-2], shape[-1]
    if K < 1:
        raise ValueError(f"need at least one level, got K={K}")
    if K > max_levels(h, w):
        raise ValueError(f"K={K} exceeds what a {h}x{w} image supports")


def down(x: Tensor) -> Tensor:
    """2x2 mean pooling (scale factor two)."""
    return down2(x)


def up(x: Tensor) -> Tensor:
    """Nearest-neighbor upsampling (scale factor two)."""
    return up2(x)


def down_by(x: Tensor, k: int) -> Tensor:
    for _ in range(k):
        x = down2(x)
    return x


def up_by(x: Tensor, k: int) -> Tensor:
    for _ in range(k):
        x = up2(x)
    return x


def decompose(x: Tensor, K: int) -> Pyramid:
    """Split x into K residual levels (finest first)."""
    _check_levels(x.shape, K)
    pooled = [x]
    for _ in range(K - 1):
        pooled.append(down2(pooled[-1]))
    levels = []
    for k in range(K - 1):
        levels.append(nm.sub(pooled[k], up2(pooled[k + 1])))
    levels.append(pooled[K - 1])
    return Pyramid(levels)


def reconstruct(p: Pyramid) -> Tensor:
    """Exact inverse of decompose: sum of upsampled residuals."""
    base = p.levels[0].shape[-2:]
    for k, lvl in enumerate(p.levels):
        want = (base[0] >> k, base[1] >> k)
        if lvl.shape[-2:] != want:
            raise ValueError(
                f"level {k} has spatial shape {lvl.shape[-2:]}, expected {want}")
    out = p.levels[-1]
    for lvl in reversed(p.levels[:-1]):
        out = nm.add(lvl, up2(out))
    return out


def noise_pyramid(rng, shape, K, independent_scale_noise=False,
                  dtype=np.float32) -> Pyramid:
    """Laplacian pyramid of a fresh standard-normal draw.

    The default decomposes a single full-resolution draw, so per-level
    variances follow the pooling algebra (the coarse base has variance
    4^-(K-1)). With independent_scale_noise, each level instead gets an
    independent unit-normal draw of its own size (ablation only).
    """
    shape = tuple(shape)
    _check_levels(shape, K)
    if independent_scale_noise:
        levels = []
        for k in range(K):
            s = shape[:-2] + (shape[-2] >> k, shape[-1] >> k)
            levels.append(nm.normal(rng, s, dtype=dtype))
        return Pyramid(levels)
    return decompose(nm.normal(rng, shape, dtype=dtype), K)
