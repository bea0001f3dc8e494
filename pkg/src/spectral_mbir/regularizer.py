"""Quadratic 8-neighborhood smoothness prior.

The image-wide prior is a pairwise Markov penalty

    U(x) = 1/(2 sigma^2) * sum over unordered neighbor pairs {l, k} of
           alpha_lk * sum_m (x[l, m] - x[k, m])^2

with side-neighbor weight alpha_s and diagonal weight alpha_s/sqrt(2),
normalized so an interior voxel's eight weights sum to 1.  With that
normalization the prior's Hessian w.r.t. one voxel is (1/sigma^2) * I for
interior voxels; edge voxels carry their clipped weight sum.  Materials are
not coupled; a cross-material coupling slot is reserved but must stay zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_NORM = 4.0 + 2.0 * math.sqrt(2.0)
SIDE_WEIGHT = 1.0 / _NORM
DIAG_WEIGHT = (1.0 / math.sqrt(2.0)) / _NORM

# (dy, dx, weight) for the 8-neighborhood
_OFFSETS = [(-1, 0, SIDE_WEIGHT), (1, 0, SIDE_WEIGHT),
            (0, -1, SIDE_WEIGHT), (0, 1, SIDE_WEIGHT),
            (-1, -1, DIAG_WEIGHT), (-1, 1, DIAG_WEIGHT),
            (1, -1, DIAG_WEIGHT), (1, 1, DIAG_WEIGHT)]

# one representative direction per unordered pair
_PAIR_OFFSETS = [(0, 1, SIDE_WEIGHT), (1, 0, SIDE_WEIGHT),
                 (1, 1, DIAG_WEIGHT), (1, -1, DIAG_WEIGHT)]


@dataclass(frozen=True)
class RegularizerConfig:
    """sigma = inf disables the prior entirely."""

    sigma: float
    side_weight: float = SIDE_WEIGHT
    diag_weight: float = DIAG_WEIGHT
    cross_material: np.ndarray | None = None  # reserved

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ConfigError(f"regularizer sigma must be > 0 (got {self.sigma})")
        if self.side_weight < 0.0 or self.diag_weight < 0.0:
            raise ConfigError("neighbor weights must be nonnegative")
        total = 4.0 * self.side_weight + 4.0 * self.diag_weight
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(f"neighbor weights must sum to 1 (got {total})")
        if self.cross_material is not None and np.any(np.asarray(self.cross_material) != 0.0):
            raise ConfigError("cross-material coupling is reserved and must be zero")

    @property
    def inv_sigma_sq(self) -> float:
        return 0.0 if math.isinf(self.sigma) else 1.0 / (self.sigma * self.sigma)

    def offsets(self):
        s, d = self.side_weight, self.diag_weight
        return [(dy, dx, s if abs(dy) + abs(dx) == 1 else d) for dy, dx, _ in _OFFSETS]

    def pair_offsets(self):
        s, d = self.side_weight, self.diag_weight
        return [(dy, dx, s if abs(dy) + abs(dx) == 1 else d) for dy, dx, _ in _PAIR_OFFSETS]


def neighbor_table(n: int, reg: RegularizerConfig):
    """Padded per-voxel neighbor arrays for the n x n grid.

    Returns (indices (L, 8) with -1 padding, weights (L, 8), weight sums (L,)).
    """
    offs = reg.offsets()
    L = n * n
    idx = np.full((L, 8), -1, dtype=np.int64)
    wgt = np.zeros((L, 8), dtype=np.float64)
    iy, ix = np.divmod(np.arange(L), n)
    for k, (dy, dx, w) in enumerate(offs):
        ny, nx = iy + dy, ix + dx
        ok = (ny >= 0) & (ny < n) & (nx >= 0) & (nx < n)
        idx[ok, k] = ny[ok] * n + nx[ok]
        wgt[ok, k] = w
    return idx, wgt, wgt.sum(axis=1)


def prior_value(x: np.ndarray, reg: RegularizerConfig) -> float:
    """Image-wide prior for an (n, n, M) fraction image (or (n, n) scalar)."""
    inv = reg.inv_sigma_sq
    if inv == 0.0:
        return 0.0
    arr = x[..., None] if x.ndim == 2 else x
    total = 0.0
    for dy, dx, w in reg.pair_offsets():
        a = arr[max(dy, 0):arr.shape[0] + min(dy, 0),
                max(dx, 0):arr.shape[1] + min(dx, 0)]
        b = arr[max(-dy, 0):arr.shape[0] + min(-dy, 0),
                max(-dx, 0):arr.shape[1] + min(-dx, 0)]
        diff = a - b
        total += w * float(np.sum(diff * diff))
    return 0.5 * inv * total


def regularizer_value_and_gradient(x: np.ndarray, l: int, reg: RegularizerConfig):
    """Local prior value, gradient, and curvature at voxel l of an
    (n, n, M) image.

    value    = 1/(2 sigma^2) sum_m sum_k alpha_k (x[l,m] - x[k,m])^2
    gradient = 1/sigma^2 (wsum * x[l] - sum_k alpha_k x[k])    (length M)
    curvature (per-material Hessian diagonal) = wsum / sigma^2, which is
    exactly 1/sigma^2 at interior voxels.
    """
    n = x.shape[0]
    M = x.shape[2] if x.ndim == 3 else 1
    flat = x.reshape(n * n, M)
    if not 0 <= l < n * n:
        raise IndexError(f"voxel {l} out of range")
    inv = reg.inv_sigma_sq
    iy, ix = divmod(l, n)
    value = 0.0
    gsum = np.zeros(M)
    wsum = 0.0
    for dy, dx, w in reg.offsets():
        ny, nx = iy + dy, ix + dx
        if 0 <= ny < n and 0 <= nx < n:
            d = flat[l] - flat[ny * n + nx]
            value += w * float(d @ d)
            gsum += w * d
            wsum += w
    return 0.5 * inv * value, inv * gsum, inv * wsum
