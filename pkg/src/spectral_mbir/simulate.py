"""Binned photon-count simulation and detector-defect injection/repair.

Counts follow per-bin monochromatic attenuation: the expectation of bin e on
ray n is i0[e] * exp(-proj(lac_e)[n]).  Poisson sampling is counter-based per
cell: one Philox-stream uniform per (bin, view, channel) cell in C order,
mapped through the Poisson inverse CDF, so any parallel partition of cells
reproduces the serial stream bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ConfigError, NumericError
from .geometry import FanBeamGeometry
from .images import (
    MASK_CLEAN,
    MASK_DEAD,
    MASK_REPAIRED,
    MaterialImage,
    SpectralSinogram,
)
from .mixing import MixingMatrix, mix_image
from .projector import SystemMatrix

_DEFECT_SEED_SALT = 0x5EED


@dataclass
class CountData:
    """expected/sampled counts are (E, n_views, n_channels); i0 is per bin."""

    expected: np.ndarray
    sampled: np.ndarray
    i0: np.ndarray
    mask: np.ndarray

    def validate(self, poisson: bool = True) -> None:
        if (self.expected <= 0.0)[:, self.mask != MASK_DEAD].any():
            raise NumericError("expected counts must be positive on live cells")
        if (self.sampled < 0.0).any():
            raise NumericError("sampled counts must be nonnegative")
        if poisson and not np.array_equal(self.sampled, np.floor(self.sampled)):
            raise NumericError("sampled counts must be integral")


def simulate_counts(phantom: MaterialImage, mix: MixingMatrix, A: SystemMatrix,
                    i0, seed: int, noiseless: bool = False
                    ) -> tuple[CountData, SpectralSinogram]:
    """Forward-simulate binned counts and the post-log sinogram.

    Line integrals are log(i0 / counts) with sampled counts clamped at one
    photon; weights downstream are the sampled counts themselves.
    """
    i0 = np.asarray(i0, dtype=np.float64)
    if i0.ndim != 1 or i0.size != mix.n_bins:
        raise ConfigError(f"need one blank-scan level per bin ({mix.n_bins})")
    if (i0 <= 0.0).any():
        raise ConfigError("blank-scan counts i0 must be positive")
    geom = A.geom
    phantom.validate()

    lac = mix_image(mix, phantom.flat)              # (E, L)
    shape = (mix.n_bins, geom.n_views, geom.n_channels)
    expected = np.empty(shape)
    for e in range(mix.n_bins):
        proj = A.forward(lac[e]).reshape(geom.n_views, geom.n_channels)
        expected[e] = i0[e] * np.exp(-proj)

    if noiseless:
        sampled = expected.copy()
        floor = 1e-300
    else:
        sampled = _poisson_counter_based(expected, seed)
        floor = 1.0

    y = np.log(i0)[:, None, None] - np.log(np.maximum(sampled, floor))
    mask = np.zeros(shape[1:], dtype=np.uint8)
    counts = CountData(expected, sampled, i0, mask)
    counts.validate(poisson=not noiseless)
    sino = SpectralSinogram(y, sampled.copy(), mask.copy(), mix.bin_edges_kev)
    sino.validate()
    return counts, sino


def _poisson_counter_based(expected: np.ndarray, seed: int) -> np.ndarray:
    """One uniform per cell (Philox, C order) through the Poisson inverse CDF."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    u = rng.random(expected.size)
    flat = expected.ravel()
    counts = stats.poisson.ppf(u, flat)
    return counts.reshape(expected.shape)


def inject_defects(sino: SpectralSinogram, defect_rate: float,
                   seed: int) -> SpectralSinogram:
    """Kill a random subset of detector channels: all views and bins of a
    defective channel record nothing (zero counts, zero line integral)."""
    if not 0.0 <= defect_rate <= 0.05:
        raise ConfigError(f"defect_rate {defect_rate} outside [0, 0.05]")
    y = sino.line_integrals.copy()
    counts = sino.counts.copy()
    mask = sino.mask.copy()
    if defect_rate > 0.0:
        rng = np.random.Generator(np.random.Philox(key=np.uint64(seed ^ _DEFECT_SEED_SALT)))
        dead = rng.random(sino.n_channels) < defect_rate
        y[:, :, dead] = 0.0
        counts[:, :, dead] = 0.0
        mask[:, dead] = MASK_DEAD
    return SpectralSinogram(y, counts, mask, sino.bin_edges_kev)


def correct_defects(sino: SpectralSinogram) -> SpectralSinogram:
    """Repair dead cells by per-view linear interpolation across channels.

    Adjacent dead channels interpolate across the gap; dead channels at the
    detector edge copy the nearest live value.  A view with no live channel
    at all is unrecoverable.
    """
    live = ~(sino.mask == MASK_DEAD)
    if not live.any(axis=1).all():
        raise NumericError("an entire detector row is defective; cannot repair")

    y = sino.line_integrals.copy()
    counts = sino.counts.copy()
    mask = sino.mask.copy()
    channels = np.arange(sino.n_channels, dtype=np.float64)
    for v in range(sino.n_views):
        bad = sino.mask[v] == MASK_DEAD
        if not bad.any():
            continue
        good = ~bad
        for e in range(sino.n_bins):
            y[e, v, bad] = np.interp(channels[bad], channels[good], y[e, v, good])
            counts[e, v, bad] = np.interp(channels[bad], channels[good],
                                          counts[e, v, good])
        mask[v, bad] = MASK_REPAIRED
    out = SpectralSinogram(y, counts, mask, sino.bin_edges_kev)
    out.validate()
    return out


def inject_and_correct_defects(sino: SpectralSinogram, defect_rate: float,
                               seed: int) -> SpectralSinogram:
    """Defect injection followed by repair; identity when defect_rate is 0."""
    if defect_rate == 0.0:
        return SpectralSinogram(sino.line_integrals.copy(), sino.counts.copy(),
                                sino.mask.copy(), sino.bin_edges_kev)
    return correct_defects(inject_defects(sino, defect_rate, seed))
