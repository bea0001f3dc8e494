"""Core array containers: fraction images, binned sinograms, ray weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

MASK_CLEAN = 0
MASK_REPAIRED = 1
MASK_DEAD = 2

FEASIBILITY_SLACK = 1e-9  # allowed overshoot of per-voxel fraction sums


@dataclass
class MaterialImage:
    """Per-voxel volume fractions on a square grid: fractions[iy, ix, m]."""

    fractions: np.ndarray
    voxel_mm: float
    material_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.fractions = np.ascontiguousarray(self.fractions, dtype=np.float64)
        if self.fractions.ndim != 3 or self.fractions.shape[0] != self.fractions.shape[1]:
            raise ShapeError(f"fractions must be (n, n, M), got {self.fractions.shape}")
        if self.material_names and len(self.material_names) != self.n_materials:
            raise ShapeError("material_names length does not match fraction planes")
        self.material_names = tuple(self.material_names)

    @property
    def grid_n(self) -> int:
        return self.fractions.shape[0]

    @property
    def n_materials(self) -> int:
        return self.fractions.shape[2]

    @property
    def n_voxels(self) -> int:
        return self.grid_n * self.grid_n

    @property
    def flat(self) -> np.ndarray:
        """(L, M) view of the fractions, row-major voxel order."""
        return self.fractions.reshape(self.n_voxels, self.n_materials)

    def plane(self, m: int) -> np.ndarray:
        return self.fractions[:, :, m]

    def validate(self) -> None:
        f = self.fractions
        if not np.isfinite(f).all():
            raise NumericError("fraction image contains non-finite values")
        if (f < 0.0).any():
            raise NumericError("fraction image contains negative fractions")
        worst = float(f.sum(axis=2).max(initial=0.0))
        if worst > 1.0 + FEASIBILITY_SLACK:
            raise NumericError(f"voxel fraction sum {worst} exceeds 1 + {FEASIBILITY_SLACK}")


@dataclass
class SpectralSinogram:
    """Per-bin line integrals with the raw counts and detector-cell mask.

    line_integrals/counts are (E, n_views, n_channels); the mask is
    (n_views, n_channels) with MASK_CLEAN / MASK_REPAIRED / MASK_DEAD codes.
    """

    line_integrals: np.ndarray
    counts: np.ndarray
    mask: np.ndarray = None
    bin_edges_kev: tuple[float, ...] = ()

    def __post_init__(self):
        self.line_integrals = np.ascontiguousarray(self.line_integrals, dtype=np.float64)
        self.counts = np.ascontiguousarray(self.counts, dtype=np.float64)
        if self.line_integrals.ndim != 3:
            raise ShapeError("line_integrals must be (E, n_views, n_channels)")
        if self.counts.shape != self.line_integrals.shape:
            raise ShapeError("counts shape differs from line_integrals")
        if self.mask is None:
            self.mask = np.zeros(self.line_integrals.shape[1:], dtype=np.uint8)
        self.mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        if self.mask.shape != self.line_integrals.shape[1:]:
            raise ShapeError("mask must be (n_views, n_channels)")
        self.bin_edges_kev = tuple(float(b) for b in self.bin_edges_kev)

    @property
    def n_bins(self) -> int:
        return self.line_integrals.shape[0]

    @property
    def n_views(self) -> int:
        return self.line_integrals.shape[1]

    @property
    def n_channels(self) -> int:
        return self.line_integrals.shape[2]

    @property
    def n_rays(self) -> int:
        return self.n_views * self.n_channels

    def rays(self) -> np.ndarray:
        """(E, N) view of the line integrals in projector ray order."""
        return self.line_integrals.reshape(self.n_bins, self.n_rays)

    def validate(self) -> None:
        if (self.counts < 0.0).any():
            raise NumericError("negative photon counts")
        live = self.mask != MASK_DEAD
        if not np.isfinite(self.line_integrals[:, live]).all():
            raise NumericError("non-finite line integrals on live detector cells")


@dataclass
class WeightMatrix:
    """Per-bin per-ray data weights (inverse-variance surrogate): (E, N)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("weights must be (E, N)")

    @classmethod
    def from_sinogram(cls, sino: SpectralSinogram,
                      repair_factor: float = 0.5) -> "WeightMatrix":
        """Raw counts as weights; repaired cells scaled by ``repair_factor``,
        dead cells zeroed.  Zero-count cells carry zero weight (a ray that
        recorded nothing carries no post-log information)."""
        if not 0.0 <= repair_factor <= 1.0:
            raise ConfigError(f"repair_factor {repair_factor} outside [0, 1]")
        w = sino.counts.reshape(sino.n_bins, sino.n_rays).copy()
        flat_mask = sino.mask.reshape(sino.n_rays)
        w[:, flat_mask == MASK_REPAIRED] *= repair_factor
        w[:, flat_mask == MASK_DEAD] = 0.0
        return cls(w)

    def validate(self, mask: np.ndarray | None = None) -> None:
        v = self.values
        if not np.isfinite(v).all() or (v < 0.0).any():
            raise NumericError("weights must be finite and nonnegative")
        if mask is not None:
            dead = (mask.reshape(-1) == MASK_DEAD)
            if v[:, dead].any():
                raise NumericError("dead detector cells must carry zero weight")
