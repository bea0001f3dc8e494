"""2D equiangular fan-beam scan geometry.

Angles and distances are physical (mm, rad).  The image is a square grid of
``image_n`` x ``image_n`` voxels centered on the isocenter; voxel ``(iy, ix)``
maps to flat index ``l = iy * image_n + ix`` and the +y axis points toward
increasing row index.  Rays are indexed ``n = view * n_channels + channel``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class FanBeamGeometry:
    """Fan-beam scan description: rotating source, equiangular detector arc.

    ``det_pitch_mm`` is the arc length between adjacent channel centers
    measured on the detector arc (radius ``source_det_mm``), so the angular
    pitch of the fan is ``det_pitch_mm / source_det_mm``.
    """

    n_views: int
    n_channels: int
    det_pitch_mm: float
    image_n: int
    voxel_mm: float
    fov_mm: float
    source_iso_mm: float = 200.0
    source_det_mm: float = 250.0
    angular_range_rad: float = TWO_PI

    def __post_init__(self):
        if self.n_views < 1 or self.n_channels < 1:
            raise ConfigError(
                "geometry: n_views and n_channels must be >= 1 "
                f"(got {self.n_views}, {self.n_channels})")
        if self.image_n < 1:
            raise ConfigError(f"geometry: image_n must be >= 1 (got {self.image_n})")
        if not (self.source_det_mm > self.source_iso_mm > 0.0):
            raise ConfigError(
                "geometry: need source_det_mm > source_iso_mm > 0 "
                f"(got {self.source_det_mm}, {self.source_iso_mm})")
        for name in ("det_pitch_mm", "voxel_mm", "fov_mm", "angular_range_rad"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"geometry: {name} must be positive")
        if self.fov_mm > 2.0 * self.max_fov_radius_mm() + 1e-12:
            raise ConfigError(
                f"geometry: fov_mm={self.fov_mm} exceeds the reconstructible "
                f"field {2.0 * self.max_fov_radius_mm():.3f} mm covered by the detector")

    @property
    def n_rays(self) -> int:
        return self.n_views * self.n_channels

    @property
    def n_voxels(self) -> int:
        return self.image_n * self.image_n

    @property
    def image_extent_mm(self) -> float:
        return self.image_n * self.voxel_mm

    def max_fov_radius_mm(self) -> float:
        """Radius of the circle swept by the outermost channel's ray."""
        half_fan = 0.5 * self.n_channels * self.det_pitch_mm / self.source_det_mm
        # sin saturates for (non-physical) half fans beyond pi/2
        return self.source_iso_mm * math.sin(min(half_fan, 0.5 * math.pi))

    def view_angles(self) -> np.ndarray:
        return (self.angular_range_rad / self.n_views) * np.arange(self.n_views)

    def channel_angles(self) -> np.ndarray:
        """Fan angle of each channel relative to the central source-iso line."""
        pitch = self.det_pitch_mm / self.source_det_mm
        return pitch * (np.arange(self.n_channels) - 0.5 * (self.n_channels - 1))

    def ray_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-ray source points and unit directions, each (n_rays, 2).

        The source sits at SID*(-sin b, cos b) for view angle b; channel c's
        ray is the central direction rotated by the fan angle gamma_c.
        """
        beta = self.view_angles()
        gamma = self.channel_angles()
        src = self.source_iso_mm * np.stack([-np.sin(beta), np.cos(beta)], axis=1)
        central = np.stack([np.sin(beta), -np.cos(beta)], axis=1)
        cg, sg = np.cos(gamma), np.sin(gamma)
        # rotate central[v] by gamma[c]:  R(g) @ u
        dx = central[:, None, 0] * cg[None, :] - central[:, None, 1] * sg[None, :]
        dy = central[:, None, 0] * sg[None, :] + central[:, None, 1] * cg[None, :]
        dirs = np.stack([dx, dy], axis=2).reshape(-1, 2)
        srcs = np.repeat(src, self.n_channels, axis=0)
        return srcs, dirs

    def voxel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) coordinates of voxel centers, each shaped (image_n, image_n)."""
        half = 0.5 * self.image_extent_mm
        coords = -half + self.voxel_mm * (np.arange(self.image_n) + 0.5)
        return np.meshgrid(coords, coords, indexing="xy")

    def fov_mask(self) -> np.ndarray:
        """Boolean (image_n, image_n): voxel centers inside the FOV circle."""
        cx, cy = self.voxel_centers()
        return cx * cx + cy * cy <= (0.5 * self.fov_mm) ** 2

    @staticmethod
    def pitch_for_fov(n_channels: int, fov_mm: float, source_iso_mm: float = 200.0,
                      source_det_mm: float = 250.0, margin: float = 1.05) -> float:
        """Detector pitch (mm) whose fan covers ``fov_mm`` with a small margin."""
        half_fan = math.asin(0.5 * fov_mm * margin / source_iso_mm)
        return 2.0 * half_fan * source_det_mm / n_channels

    def scaled(self, factor: float) -> "FanBeamGeometry":
        """Same topology with every length multiplied by ``factor``."""
        return replace(
            self,
            det_pitch_mm=self.det_pitch_mm * factor,
            voxel_mm=self.voxel_mm * factor,
            fov_mm=self.fov_mm * factor,
            source_iso_mm=self.source_iso_mm * factor,
            source_det_mm=self.source_det_mm * factor,
        )
