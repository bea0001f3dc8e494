"""Digital tube phantoms, ROI definitions, and ROI statistics.

The phantom is a water cylinder containing non-overlapping solution tubes.
A tube's solute occupies concentration/density of each voxel's volume and
water fills the rest; voxel membership is decided by the voxel center, the
same convention the projector's FOV mask uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .images import MaterialImage
from .materials import MaterialSpec, concentration_to_volume_fraction


@dataclass(frozen=True)
class TubeSpec:
    center_mm: tuple[float, float]
    radius_mm: float
    solute: str | None = None      # None: pure solvent tube
    conc_mg_ml: float = 0.0

    def __post_init__(self):
        if self.radius_mm <= 0.0:
            raise ConfigError("tube radius must be positive")
        if self.conc_mg_ml < 0.0:
            raise ConfigError("tube concentration must be nonnegative")


@dataclass(frozen=True)
class PhantomSpec:
    tubes: tuple[TubeSpec, ...]
    background_radius_mm: float
    grid_n: int
    voxel_mm: float

    def __post_init__(self):
        object.__setattr__(self, "tubes", tuple(self.tubes))
        if self.background_radius_mm <= 0.0:
            raise ConfigError("background radius must be positive")
        if self.grid_n < 1 or self.voxel_mm <= 0.0:
            raise ConfigError("phantom grid is empty")
        for i, a in enumerate(self.tubes):
            ax, ay = a.center_mm
            if np.hypot(ax, ay) + a.radius_mm > self.background_radius_mm + 1e-9:
                raise ConfigError(f"tube {i} extends outside the water cylinder")
            for j in range(i + 1, len(self.tubes)):
                b = self.tubes[j]
                gap = np.hypot(ax - b.center_mm[0], ay - b.center_mm[1])
                if gap < a.radius_mm + b.radius_mm - 1e-9:
                    raise ConfigError(f"tubes {i} and {j} overlap")

    def extent_mm(self) -> float:
        return self.grid_n * self.voxel_mm


def _center_grids(spec: PhantomSpec):
    half = 0.5 * spec.extent_mm()
    coords = -half + spec.voxel_mm * (np.arange(spec.grid_n) + 0.5)
    return np.meshgrid(coords, coords, indexing="xy")


def build_phantom(spec: PhantomSpec, materials: list[MaterialSpec]) -> MaterialImage:
    """Fraction image of the phantom.  The single solvent-role material fills
    the background cylinder and the non-solute remainder of every tube."""
    names = [m.name for m in materials]
    solvent_idx = [i for i, m in enumerate(materials) if m.role == "solvent"]
    if len(solvent_idx) != 1:
        raise ConfigError(f"exactly one solvent material required, got {len(solvent_idx)}")
    solvent = solvent_idx[0]
    by_name = {m.name: (i, m) for i, m in enumerate(materials)}

    cx, cy = _center_grids(spec)
    fractions = np.zeros((spec.grid_n, spec.grid_n, len(materials)))
    background = cx * cx + cy * cy <= spec.background_radius_mm ** 2
    fractions[background, solvent] = 1.0

    for tube in spec.tubes:
        inside = ((cx - tube.center_mm[0]) ** 2 + (cy - tube.center_mm[1]) ** 2
                  <= tube.radius_mm ** 2)
        if tube.solute is None or tube.conc_mg_ml == 0.0:
            fractions[inside, :] = 0.0
            fractions[inside, solvent] = 1.0
            continue
        if tube.solute not in by_name:
            raise ConfigError(f"unknown solute material {tube.solute!r}")
        m, mat = by_name[tube.solute]
        frac = concentration_to_volume_fraction(tube.conc_mg_ml, mat)
        fractions[inside, :] = 0.0
        fractions[inside, m] = frac
        fractions[inside, solvent] = 1.0 - frac

    img = MaterialImage(fractions, spec.voxel_mm, tuple(names))
    img.validate()
    return img


@dataclass(frozen=True)
class RoiSpec:
    """Centered square patches, one per tube: (center_iy, center_ix, half_width)."""

    patches: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "patches", tuple(tuple(p) for p in self.patches))

    @property
    def n_rois(self) -> int:
        return len(self.patches)

    def voxel_slices(self, i: int):
        iy, ix, hw = self.patches[i]
        return slice(iy - hw, iy + hw + 1), slice(ix - hw, ix + hw + 1)


def rois_from_phantom(spec: PhantomSpec, roi_fraction: float = 0.5) -> RoiSpec:
    """Per-tube centered square patch whose side covers ``roi_fraction`` of
    the tube diameter.  Patches are validated to lie strictly inside their
    tubes (corner voxel centers included)."""
    if not 0.0 < roi_fraction < 1.0:
        raise ConfigError(f"roi_fraction {roi_fraction} outside (0, 1)")
    half = 0.5 * spec.extent_mm()
    patches = []
    for t, tube in enumerate(spec.tubes):
        ix = int((tube.center_mm[0] + half) / spec.voxel_mm)
        iy = int((tube.center_mm[1] + half) / spec.voxel_mm)
        hw = max(int(round((roi_fraction * 2.0 * tube.radius_mm / spec.voxel_mm - 1.0)
                           / 2.0)), 0)
        cx = -half + spec.voxel_mm * (ix + 0.5)
        cy = -half + spec.voxel_mm * (iy + 0.5)
        corner = np.hypot(abs(cx - tube.center_mm[0]) + hw * spec.voxel_mm,
                          abs(cy - tube.center_mm[1]) + hw * spec.voxel_mm)
        if corner + 0.5 * np.sqrt(2.0) * spec.voxel_mm >= tube.radius_mm:
            raise ConfigError(f"ROI patch for tube {t} is not strictly inside the tube; "
                              "reduce roi_fraction or enlarge the tube")
        if not (hw <= ix < spec.grid_n - hw and hw <= iy < spec.grid_n - hw):
            raise ConfigError(f"ROI patch for tube {t} leaves the grid")
        patches.append((iy, ix, hw))
    return RoiSpec(tuple(patches))


def roi_truth(spec: PhantomSpec, materials: list[MaterialSpec]) -> np.ndarray:
    """(n_tubes, M) ground-truth fractions of each tube's solution."""
    solvent = [i for i, m in enumerate(materials) if m.role == "solvent"][0]
    by_name = {m.name: (i, m) for i, m in enumerate(materials)}
    out = np.zeros((len(spec.tubes), len(materials)))
    for t, tube in enumerate(spec.tubes):
        if tube.solute is None or tube.conc_mg_ml == 0.0:
            out[t, solvent] = 1.0
            continue
        m, mat = by_name[tube.solute]
        frac = concentration_to_volume_fraction(tube.conc_mg_ml, mat)
        out[t, m] = frac
        out[t, solvent] = 1.0 - frac
    return out


def roi_stats(img: MaterialImage, rois: RoiSpec) -> np.ndarray:
    """(n_rois, M) arithmetic mean fraction over each patch."""
    out = np.zeros((rois.n_rois, img.n_materials))
    for i in range(rois.n_rois):
        ys, xs = rois.voxel_slices(i)
        if not (0 <= ys.start and ys.stop <= img.grid_n
                and 0 <= xs.start and xs.stop <= img.grid_n):
            raise ShapeError(f"ROI {i} out of image bounds")
        out[i] = img.fractions[ys, xs, :].mean(axis=(0, 1))
    return out


def roi_pixels(img_2d: np.ndarray, rois: RoiSpec, i: int) -> np.ndarray:
    """Patch pixels of a scalar (n, n) image, flattened."""
    ys, xs = rois.voxel_slices(i)
    return img_2d[ys, xs].ravel()


def error_table(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Percent error 100*|est - truth|/truth; NaN where truth is zero."""
    est = np.asarray(estimate, dtype=np.float64)
    tr = np.asarray(truth, dtype=np.float64)
    if est.shape != tr.shape:
        raise ShapeError(f"estimate {est.shape} and truth {tr.shape} differ")
    with np.errstate(divide="ignore", invalid="ignore"):
        pct = 100.0 * np.abs(est - tr) / np.abs(tr)
    pct[tr == 0.0] = np.nan
    return pct
