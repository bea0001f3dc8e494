"""The spectral forward model: per-bin, per-material linear attenuation.

An E x M mixing table maps a voxel's material volume fractions to its linear
attenuation coefficient in every energy bin.  The table is calibrated
empirically by least squares against ground-truth fractions (no physics
tables), and can be serialized to a plain-text file that round-trips
bit-exactly at 17 significant digits.
"""

from __future__ import annotations

import os
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ConfigError, FileFormatError, ShapeError


@dataclass(frozen=True)
class MixingMatrix:
    """values[e, m]: LAC (1/mm) of pure material m in energy bin e."""

    values: np.ndarray
    bin_edges_kev: tuple[float, ...]
    material_names: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "bin_edges_kev", tuple(float(b) for b in self.bin_edges_kev))
        object.__setattr__(self, "material_names", tuple(self.material_names))
        if v.ndim != 2:
            raise ConfigError("mixing matrix must be 2-D")
        e, m = v.shape
        if e < m:
            raise ConfigError(
                f"mixing matrix needs at least as many bins as materials (got {e} x {m})")
        if len(self.bin_edges_kev) != e + 1:
            raise ConfigError(f"expected {e + 1} bin edges, got {len(self.bin_edges_kev)}")
        if len(self.material_names) != m:
            raise ConfigError(f"expected {m} material names, got {len(self.material_names)}")
        if not np.isfinite(v).all():
            raise ConfigError("mixing matrix entries must be finite")
        for name in self.material_names:
            if not name or any(ch.isspace() for ch in name):
                raise ConfigError(f"material name {name!r} not serializable")

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_materials(self) -> int:
        return self.values.shape[1]


def apply_mixing(mix: MixingMatrix, fractions: np.ndarray) -> np.ndarray:
    """Per-bin LAC (1/mm) of a voxel with the given material fractions."""
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (mix.n_materials,):
        raise ShapeError(f"expected {mix.n_materials} fractions, got shape {f.shape}")
    return mix.values @ f


def mix_image(mix: MixingMatrix, fractions_flat: np.ndarray) -> np.ndarray:
    """Vectorized apply_mixing over an (L, M) image; returns (E, L) LAC planes."""
    f = np.asarray(fractions_flat, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != mix.n_materials:
        raise ShapeError(f"expected (L, {mix.n_materials}) fractions, got {f.shape}")
    return mix.values @ f.T


def condition_number(mix: MixingMatrix | np.ndarray) -> float:
    """Ratio of extreme singular values; inf (with a warning) for a zero matrix."""
    v = mix.values if isinstance(mix, MixingMatrix) else np.asarray(mix, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ConfigError("matrix entries must be finite")
    s = np.linalg.svd(v, compute_uv=False)
    if s[0] == 0.0 or s[-1] == 0.0:
        warnings.warn("mixing matrix is singular; condition number is infinite",
                      RuntimeWarning, stacklevel=2)
        return float("inf")
    return float(s[0] / s[-1])


@dataclass(frozen=True)
class CalibrationSet:
    """Paired per-bin LAC samples and ground-truth fractions for Q ROI voxels.

    lac_samples[e, q] is the reconstructed LAC of voxel q in bin e;
    truth[q, m] its known volume fraction of material m.
    """

    lac_samples: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.lac_samples, dtype=np.float64)
        x = np.asarray(self.truth, dtype=np.float64)
        object.__setattr__(self, "lac_samples", mu)
        object.__setattr__(self, "truth", x)
        if mu.ndim != 2 or x.ndim != 2:
            raise ConfigError("calibration arrays must be 2-D")
        if mu.shape[1] != x.shape[0]:
            raise ShapeError(
                f"lac_samples has {mu.shape[1]} voxels but truth has {x.shape[0]}")
        q, m = x.shape
        if q < m:
            raise ConfigError(f"need at least {m} calibration voxels, got {q}")
        if (x < -1e-12).any() or (x.sum(axis=1) > 1.0 + 1e-9).any():
            raise ConfigError("truth fractions must be >= 0 and sum to <= 1 per voxel")

    @property
    def n_bins(self) -> int:
        return self.lac_samples.shape[0]

    @property
    def n_materials(self) -> int:
        return self.truth.shape[1]


@dataclass(frozen=True)
class CalibrationFit:
    mixing: MixingMatrix
    residual_norm: float  # Frobenius norm of (M x^T - mu)
    design_cond: float    # condition number of the truth design matrix
    mixing_cond: float = field(default=float("nan"))


def calibrate_mixing_matrix(cal: CalibrationSet,
                            bin_edges_kev,
                            material_names,
                            cond_limit: float = 1e12) -> CalibrationFit:
    """Least-squares fit of the E x M mixing table to calibration data.

    Minimizes the Frobenius norm of (values @ truth^T - lac_samples).
    """
    x = cal.truth
    mu = cal.lac_samples
    if len(material_names) != cal.n_materials:
        raise ShapeError(f"{len(material_names)} names for {cal.n_materials} materials")

    sv = np.linalg.svd(x, compute_uv=False)
    design_cond = float("inf") if sv[-1] == 0.0 else float(sv[0] / sv[-1])
    if design_cond * design_cond > cond_limit:
        raise CalibrationError(
            "calibration truth matrix is rank deficient; dependent materials: "
            + ", ".join(_dependent_materials(x, material_names)))

    mt, _, _, _ = np.linalg.lstsq(x, mu.T, rcond=None)
    values = mt.T
    residual = float(np.linalg.norm(values @ x.T - mu))
    mix = MixingMatrix(values, bin_edges_kev, material_names)
    return CalibrationFit(mix, residual, design_cond, condition_number(mix))


def _dependent_materials(x: np.ndarray, names) -> list[str]:
    """Names of materials with weight in the design's worst null direction."""
    _, s, vt = np.linalg.svd(x)
    null = vt[-1]
    limit = 0.1 * np.abs(null).max()
    return [str(names[m]) for m in range(len(names)) if abs(null[m]) > limit]


# ---------------------------------------------------------------------------
# plain-text serialization: "E M" header, E rows of M LAC values, one line of
# E+1 bin edges (keV), one line of M material names; 17 significant digits
# ---------------------------------------------------------------------------

def save_mixing_matrix(path, mix: MixingMatrix) -> None:
    lines = [f"{mix.n_bins} {mix.n_materials}"]
    for e in range(mix.n_bins):
        lines.append(" ".join(f"{v:.17g}" for v in mix.values[e]))
    lines.append(" ".join(f"{b:.17g}" for b in mix.bin_edges_kev))
    lines.append(" ".join(mix.material_names))
    text = "\n".join(lines) + "\n"
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_mixing_matrix(path) -> MixingMatrix:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    try:
        e, m = (int(tok) for tok in lines[0].split())
        if len(lines) != e + 3:
            raise ValueError(f"expected {e + 3} lines, found {len(lines)}")
        values = np.array([[float(tok) for tok in lines[1 + row].split()]
                           for row in range(e)])
        if values.shape != (e, m):
            raise ValueError(f"value block is {values.shape}, header says {(e, m)}")
        edges = tuple(float(tok) for tok in lines[1 + e].split())
        if len(edges) != e + 1:
            raise ValueError(f"expected {e + 1} bin edges, found {len(edges)}")
        names = tuple(lines[2 + e].split())
        if len(names) != m:
            raise ValueError(f"expected {m} material names, found {len(names)}")
    except (ValueError, IndexError) as exc:
        raise FileFormatError(f"bad mixing-matrix file {path}: {exc}") from exc
    return MixingMatrix(values, edges, names)
