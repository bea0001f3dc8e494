"""Sparse fan-beam system matrix with exact ray/pixel intersection lengths.

Coefficients a[n, l] are the length (mm) of ray n inside voxel l, computed by
Siddon-style plane-crossing traversal.  Voxels whose centers fall outside the
FOV circle are excluded, so their columns are structurally empty.  The matrix
is stored both row-major (CSR, for projection/simulation) and column-major
(CSC, for per-voxel coordinate-descent access); both views are built once and
the object is immutable afterwards, so concurrent readers are safe.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ShapeError
from .geometry import FanBeamGeometry


class SystemMatrix:
    """Immutable sparse projector A (n_rays x n_voxels)."""

    def __init__(self, geom: FanBeamGeometry, rows: sp.csr_matrix):
        self.geom = geom
        self.shape = rows.shape
        self._csr = rows
        self._csc = rows.tocsc()
        sq = self._csc.copy()
        sq.data = sq.data * sq.data
        # cached column norms sum_n a[n,l]^2 for curvature assembly
        self.column_sq_norms = np.asarray(sq.sum(axis=0)).ravel()

    @property
    def n_rays(self) -> int:
        return self.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.shape[1]

    def forward(self, image_flat: np.ndarray) -> np.ndarray:
        return self._csr @ image_flat

    def back(self, ray_values: np.ndarray) -> np.ndarray:
        return self._csr.T @ ray_values

    def column(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        """Nonzeros of column l as (ray_indices, lengths)."""
        if not 0 <= l < self.n_voxels:
            raise IndexError(f"voxel index {l} out of range [0, {self.n_voxels})")
        lo, hi = self._csc.indptr[l], self._csc.indptr[l + 1]
        return self._csc.indices[lo:hi], self._csc.data[lo:hi]

    def column_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Raw CSC (indptr, indices, data) for compiled kernels."""
        return self._csc.indptr, self._csc.indices, self._csc.data

    def back_squared(self, ray_values: np.ndarray) -> np.ndarray:
        """sum_n a[n,l]^2 * v[n] per voxel (per-voxel data curvature)."""
        sq = self._csr.copy()
        sq.data = sq.data * sq.data
        return sq.T @ np.asarray(ray_values, dtype=np.float64)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self._csr.sum(axis=1)).ravel()


def _trace_ray(px, py, dx, dy, n, grid_min, h):
    """Pixel indices and intersection lengths of one ray through an n x n grid.

    Returns (flat_indices, lengths); empty arrays when the ray misses the grid.
    Direction (dx, dy) must be unit length so that t-differences are lengths.
    """
    grid_max = grid_min + n * h
    tmin, tmax = -np.inf, np.inf
    for p, d in ((px, dx), (py, dy)):
        if abs(d) < 1e-14:
            if not (grid_min <= p <= grid_max):
                return np.empty(0, np.int64), np.empty(0, np.float64)
        else:
            t0 = (grid_min - p) / d
            t1 = (grid_max - p) / d
            if t0 > t1:
                t0, t1 = t1, t0
            tmin = max(tmin, t0)
            tmax = min(tmax, t1)
    if not tmax > tmin:
        return np.empty(0, np.int64), np.empty(0, np.float64)

    planes = grid_min + h * np.arange(n + 1)
    crossings = [np.array([tmin, tmax])]
    for p, d in ((px, dx), (py, dy)):
        if abs(d) >= 1e-14:
            t = (planes - p) / d
            crossings.append(t[(t > tmin) & (t < tmax)])
    ts = np.unique(np.concatenate(crossings))
    if ts.size < 2:
        return np.empty(0, np.int64), np.empty(0, np.float64)
    lengths = np.diff(ts)
    mids = 0.5 * (ts[1:] + ts[:-1])
    keep = lengths > 0.0
    lengths, mids = lengths[keep], mids[keep]
    ix = np.floor((px + mids * dx - grid_min) / h).astype(np.int64)
    iy = np.floor((py + mids * dy - grid_min) / h).astype(np.int64)
    inside = (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
    return (iy[inside] * n + ix[inside]), lengths[inside]


def build_system_matrix(geom: FanBeamGeometry) -> SystemMatrix:
    """Trace every ray of ``geom`` and assemble the sparse projector."""
    if geom.n_rays < 1 or geom.n_voxels < 1:
        raise ConfigError("geometry produces zero rays or zero voxels")
    srcs, dirs = geom.ray_table()
    grid_min = -0.5 * geom.image_extent_mm
    h = geom.voxel_mm
    n = geom.image_n
    fov_flat = geom.fov_mask().ravel()

    ray_ids, vox_ids, lens = [], [], []
    for ray in range(geom.n_rays):
        idx, ln = _trace_ray(srcs[ray, 0], srcs[ray, 1], dirs[ray, 0], dirs[ray, 1],
                             n, grid_min, h)
        if idx.size == 0:
            continue
        keep = fov_flat[idx]
        idx, ln = idx[keep], ln[keep]
        if idx.size:
            ray_ids.append(np.full(idx.size, ray, np.int64))
            vox_ids.append(idx)
            lens.append(ln)

    if ray_ids:
        coo = sp.coo_matrix(
            (np.concatenate(lens), (np.concatenate(ray_ids), np.concatenate(vox_ids))),
            shape=(geom.n_rays, geom.n_voxels))
    else:
        coo = sp.coo_matrix((geom.n_rays, geom.n_voxels))
    csr = coo.tocsr()
    csr.sum_duplicates()
    return SystemMatrix(geom, csr)


def forward_project(A: SystemMatrix, image: np.ndarray) -> np.ndarray:
    """Line integrals A @ image for a flat (L,) or square (n, n) LAC image."""
    flat = np.asarray(image, dtype=np.float64).ravel()
    if flat.size != A.n_voxels:
        raise ShapeError(f"image has {flat.size} voxels, projector expects {A.n_voxels}")
    return A.forward(flat)


def back_project(A: SystemMatrix, ray_values: np.ndarray) -> np.ndarray:
    """Adjoint A^T @ v, returned as a flat (L,) image."""
    flat = np.asarray(ray_values, dtype=np.float64).ravel()
    if flat.size != A.n_rays:
        raise ShapeError(f"sinogram has {flat.size} rays, projector expects {A.n_rays}")
    return A.back(flat)


def get_column(A: SystemMatrix, l: int) -> tuple[np.ndarray, np.ndarray]:
    """Sparse column l of A as (ray_indices, lengths)."""
    return A.column(l)
