"""Iterative coordinate-descent optimizer for direct material reconstruction.

The objective is the weighted least-squares data term summed over energy
bins plus the quadratic neighborhood prior:

    cost(x) = 0.5 * sum_e sum_n w[e,n] * (y[e,n] - proj(lac_e(x))[n])^2 + U(x)

where lac_e(x) is the mixing table applied to the fraction image.  Each sweep
visits every voxel once and replaces its value with the exact minimizer of
the cost restricted to that voxel (a small constrained QP), updating the
per-bin residual sinograms incrementally.  The scalar (single-bin LAC) mode
is the same machinery with one bin, identity mixing, and no sum constraint.

Concurrency: sweeps run single-threaded; no voxel partitioning is
implemented, which keeps every sweep bit-deterministic for a fixed visit
order.  The read-only inputs (projector, mixing table, weights, data) are
safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import NumericError, ShapeError
from .images import MaterialImage, SpectralSinogram, WeightMatrix
from .mixing import MixingMatrix
from .projector import SystemMatrix, build_system_matrix
from .qp import VoxelQP, _qp_enumerate
from .regularizer import RegularizerConfig, neighbor_table, prior_value

COST_INCREASE_TOL = 1e-9


def _fsum(arr: np.ndarray) -> float:
    """Exactly rounded sum; keeps the monotone-descent check meaningful."""
    return math.fsum(arr.ravel())


@dataclass
class IcdState:
    """Mutable optimizer state: current image, residual sinograms, history."""

    fractions_flat: np.ndarray          # (L, M)
    error: np.ndarray                   # (E, N) residuals y - proj(lac(x))
    grid_n: int
    sweep_count: int = 0
    cost_history: list = field(default_factory=list)   # (cost, max_update)
    qp_fallbacks: int = 0

    @classmethod
    def initialize(cls, x0_flat: np.ndarray, y: np.ndarray,
                   A: SystemMatrix, mix_values: np.ndarray) -> "IcdState":
        x0 = np.ascontiguousarray(x0_flat, dtype=np.float64)
        err = _residual(x0, y, A, mix_values)
        return cls(x0, err, int(round(math.sqrt(x0.shape[0]))))

    def image(self, voxel_mm: float, names=()) -> MaterialImage:
        n = self.grid_n
        return MaterialImage(self.fractions_flat.reshape(n, n, -1).copy(),
                             voxel_mm, names)

    def consistency_drift(self, y: np.ndarray, A: SystemMatrix,
                          mix_values: np.ndarray) -> float:
        """Relative L2 gap between the stored and freshly recomputed residual."""
        fresh = _residual(self.fractions_flat, y, A, mix_values)
        denom = float(np.linalg.norm(fresh)) or 1.0
        return float(np.linalg.norm(self.error - fresh)) / denom


def _residual(x_flat, y, A, mix_values):
    lac = mix_values @ x_flat.T                     # (E, L)
    err = np.empty_like(y)
    for e in range(y.shape[0]):
        err[e] = y[e] - A.forward(lac[e])
    return err


def spectral_cost(state: IcdState, weights: WeightMatrix,
                  reg: RegularizerConfig) -> float:
    """Data term plus prior for the state's current image and residuals."""
    w = weights.values
    if w.shape != state.error.shape:
        raise ShapeError(f"weights {w.shape} do not match residuals {state.error.shape}")
    terms = w * state.error * state.error
    if not np.isfinite(terms).all():
        e, n = np.unravel_index(int(np.argmin(np.isfinite(terms))), terms.shape)
        raise NumericError(f"non-finite cost contribution at bin {e}, ray {n}")
    n = state.grid_n
    x_img = state.fractions_flat.reshape(n, n, -1)
    return 0.5 * _fsum(terms) + prior_value(x_img, reg)


def voxel_subproblem(state: IcdState, l: int, weights: WeightMatrix,
                     reg: RegularizerConfig, mix: MixingMatrix | np.ndarray,
                     A: SystemMatrix, sum_bound: float | None = 1.0) -> VoxelQP:
    """Exact quadratic model of the cost in voxel l's new value v.

    The QP gradient is taken at v = 0, so the cost gradient at the current
    value is ``hessian @ x_l + gradient0``.  An empty projector column yields
    the prior-only subproblem.
    """
    mix_values = mix.values if isinstance(mix, MixingMatrix) else np.asarray(mix)
    L, M = state.fractions_flat.shape
    if not 0 <= l < L:
        raise IndexError(f"voxel {l} out of range [0, {L})")
    rays, lens = A.column(l)
    w = weights.values
    we = (lens * lens) @ w[:, rays].T                     # (E,)
    te = lens @ (w[:, rays] * state.error[:, rays]).T     # (E,)
    h_data = (mix_values * we[:, None]).T @ mix_values    # (M, M)

    idx, wgt, wsum = _neighbor_row(state.grid_n, l, reg)
    cprior = reg.inv_sigma_sq * wsum
    hess = h_data + cprior * np.eye(M)
    x_cur = state.fractions_flat[l]
    nbr_avg = wgt @ state.fractions_flat[idx] if idx.size else np.zeros(M)
    grad0 = -(mix_values.T @ te) - h_data @ x_cur - reg.inv_sigma_sq * nbr_avg
    return VoxelQP(hess, grad0, sum_bound)


def _neighbor_row(n, l, reg):
    iy, ix = divmod(l, n)
    idx, wgt = [], []
    for dy, dx, w in reg.offsets():
        ny, nx = iy + dy, ix + dx
        if 0 <= ny < n and 0 <= nx < n:
            idx.append(ny * n + nx)
            wgt.append(w)
    return np.asarray(idx, dtype=np.int64), np.asarray(wgt), float(sum(wgt))


@njit(cache=True)
def _sweep_kernel(x_flat, err, w, mix, indptr, indices, data,
                  nbr_idx, nbr_wgt, nbr_wsum, inv_s2, bound, use_sum, order):
    """One full voxel sweep; mutates x_flat and err in place.

    Returns (max_update, fail_voxel, fallback_count); fail_voxel is -1 unless
    the QP enumeration found no solvable candidate.  Voxels with neither data
    (empty column) nor prior curvature are skipped: the cost does not depend
    on them.  A voxel whose QP only passes the fallback path is left
    unchanged, which preserves feasibility and monotonicity.
    """
    L, M = x_flat.shape
    E = err.shape[0]
    we = np.empty(E, np.float64)
    te = np.empty(E, np.float64)
    H = np.empty((M, M), np.float64)
    d0 = np.empty(M, np.float64)
    dmu = np.empty(E, np.float64)
    max_update = 0.0
    fallbacks = 0

    for oi in range(order.size):
        l = order[oi]
        lo, hi = indptr[l], indptr[l + 1]
        cprior = inv_s2 * nbr_wsum[l]
        if lo == hi and cprior == 0.0:
            continue
        for e in range(E):
            we[e] = 0.0
            te[e] = 0.0
        for j in range(lo, hi):
            n = indices[j]
            a = data[j]
            a2 = a * a
            for e in range(E):
                wn = w[e, n]
                we[e] += a2 * wn
                te[e] += a * wn * err[e, n]
        hmax = 0.0
        for m in range(M):
            for m2 in range(m, M):
                s = 0.0
                for e in range(E):
                    s += mix[e, m] * we[e] * mix[e, m2]
                H[m, m2] = s
                H[m2, m] = s
            H[m, m] += cprior
            for m2 in range(M):
                if abs(H[m, m2]) > hmax:
                    hmax = abs(H[m, m2])
        if hmax == 0.0:
            continue
        for m in range(M):
            s = 0.0
            for e in range(E):
                s += mix[e, m] * te[e]
            hx = -cprior * x_flat[l, m]
            for m2 in range(M):
                hx += H[m, m2] * x_flat[l, m2]
            nb_avg = 0.0
            for k in range(8):
                nb = nbr_idx[l, k]
                if nb >= 0:
                    nb_avg += nbr_wgt[l, k] * x_flat[nb, m]
            d0[m] = -s - hx - inv_s2 * nb_avg
        v, _, status = _qp_enumerate(H, d0, bound, use_sum)
        if status == 0:
            return max_update, l, fallbacks
        if status == 1:
            fallbacks += 1
            continue
        dmax = 0.0
        for m in range(M):
            dm = abs(v[m] - x_flat[l, m])
            if dm > dmax:
                dmax = dm
        if dmax > 0.0:
            for e in range(E):
                s = 0.0
                for m in range(M):
                    s += mix[e, m] * (v[m] - x_flat[l, m])
                dmu[e] = s
            for j in range(lo, hi):
                n = indices[j]
                a = data[j]
                for e in range(E):
                    err[e, n] -= a * dmu[e]
            for m in range(M):
                x_flat[l, m] = v[m]
            if dmax > max_update:
                max_update = dmax
    return max_update, -1, fallbacks


def icd_sweep(state: IcdState, weights: WeightMatrix, reg: RegularizerConfig,
              mix: MixingMatrix | np.ndarray, A: SystemMatrix,
              order: np.ndarray | None = None,
              sum_bound: float | None = 1.0) -> IcdState:
    """Visit every voxel once; assert the cost never increases."""
    mix_values = mix.values if isinstance(mix, MixingMatrix) else np.asarray(mix)
    if order is None:
        order = np.arange(state.fractions_flat.shape[0], dtype=np.int64)
    if state.cost_history:
        cost_before = state.cost_history[-1][0]
    else:
        cost_before = spectral_cost(state, weights, reg)
        state.cost_history.append((cost_before, math.inf))

    indptr, indices, data = A.column_arrays()
    nbr_idx, nbr_wgt, nbr_wsum = _neighbor_tables(state.grid_n, reg)
    max_update, fail_voxel, fallbacks = _sweep_kernel(
        state.fractions_flat, state.error, weights.values, mix_values,
        indptr, indices, data, nbr_idx, nbr_wgt, nbr_wsum,
        reg.inv_sigma_sq, sum_bound if sum_bound is not None else 0.0,
        sum_bound is not None, np.ascontiguousarray(order, dtype=np.int64))
    if fail_voxel >= 0:
        raise NumericError(f"voxel QP unsolvable at voxel {fail_voxel} "
                           f"during sweep {state.sweep_count}")
    state.qp_fallbacks += fallbacks
    state.sweep_count += 1

    cost_after = spectral_cost(state, weights, reg)
    if cost_after > cost_before + COST_INCREASE_TOL:
        raise NumericError(
            f"cost increased by {cost_after - cost_before:.3e} in sweep "
            f"{state.sweep_count} (before={cost_before!r}, after={cost_after!r}): "
            "internal inconsistency")
    state.cost_history.append((cost_after, max_update))
    return state


_NEIGHBOR_CACHE: dict = {}


def _neighbor_tables(n, reg):
    key = (n, reg.side_weight, reg.diag_weight)
    if key not in _NEIGHBOR_CACHE:
        _NEIGHBOR_CACHE[key] = neighbor_table(n, reg)
    return _NEIGHBOR_CACHE[key]


@dataclass(frozen=True)
class ReconstructOptions:
    n_iterations: int = 150
    tol: float = 0.0                 # stop when max per-voxel update falls below
    visit_order: str = "raster"      # "raster" | "shuffled"
    seed: int = 0                    # shuffle seed
    start_iteration: int = 0         # for checkpoint resume
    x0_flat: np.ndarray | None = None

    def __post_init__(self):
        if self.n_iterations < 0:
            raise ShapeError("n_iterations must be >= 0")
        if self.visit_order not in ("raster", "shuffled"):
            raise ShapeError(f"unknown visit order {self.visit_order!r}")


def auto_sigma(A: SystemMatrix, weights: WeightMatrix) -> float:
    """Light-regularization default: prior curvature 1/sigma^2 equals 1% of
    the median per-voxel data curvature sum_e sum_n a^2 w[e,n]."""
    wsum = weights.values.sum(axis=0)
    theta2 = A.back_squared(wsum)
    live = theta2[theta2 > 0.0]
    if live.size == 0:
        raise NumericError("cannot choose sigma: all data curvatures are zero")
    inv_s2 = 0.01 * float(np.median(live))
    return 1.0 / math.sqrt(inv_s2)


def _visit_order(options, L, sweep_idx):
    if options.visit_order == "raster":
        return np.arange(L, dtype=np.int64)
    rng = np.random.default_rng([options.seed, sweep_idx])
    return rng.permutation(L).astype(np.int64)


def run_icd(y: np.ndarray, weights: WeightMatrix, mix_values: np.ndarray,
            A: SystemMatrix, reg: RegularizerConfig,
            options: ReconstructOptions, sum_bound: float | None,
            progress=None) -> IcdState:
    """Shared driver for the spectral and scalar paths."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    E, M = mix_values.shape
    if y.shape != (E, A.n_rays):
        raise ShapeError(f"data is {y.shape}, expected ({E}, {A.n_rays})")
    if weights.values.shape != y.shape:
        raise ShapeError("weights shape does not match data")
    if not np.isfinite(y[weights.values > 0.0]).all():
        raise NumericError("non-finite measurements carry nonzero weight")

    L = A.n_voxels
    x0 = options.x0_flat if options.x0_flat is not None else np.zeros((L, M))
    if x0.shape != (L, M):
        raise ShapeError(f"x0 is {x0.shape}, expected ({L}, {M})")
    state = IcdState.initialize(x0, y, A, mix_values)

    for sweep in range(options.start_iteration, options.n_iterations):
        order = _visit_order(options, L, sweep)
        icd_sweep(state, weights, reg, mix_values, A, order=order,
                  sum_bound=sum_bound)
        if progress is not None:
            progress(sweep + 1, state)
        if options.tol > 0.0 and state.cost_history[-1][1] < options.tol:
            break
    return state


def reconstruct(y: SpectralSinogram, mix: MixingMatrix,
                geom_or_A, weights: WeightMatrix | None = None,
                reg: RegularizerConfig | None = None,
                options: ReconstructOptions = ReconstructOptions(),
                progress=None) -> MaterialImage:
    """Direct fraction-image reconstruction from a multi-bin sinogram."""
    A = geom_or_A if isinstance(geom_or_A, SystemMatrix) else build_system_matrix(geom_or_A)
    if mix.n_bins != y.n_bins:
        raise ShapeError(f"mixing table has {mix.n_bins} bins, sinogram {y.n_bins}")
    if weights is None:
        weights = WeightMatrix.from_sinogram(y)
    if reg is None:
        reg = RegularizerConfig(sigma=auto_sigma(A, weights))
    state = run_icd(y.rays(), weights, mix.values, A, reg, options,
                    sum_bound=1.0, progress=progress)
    img = state.image(A.geom.voxel_mm, mix.material_names)
    img.validate()
    return img


def scalar_reconstruct(y_bin: np.ndarray, geom_or_A,
                       weights: np.ndarray | WeightMatrix,
                       reg: RegularizerConfig | None = None,
                       options: ReconstructOptions = ReconstructOptions(),
                       progress=None) -> np.ndarray:
    """Single-bin LAC reconstruction: one material, identity mixing, and only
    the nonnegativity constraint (LAC values may exceed 1)."""
    A = geom_or_A if isinstance(geom_or_A, SystemMatrix) else build_system_matrix(geom_or_A)
    y = np.ascontiguousarray(y_bin, dtype=np.float64).reshape(1, -1)
    if not isinstance(weights, WeightMatrix):
        weights = WeightMatrix(np.asarray(weights, dtype=np.float64).reshape(1, -1))
    if reg is None:
        reg = RegularizerConfig(sigma=auto_sigma(A, weights))
    state = run_icd(y, weights, np.array([[1.0]]), A, reg, options,
                    sum_bound=None, progress=progress)
    n = state.grid_n
    return state.fractions_flat.reshape(n, n)


def cost_from_image(x_flat: np.ndarray, y: np.ndarray, weights: WeightMatrix,
                    mix_values: np.ndarray, A: SystemMatrix,
                    reg: RegularizerConfig) -> float:
    """Cost of an arbitrary image, built from a fresh residual (for
    finite-difference verification)."""
    state = IcdState.initialize(x_flat, y, A, mix_values)
    return spectral_cost(state, weights, reg)
