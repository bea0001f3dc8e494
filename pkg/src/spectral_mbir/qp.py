"""Per-voxel constrained quadratic subproblem and its exact solver.

Each coordinate-descent step minimizes, over the new voxel value v,

    0.5 * v^T H v + d^T v      s.t.  v >= 0  and (optionally) sum(v) <= bound

with H symmetric positive definite.  The solver enumerates active sets: every
subset of the nonnegativity constraints, with and without the sum constraint
active, in a fixed (popcount, lexicographic, sum-inactive-first) order, and
returns the first candidate whose KKT conditions hold.  Strict convexity
makes any KKT point the unique minimizer, so the fixed order serves
determinism only.  H is never projected or repaired: an indefinite or
unsolvable system is an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import NumericError, ShapeError

_ACCEPT_TOL = 1e-11  # scaled acceptance slack for roundoff, not a projection


@dataclass(frozen=True)
class VoxelQP:
    """One voxel's quadratic subproblem.

    ``gradient0`` is the gradient of the total cost with respect to the voxel
    value evaluated at v = 0, so the full gradient at v is H v + gradient0.
    ``sum_bound`` is None for scalar (LAC) images, 1.0 for fraction images.
    """

    hessian: np.ndarray
    gradient0: np.ndarray
    sum_bound: float | None = 1.0

    def __post_init__(self):
        h = np.ascontiguousarray(self.hessian, dtype=np.float64)
        g = np.ascontiguousarray(self.gradient0, dtype=np.float64)
        object.__setattr__(self, "hessian", h)
        object.__setattr__(self, "gradient0", g)
        if h.ndim != 2 or h.shape[0] != h.shape[1] or g.shape != (h.shape[0],):
            raise ShapeError(f"inconsistent QP shapes {h.shape}, {g.shape}")
        if not (np.isfinite(h).all() and np.isfinite(g).all()):
            raise NumericError("QP data contains non-finite values")

    @property
    def n(self) -> int:
        return self.gradient0.size


@njit(cache=True)
def _lu_solve(a, b):
    """In-place Gaussian elimination with partial pivoting.

    Returns False when a pivot vanishes (singular system); a and b are
    destroyed either way and b holds the solution on success.
    """
    n = a.shape[0]
    for col in range(n):
        piv = col
        big = abs(a[col, col])
        for r in range(col + 1, n):
            if abs(a[r, col]) > big:
                big = abs(a[r, col])
                piv = r
        if big == 0.0:
            return False
        if piv != col:
            for c in range(n):
                a[col, c], a[piv, c] = a[piv, c], a[col, c]
            b[col], b[piv] = b[piv], b[col]
        inv_p = 1.0 / a[col, col]
        for r in range(col + 1, n):
            f = a[r, col] * inv_p
            if f != 0.0:
                for c in range(col, n):
                    a[r, c] -= f * a[col, c]
                b[r] -= f * b[col]
    for col in range(n - 1, -1, -1):
        s = b[col]
        for c in range(col + 1, n):
            s -= a[col, c] * b[c]
        b[col] = s / a[col, col]
    return True


@njit(cache=True)
def _popcount(mask):
    c = 0
    while mask:
        c += mask & 1
        mask >>= 1
    return c


@njit(cache=True)
def _candidate(H, d, free, nf, sum_active, bound, v_out):
    """Solve one active-set candidate; returns (ok, lam)."""
    m = d.size
    if sum_active:
        size = nf + 1
    else:
        size = nf
    lam = 0.0
    for i in range(m):
        v_out[i] = 0.0
    if size > 0:
        a = np.empty((size, size), np.float64)
        b = np.empty(size, np.float64)
        for i in range(nf):
            fi = free[i]
            for j in range(nf):
                a[i, j] = H[fi, free[j]]
            b[i] = -d[fi]
        if sum_active:
            for i in range(nf):
                a[i, nf] = 1.0
                a[nf, i] = 1.0
            a[nf, nf] = 0.0
            b[nf] = bound
        if not _lu_solve(a, b):
            return False, 0.0
        for i in range(nf):
            v_out[free[i]] = b[i]
        if sum_active:
            lam = b[nf]
    elif sum_active:
        return False, 0.0  # cannot meet sum = bound with no free variables
    return True, lam


@njit(cache=True)
def _check_candidate(H, d, v, lam, free_mask, sum_active, bound, use_sum):
    """Worst relative KKT violation of a solved candidate (<= 1 is clean).

    Primal violations are scaled by the magnitude of v, dual violations by
    the magnitude of the gradient, so mixed problem scales behave.
    """
    m = d.size
    vmax = 0.0
    for i in range(m):
        if abs(v[i]) > vmax:
            vmax = abs(v[i])
    tol_v = _ACCEPT_TOL * (1.0 + vmax)

    viol_p = 0.0
    viol_d = 0.0
    total = 0.0
    gmax = abs(lam)
    for i in range(m):
        total += v[i]
        g = d[i] + lam
        for j in range(m):
            g += H[i, j] * v[j]
        if abs(g) > gmax:
            gmax = abs(g)
        if free_mask & (1 << i):
            if -v[i] > viol_p:
                viol_p = -v[i]  # primal: free variable must be nonnegative
        else:
            if -g > viol_d:
                viol_d = -g     # dual: mu = g must be nonnegative on actives
    if use_sum and not sum_active and total - bound > viol_p:
        viol_p = total - bound
    if sum_active and -lam > viol_d:
        viol_d = -lam
    tol_g = _ACCEPT_TOL * (1.0 + gmax)
    return max(viol_p / tol_v, viol_d / tol_g)


@njit(cache=True)
def _qp_enumerate(H, d, bound, use_sum):
    """Active-set enumeration.

    Returns (v, lam, status): status 2 = a candidate passed the KKT checks,
    1 = only a fallback (minimum-violation) candidate exists, 0 = no
    candidate was even solvable.
    """
    m = d.size
    v = np.zeros(m, np.float64)
    vtry = np.zeros(m, np.float64)
    free = np.empty(m, np.int64)
    best_viol = np.inf
    best_v = np.zeros(m, np.float64)
    best_lam = 0.0
    found = False

    for pc in range(m + 1):
        for zmask in range(1 << m):
            if _popcount(zmask) != pc:
                continue
            nf = 0
            for i in range(m):
                if not (zmask & (1 << i)):
                    free[nf] = i
                    nf += 1
            free_mask = (~zmask) & ((1 << m) - 1)
            for sum_active in (False, True):
                if sum_active and not use_sum:
                    continue
                ok, lam = _candidate(H, d, free, nf, sum_active, bound, vtry)
                if not ok:
                    continue
                viol = _check_candidate(H, d, vtry, lam, free_mask,
                                        sum_active, bound, use_sum)
                if viol <= 1.0:
                    for i in range(m):
                        v[i] = 0.0 if (zmask & (1 << i)) else max(vtry[i], 0.0)
                    return v, lam, 2
                if viol < best_viol:
                    best_viol = viol
                    best_lam = lam
                    for i in range(m):
                        best_v[i] = 0.0 if (zmask & (1 << i)) else max(vtry[i], 0.0)
                    found = True

    return best_v, best_lam, (1 if found else 0)


def kkt_residuals(qp: VoxelQP, v: np.ndarray, lam: float = 0.0) -> dict[str, float]:
    """Standard KKT residual quadruple with mu reconstructed as
    clip(H v + d + lam, 0)."""
    g = qp.hessian @ v + qp.gradient0 + lam
    mu = np.maximum(g, 0.0)
    stationarity = float(np.abs(g - mu).max())  # negative part of g
    primal = float(max(np.max(-v, initial=0.0), 0.0))
    comp = float(np.abs(mu * v).max())
    dual = max(-lam, 0.0)
    if qp.sum_bound is not None:
        gap = float(np.sum(v) - qp.sum_bound)
        primal = max(primal, gap)
        comp = max(comp, abs(lam * gap))
    return {"stationarity": stationarity, "primal": max(primal, 0.0),
            "dual": dual, "complementarity": comp}


def solve_voxel_qp(qp: VoxelQP, return_multiplier: bool = False):
    """Unique constrained minimizer of the voxel subproblem.

    Raises NumericError for an asymmetric or indefinite Hessian (never
    silently projected) and verifies the KKT residuals of the returned point.
    """
    h = qp.hessian
    scale = float(np.abs(h).max()) + float(np.abs(qp.gradient0).max()) + 1.0
    if float(np.abs(h - h.T).max()) > 1e-12 * scale:
        raise NumericError("QP Hessian is not symmetric")
    try:
        np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        raise NumericError("QP Hessian is not positive definite") from None

    use_sum = qp.sum_bound is not None
    bound = qp.sum_bound if use_sum else 0.0
    v, lam, status = _qp_enumerate(h, qp.gradient0, bound, use_sum)
    if status == 0:
        raise NumericError("QP active-set enumeration found no solvable candidate")
    res = kkt_residuals(qp, v, lam)
    if max(res.values()) > 1e-9 * scale:
        raise NumericError(f"QP solution failed KKT verification: {res}")
    return (v, lam) if return_multiplier else v
