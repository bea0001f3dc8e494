import math

import numpy as np
import pytest

from _problems import random_spectral_problem, small_geometry
from spectral_mbir.errors import NumericError, ShapeError
from spectral_mbir.icd import (
    IcdState,
    ReconstructOptions,
    auto_sigma,
    cost_from_image,
    icd_sweep,
    reconstruct,
    run_icd,
    scalar_reconstruct,
    spectral_cost,
    voxel_subproblem,
)
from spectral_mbir.images import SpectralSinogram, WeightMatrix
from spectral_mbir.mixing import MixingMatrix
from spectral_mbir.projector import build_system_matrix, forward_project, get_column
from spectral_mbir.qp import solve_voxel_qp
from spectral_mbir.regularizer import RegularizerConfig

NO_PRIOR = RegularizerConfig(sigma=math.inf)


def test_cost_zero_at_exact_solution():
    rng = np.random.default_rng(0)
    _, A, mix, x, y, weights = random_spectral_problem(rng)
    state = IcdState.initialize(x, y, A, mix)
    assert spectral_cost(state, weights, NO_PRIOR) == 0.0


def test_cost_matches_dense_oracle():
    # Oracle: assemble the dense projector column by column and evaluate
    # 0.5 * sum_e (y_e - A M x)^T W_e (y_e - A M x) with plain matrix algebra.
    rng = np.random.default_rng(1)
    geom, A, mix, _, _, weights = random_spectral_problem(rng, image_n=8,
                                                          n_views=12, n_channels=16)
    L = geom.n_voxels
    x = np.full((L, 2), 0.21)
    y = rng.random((mix.shape[0], A.n_rays))
    state = IcdState.initialize(x, y, A, mix)
    got = spectral_cost(state, weights, NO_PRIOR)

    dense = np.zeros((A.n_rays, L))
    for l in range(L):
        rays, lens = get_column(A, l)
        dense[rays, l] = lens
    lac = mix @ x.T
    expected = 0.0
    for e in range(mix.shape[0]):
        r = y[e] - dense @ lac[e]
        expected += 0.5 * float(r @ (weights.values[e] * r))
    assert got == pytest.approx(expected, rel=1e-12)


def test_cost_rejects_nonfinite():
    rng = np.random.default_rng(2)
    _, A, mix, x, y, weights = random_spectral_problem(rng, image_n=8)
    y = y.copy()
    y[1, 5] = np.nan
    state = IcdState.initialize(x, y, A, mix)
    with pytest.raises(NumericError, match="bin 1"):
        spectral_cost(state, weights, NO_PRIOR)


def test_subproblem_scalar_limit_equals_theta2():
    # one bin, one material, prior off: the Hessian reduces to the scalar
    # data curvature sum_n a_nl^2 d_n
    rng = np.random.default_rng(3)
    geom, A, _, _, _, _ = random_spectral_problem(rng, image_n=8)
    L = geom.n_voxels
    mix = np.array([[1.0]])
    y = rng.random((1, A.n_rays))
    w = WeightMatrix(rng.random((1, A.n_rays)) + 0.2)
    state = IcdState.initialize(np.zeros((L, 1)), y, A, mix)
    l = (geom.image_n // 2) * geom.image_n + geom.image_n // 2
    qp = voxel_subproblem(state, l, w, NO_PRIOR, mix, A, sum_bound=None)
    rays, lens = get_column(A, l)
    theta2 = float(np.sum(lens * lens * w.values[0, rays]))
    assert qp.hessian[0, 0] == pytest.approx(theta2, rel=1e-12)


def test_subproblem_additive_over_bins():
    rng = np.random.default_rng(4)
    geom, A, _, _, _, _ = random_spectral_problem(rng, image_n=8)
    L = geom.n_voxels
    l = (geom.image_n // 2) * geom.image_n + geom.image_n // 2
    wrow = rng.random(A.n_rays) + 0.3
    y1 = rng.random((1, A.n_rays))
    s1 = IcdState.initialize(np.zeros((L, 1)), y1, A, np.array([[1.0]]))
    qp1 = voxel_subproblem(s1, l, WeightMatrix(wrow[None, :]), NO_PRIOR,
                           np.array([[1.0]]), A, sum_bound=None)
    y2 = np.vstack([y1, y1])
    s2 = IcdState.initialize(np.zeros((L, 1)), y2, A, np.array([[1.0], [1.0]]))
    qp2 = voxel_subproblem(s2, l, WeightMatrix(np.vstack([wrow, wrow])), NO_PRIOR,
                           np.array([[1.0], [1.0]]), A, sum_bound=None)
    assert qp2.hessian[0, 0] == pytest.approx(2.0 * qp1.hessian[0, 0], rel=1e-12)
    assert qp2.gradient0[0] == pytest.approx(2.0 * qp1.gradient0[0], rel=1e-12)


def test_subproblem_gradient_and_hessian_match_finite_differences():
    # Oracle: central differences of the full cost.  The cost is exactly
    # quadratic, so the only FD error is floating-point cancellation; the
    # Hessian uses a larger step for that reason.
    rng = np.random.default_rng(5)
    geom, A, mix, x, y, weights = random_spectral_problem(rng)
    y = y + 0.1 * rng.standard_normal(y.shape)  # nonzero residuals
    reg = RegularizerConfig(sigma=0.6)
    state = IcdState.initialize(x, y, A, mix)
    L, M = x.shape
    h_grad, h_hess = 1e-5, 1e-3
    for l in map(int, rng.integers(0, L, size=8)):
        qp = voxel_subproblem(state, l, weights, reg, mix, A)
        grad_cur = qp.hessian @ x[l] + qp.gradient0
        for m in range(M):
            xp, xm = x.copy(), x.copy()
            xp[l, m] += h_grad
            xm[l, m] -= h_grad
            fd = (cost_from_image(xp, y, weights, mix, A, reg)
                  - cost_from_image(xm, y, weights, mix, A, reg)) / (2 * h_grad)
            assert grad_cur[m] == pytest.approx(fd, rel=1e-6)
        for m in range(M):
            for m2 in range(M):
                xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
                xpp[l, m] += h_hess; xpp[l, m2] += h_hess
                xpm[l, m] += h_hess; xpm[l, m2] -= h_hess
                xmp[l, m] -= h_hess; xmp[l, m2] += h_hess
                xmm[l, m] -= h_hess; xmm[l, m2] -= h_hess
                fd2 = (cost_from_image(xpp, y, weights, mix, A, reg)
                       - cost_from_image(xpm, y, weights, mix, A, reg)
                       - cost_from_image(xmp, y, weights, mix, A, reg)
                       + cost_from_image(xmm, y, weights, mix, A, reg)) / (4 * h_hess**2)
                assert qp.hessian[m, m2] == pytest.approx(fd2, rel=1e-6, abs=1e-9)


def test_quadratic_change_formula():
    # perturbing one voxel changes the cost by exactly the local quadratic
    rng = np.random.default_rng(6)
    geom, A, mix, x, y, weights = random_spectral_problem(rng)
    y = y + 0.05 * rng.standard_normal(y.shape)
    reg = RegularizerConfig(sigma=0.8)
    state = IcdState.initialize(x, y, A, mix)
    c0 = spectral_cost(state, weights, reg)
    l = int(rng.integers(0, x.shape[0]))
    qp = voxel_subproblem(state, l, weights, reg, mix, A)
    grad_cur = qp.hessian @ x[l] + qp.gradient0
    delta = np.zeros(x.shape[1])
    delta[1] = 0.01
    x2 = x.copy()
    x2[l] += delta
    c1 = cost_from_image(x2, y, weights, mix, A, reg)
    predicted = 0.5 * delta @ qp.hessian @ delta + grad_cur @ delta
    assert (c1 - c0) == pytest.approx(predicted, rel=1e-6)


def test_subproblem_empty_column_is_prior_only():
    rng = np.random.default_rng(7)
    geom, A, mix, x, y, weights = random_spectral_problem(rng)
    reg = RegularizerConfig(sigma=0.5)
    state = IcdState.initialize(x, y, A, mix)
    corner = 0
    assert get_column(A, corner)[0].size == 0
    qp = voxel_subproblem(state, corner, weights, reg, mix, A)
    np.testing.assert_allclose(np.diag(qp.hessian),
                               np.full(x.shape[1], qp.hessian[0, 0]))
    assert qp.hessian[0, 1] == 0.0
    assert qp.hessian[0, 0] > 0.0  # prior curvature only


def test_sweep_noop_at_exact_solution():
    rng = np.random.default_rng(8)
    _, A, mix, x, y, weights = random_spectral_problem(rng)
    state = IcdState.initialize(x.copy(), y, A, mix)
    icd_sweep(state, weights, NO_PRIOR, mix, A)
    assert state.cost_history[-1][1] < 1e-10
    np.testing.assert_allclose(state.fractions_flat, x, atol=1e-10)


def test_single_voxel_image_solved_in_one_sweep():
    geom = small_geometry(image_n=1, n_views=4, n_channels=3, voxel_mm=0.7,
                          fov_mm=0.6)
    A = build_system_matrix(geom)
    mix = np.array([[0.4, 2.0], [0.5, 0.7]])
    x_true = np.array([[0.6, 0.25]])
    y = np.stack([A.forward((mix @ x_true.T)[e]) for e in range(2)])
    weights = WeightMatrix(np.full(y.shape, 2.0))
    state = IcdState.initialize(np.zeros((1, 2)), y, A, mix)
    icd_sweep(state, weights, NO_PRIOR, mix, A)
    np.testing.assert_allclose(state.fractions_flat, x_true, atol=1e-12)


def test_sweep_matches_python_reference():
    # the compiled sweep must agree with the composition of the tested
    # voxel_subproblem + solve_voxel_qp reference, applied sequentially
    rng = np.random.default_rng(9)
    geom, A, mix, x, y, weights = random_spectral_problem(rng, image_n=10)
    y = y + 0.05 * rng.standard_normal(y.shape)
    reg = RegularizerConfig(sigma=0.7)
    state = IcdState.initialize(x.copy(), y, A, mix)
    icd_sweep(state, weights, reg, mix, A)

    ref = IcdState.initialize(x.copy(), y, A, mix)
    L, M = x.shape
    for l in range(L):
        rays, lens = get_column(A, l)
        if rays.size == 0 and reg.inv_sigma_sq == 0.0:
            continue
        qp = voxel_subproblem(ref, l, weights, reg, mix, A)
        v = solve_voxel_qp(qp)
        delta = v - ref.fractions_flat[l]
        if np.abs(delta).max() > 0.0:
            dmu = mix @ delta
            for e in range(mix.shape[0]):
                ref.error[e, rays] -= lens * dmu[e]
            ref.fractions_flat[l] = v
    np.testing.assert_allclose(state.fractions_flat, ref.fractions_flat, atol=1e-9)
    np.testing.assert_allclose(state.error, ref.error, atol=1e-9)


def test_convergence_on_noiseless_16x16():
    rng = np.random.default_rng(10)
    geom, A, mix, x_true, y, _ = random_spectral_problem(
        rng, image_n=16, n_bins=2, n_materials=2, n_views=48, n_channels=32)
    weights = WeightMatrix(np.ones(y.shape))
    state = run_icd(y, weights, mix, A, NO_PRIOR,
                    ReconstructOptions(n_iterations=200), sum_bound=1.0)
    costs = [c for c, _ in state.cost_history]
    assert all(c2 <= c1 + 1e-9 for c1, c2 in zip(costs, costs[1:]))
    assert costs[-1] < 1e-8 * costs[0]


def test_feasibility_after_every_sweep():
    rng = np.random.default_rng(11)
    geom, A, mix, x, y, weights = random_spectral_problem(rng)
    y = y + 0.2 * rng.standard_normal(y.shape)
    reg = RegularizerConfig(sigma=0.5)
    state = IcdState.initialize(np.zeros_like(x), y, A, mix)
    for _ in range(5):
        icd_sweep(state, weights, reg, mix, A)
        assert (state.fractions_flat >= 0.0).all()
        assert state.fractions_flat.sum(axis=1).max() <= 1.0 + 1e-9


def test_error_sinogram_consistency_after_sweeps():
    rng = np.random.default_rng(12)
    _, A, mix, x, y, weights = random_spectral_problem(rng)
    y = y + 0.1 * rng.standard_normal(y.shape)
    reg = RegularizerConfig(sigma=0.5)
    state = IcdState.initialize(np.zeros_like(x), y, A, mix)
    for _ in range(10):
        icd_sweep(state, weights, reg, mix, A)
    assert state.consistency_drift(y, A, mix) < 1e-8


def test_shuffled_order_deterministic_and_converges():
    rng = np.random.default_rng(13)
    _, A, mix, x, y, weights = random_spectral_problem(rng, image_n=8)
    opts = ReconstructOptions(n_iterations=5, visit_order="shuffled", seed=99)
    s1 = run_icd(y, weights, mix, A, NO_PRIOR, opts, sum_bound=1.0)
    s2 = run_icd(y, weights, mix, A, NO_PRIOR, opts, sum_bound=1.0)
    np.testing.assert_array_equal(s1.fractions_flat, s2.fractions_flat)


def test_zero_sinogram_zero_image():
    geom = small_geometry(image_n=8)
    A = build_system_matrix(geom)
    E = 2
    sino = SpectralSinogram(np.zeros((E, geom.n_views, geom.n_channels)),
                            np.ones((E, geom.n_views, geom.n_channels)))
    mix = MixingMatrix(np.array([[0.03, 2.0], [0.02, 3.0]]), (0, 1, 2), ("a", "b"))
    img = reconstruct(sino, mix, A, options=ReconstructOptions(n_iterations=3))
    assert np.all(img.fractions == 0.0)


def test_reconstruct_dimension_mismatch():
    geom = small_geometry(image_n=8)
    A = build_system_matrix(geom)
    sino = SpectralSinogram(np.zeros((3, geom.n_views, geom.n_channels)),
                            np.ones((3, geom.n_views, geom.n_channels)))
    mix = MixingMatrix(np.array([[0.03, 2.0], [0.02, 3.0]]), (0, 1, 2), ("a", "b"))
    with pytest.raises(ShapeError):
        reconstruct(sino, mix, A)


def test_reconstruct_rejects_nan_measurements():
    rng = np.random.default_rng(14)
    _, A, mix, x, y, weights = random_spectral_problem(rng, image_n=8)
    y = y.copy()
    y[0, 0] = np.nan
    with pytest.raises(NumericError):
        run_icd(y, weights, mix, A, NO_PRIOR, ReconstructOptions(n_iterations=1),
                sum_bound=1.0)


def test_scalar_delta_voxel_matches_wls_oracle():
    # Oracle: dense unregularized weighted least squares on the FOV voxels.
    rng = np.random.default_rng(15)
    geom = small_geometry(image_n=4, n_views=24, n_channels=12, voxel_mm=1.0)
    A = build_system_matrix(geom)
    fov = geom.fov_mask().ravel()
    truth = np.zeros(geom.n_voxels)
    truth[5] = 0.21
    y = forward_project(A, truth)
    w = rng.random(A.n_rays) + 0.5
    dense = np.zeros((A.n_rays, geom.n_voxels))
    for l in range(geom.n_voxels):
        rays, lens = get_column(A, l)
        dense[rays, l] = lens
    sw = np.sqrt(w)
    wls = np.zeros(geom.n_voxels)
    wls[fov], *_ = np.linalg.lstsq(sw[:, None] * dense[:, fov], sw * y, rcond=None)

    exact = scalar_reconstruct(y, A, w, reg=NO_PRIOR,
                               options=ReconstructOptions(n_iterations=400, tol=1e-12))
    np.testing.assert_allclose(exact.ravel()[fov], wls[fov], atol=1e-6)

    light = scalar_reconstruct(y, A, w, options=ReconstructOptions(n_iterations=400,
                                                                   tol=1e-12))
    assert abs(light.ravel()[5] - truth[5]) < 5e-3  # within regularization bias


def test_scalar_uniform_disk_flat():
    geom = small_geometry(image_n=16, n_views=48, n_channels=32, voxel_mm=1.0)
    A = build_system_matrix(geom)
    cx, cy = geom.voxel_centers()
    r = 5.0
    disk = np.where(cx * cx + cy * cy <= r * r, 0.04, 0.0)
    y = forward_project(A, disk)
    w = np.full(A.n_rays, 3.0)
    reg = RegularizerConfig(sigma=10.0 * auto_sigma(A, WeightMatrix(w[None, :])))
    img = scalar_reconstruct(y, A, w, reg=reg,
                             options=ReconstructOptions(n_iterations=600, tol=1e-12))
    interior = (cx * cx + cy * cy) <= (r - 3.0 * geom.voxel_mm) ** 2
    vals = img[interior]
    assert vals.max() - vals.min() < 1e-6


def test_reduction_scalar_vs_spectral_identity():
    rng = np.random.default_rng(16)
    geom = small_geometry(image_n=16, n_views=48, n_channels=32)
    A = build_system_matrix(geom)
    cx, cy = geom.voxel_centers()
    lac = np.where(cx * cx + cy * cy <= 25.0, 0.05, 0.0)
    y = forward_project(A, lac)
    w = rng.random(A.n_rays) + 0.5
    opts = ReconstructOptions(n_iterations=30)
    reg = RegularizerConfig(sigma=30.0)
    scalar = scalar_reconstruct(y, A, w, reg=reg, options=opts)
    state = run_icd(y[None, :], WeightMatrix(w[None, :]), np.array([[1.0]]),
                    A, reg, opts, sum_bound=1.0)
    spectral = state.fractions_flat.reshape(geom.image_n, geom.image_n)
    assert np.abs(scalar - spectral).max() < 1e-10


def test_auto_sigma_is_light():
    rng = np.random.default_rng(17)
    _, A, mix, x, y, weights = random_spectral_problem(rng)
    sigma = auto_sigma(A, weights)
    theta2 = A.back_squared(weights.values.sum(axis=0))
    med = np.median(theta2[theta2 > 0])
    assert 1.0 / sigma**2 == pytest.approx(0.01 * med, rel=1e-12)
