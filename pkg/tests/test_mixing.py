import numpy as np
import pytest

from spectral_mbir.errors import (
    CalibrationError,
    ConfigError,
    FileFormatError,
    ShapeError,
)
from spectral_mbir.mixing import (
    CalibrationSet,
    MixingMatrix,
    apply_mixing,
    calibrate_mixing_matrix,
    condition_number,
    load_mixing_matrix,
    mix_image,
    save_mixing_matrix,
)
from spectral_mbir.presets import (
    BIN_EDGES_KEV,
    MATERIAL_NAMES,
    demo_mixing_matrix,
)


# ------------------------------- oracles ---------------------------------

def normal_equations_fit(truth, lac):
    """Independent least-squares oracle: mu x (x^T x)^{-1} by explicit inverse."""
    xtx_inv = np.linalg.inv(truth.T @ truth)
    return lac @ truth @ xtx_inv


def jacobi_singular_values(a, sweeps=60):
    """One-sided Jacobi SVD oracle: orthogonalize columns by plane rotations;
    singular values are the resulting column norms."""
    u = np.array(a, dtype=np.float64, copy=True)
    n = u.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                off = max(off, abs(gamma) / np.sqrt(alpha * beta + 1e-300))
                if gamma == 0.0:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up = c * u[:, p] - s * u[:, q]
                uq = s * u[:, p] + c * u[:, q]
                u[:, p], u[:, q] = up, uq
        if off < 1e-15:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1]


def random_feasible_truth(rng, q, m):
    """Rows: nonnegative fractions summing to <= 1, solvent-dominant."""
    solutes = rng.random((q, m - 1)) * 0.2
    solvent = 1.0 - solutes.sum(axis=1)
    return np.column_stack([solvent, solutes])


# ------------------------------- tests -----------------------------------

def test_recovers_reference_matrix_from_noiseless_data():
    mix0 = demo_mixing_matrix()
    rng = np.random.default_rng(11)
    truth = random_feasible_truth(rng, 40, 4)
    lac = mix0.values @ truth.T  # noiseless forward model
    fit = calibrate_mixing_matrix(CalibrationSet(lac, truth), BIN_EDGES_KEV, MATERIAL_NAMES)
    np.testing.assert_allclose(fit.mixing.values, mix0.values, rtol=1e-10)
    assert fit.residual_norm < 1e-10
    # spot-check the bundled reference values used above
    assert mix0.values[0, 0] == pytest.approx(0.0301)
    assert mix0.values[0, 1] == pytest.approx(8.0544)


def test_identity_truth_returns_samples():
    rng = np.random.default_rng(5)
    lac = rng.random((5, 4)) + 0.1
    truth = np.eye(4)
    fit = calibrate_mixing_matrix(CalibrationSet(lac, truth), BIN_EDGES_KEV, MATERIAL_NAMES)
    np.testing.assert_allclose(fit.mixing.values, lac, rtol=1e-14)


def test_noisy_fit_matches_pseudoinverse_oracle_and_converges():
    mix0 = demo_mixing_matrix()
    rng = np.random.default_rng(23)
    errs = []
    for q in (32, 256, 2048):
        truth = random_feasible_truth(rng, q, 4)
        lac = mix0.values @ truth.T + 1e-4 * rng.standard_normal((5, q))
        fit = calibrate_mixing_matrix(CalibrationSet(lac, truth), BIN_EDGES_KEV, MATERIAL_NAMES)
        oracle = normal_equations_fit(truth, lac)
        np.testing.assert_allclose(fit.mixing.values, oracle, rtol=1e-9, atol=1e-12)
        errs.append(np.abs(fit.mixing.values - mix0.values).max())
    assert errs[-1] < errs[0]


def test_rank_deficient_truth_names_dependent_materials():
    rng = np.random.default_rng(2)
    truth = random_feasible_truth(rng, 30, 4)
    truth[:, 3] = 2.0 * truth[:, 2]  # calcium a multiple of gadolinium
    truth = truth / np.maximum(truth.sum(axis=1, keepdims=True), 1.0)
    lac = rng.random((5, 30))
    with pytest.raises(CalibrationError) as exc:
        calibrate_mixing_matrix(CalibrationSet(lac, truth), BIN_EDGES_KEV, MATERIAL_NAMES)
    msg = str(exc.value)
    assert "gadolinium" in msg and "calcium" in msg


def test_calibration_idempotent():
    mix0 = demo_mixing_matrix()
    rng = np.random.default_rng(9)
    truth = random_feasible_truth(rng, 64, 4)
    lac = mix0.values @ truth.T + 1e-3 * rng.standard_normal((5, 64))
    cal = CalibrationSet(lac, truth)
    fit1 = calibrate_mixing_matrix(cal, BIN_EDGES_KEV, MATERIAL_NAMES)
    resynth = fit1.mixing.values @ truth.T
    fit2 = calibrate_mixing_matrix(CalibrationSet(resynth, truth), BIN_EDGES_KEV, MATERIAL_NAMES)
    np.testing.assert_allclose(fit2.mixing.values, fit1.mixing.values, rtol=1e-10)


def test_apply_mixing_pure_water_column():
    mix = demo_mixing_matrix()
    lac = apply_mixing(mix, np.array([1.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(lac, [0.0301, 0.0345, 0.0253, 0.0196, 0.0177], rtol=1e-12)


def test_apply_mixing_zero_and_solution_row():
    mix = demo_mixing_matrix()
    assert np.all(apply_mixing(mix, np.zeros(4)) == 0.0)
    # hand dot product for a dilute iodine solution row
    frac = np.array([0.998073, 0.001926, 0.0, 0.0])
    expected_bin1 = 0.998073 * 0.0301 + 0.001926 * 8.0544
    assert apply_mixing(mix, frac)[0] == pytest.approx(expected_bin1, rel=1e-12)


def test_apply_mixing_linear():
    mix = demo_mixing_matrix()
    rng = np.random.default_rng(1)
    x, y = rng.random(4), rng.random(4)
    a, b = 0.3, -1.7
    lhs = apply_mixing(mix, a * x + b * y)
    rhs = a * apply_mixing(mix, x) + b * apply_mixing(mix, y)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-15)


def test_apply_mixing_length_mismatch():
    mix = demo_mixing_matrix()
    with pytest.raises(ShapeError):
        apply_mixing(mix, np.zeros(3))
    with pytest.raises(ShapeError):
        mix_image(mix, np.zeros((10, 3)))


def test_mix_image_matches_per_voxel():
    mix = demo_mixing_matrix()
    rng = np.random.default_rng(4)
    img = rng.random((17, 4)) * 0.2
    planes = mix_image(mix, img)
    for l in range(17):
        np.testing.assert_allclose(planes[:, l], apply_mixing(mix, img[l]), rtol=1e-15)


def test_condition_number_identity_and_scaling():
    ident = MixingMatrix(np.eye(4), tuple(range(5)), MATERIAL_NAMES)
    assert condition_number(ident) == pytest.approx(1.0)
    mix = demo_mixing_matrix()
    c = condition_number(mix)
    scaled = MixingMatrix(3.7 * mix.values, BIN_EDGES_KEV, MATERIAL_NAMES)
    assert condition_number(scaled) == pytest.approx(c, rel=1e-12)


def test_condition_number_matches_jacobi_oracle():
    mix = demo_mixing_matrix()
    sv = jacobi_singular_values(mix.values)
    assert condition_number(mix) == pytest.approx(sv[0] / sv[-1], rel=1e-8)


def test_condition_number_zero_matrix_flagged():
    zero = MixingMatrix(np.zeros((5, 4)), BIN_EDGES_KEV, MATERIAL_NAMES)
    with pytest.warns(RuntimeWarning):
        assert condition_number(zero) == float("inf")


def test_mixing_matrix_invariants():
    with pytest.raises(ConfigError):
        MixingMatrix(np.ones((3, 4)), tuple(range(4)), MATERIAL_NAMES)  # E < M
    with pytest.raises(ConfigError):
        MixingMatrix(np.full((5, 4), np.nan), BIN_EDGES_KEV, MATERIAL_NAMES)
    with pytest.raises(ConfigError):
        MixingMatrix(np.ones((5, 4)), BIN_EDGES_KEV, ("a", "b", "c"))


def test_file_round_trip_bit_exact(tmp_path):
    mix = demo_mixing_matrix()
    # awkward values exercise the 17-significant-digit requirement
    values = mix.values + np.pi * 1e-7
    mix = MixingMatrix(values, BIN_EDGES_KEV, MATERIAL_NAMES)
    path = tmp_path / "mix.txt"
    save_mixing_matrix(path, mix)
    back = load_mixing_matrix(path)
    assert (back.values == mix.values).all()
    assert back.bin_edges_kev == mix.bin_edges_kev
    assert back.material_names == mix.material_names


def test_load_rejects_malformed(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("5 4\n1 2 3\n")
    with pytest.raises(FileFormatError):
        load_mixing_matrix(path)
