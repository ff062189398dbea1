"""Gaussian fitting, Mahalanobis distances, calibration arithmetic."""

import numpy as np
import pytest

from odex.oodgate import (EPS_FLOOR, GaussianStats, ThresholdCalibration,
                          calibrate_threshold, fit_gaussian, mahalanobis,
                          mahalanobis_batch, normalize_distance,
                          stage_distance, summed_history_distance)


def two_pass_covariance(rows):
    """Independent oracle: explicit mean pass then outer-product pass,
    dividing by N."""
    n = len(rows)
    dim = len(rows[0])
    mean = [sum(r[j] for r in rows) / n for j in range(dim)]
    cov = [[0.0] * dim for _ in range(dim)]
    for r in rows:
        for a in range(dim):
            for b in range(dim):
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / n
    return np.array(mean), np.array(cov)


def gauss_jordan_inverse(m):
    """Independent oracle: plain Gauss-Jordan elimination."""
    n = m.shape[0]
    aug = np.hstack([m.astype(float).copy(), np.eye(n)])
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs(aug[r, col]))
        aug[[col, pivot]] = aug[[pivot, col]]
        aug[col] /= aug[col, col]
        for r in range(n):
            if r != col:
                aug[r] -= aug[r, col] * aug[col]
    return aug[:, n:]


def gaussian_from(mu, sigma, eps=0.0):
    reg = np.asarray(sigma, float) + eps * np.eye(len(mu))
    return GaussianStats(mu=np.asarray(mu, float), sigma=np.asarray(sigma, float),
                         precision=gauss_jordan_inverse(reg),
                         regularization_eps=eps, n_samples=2)


def test_fit_constant_vectors():
    v = np.array([1.5, -2.0, 0.25])
    stats = fit_gaussian(np.tile(v, (5, 1)))
    assert np.array_equal(stats.mu, v)
    assert np.array_equal(stats.sigma, np.zeros((3, 3)))
    assert np.allclose(stats.precision, np.eye(3) / EPS_FLOOR, rtol=1e-9)


def test_fit_hand_example():
    feats = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    stats = fit_gaussian(feats)
    assert np.allclose(stats.mu, [1.0, 1.0], atol=1e-15)
    assert np.allclose(stats.sigma, np.eye(2), atol=1e-15)


def test_fit_matches_two_pass_oracle():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(100):
        feats = rng.standard_normal((rng.integers(5, 40), 8)) * rng.uniform(0.5, 3)
        stats = fit_gaussian(feats)
        mean, cov = two_pass_covariance(feats.tolist())
        scale = max(np.abs(cov).max(), 1e-12)
        worst = max(worst, np.abs(stats.sigma - cov).max() / scale,
                    np.abs(stats.mu - mean).max() / max(np.abs(mean).max(), 1e-12))
    assert worst < 1e-10


def test_fit_validates_input():
    with pytest.raises(ValueError):
        fit_gaussian(np.zeros((1, 4)))
    with pytest.raises(ValueError):
        fit_gaussian(np.zeros(4))


def test_precision_inverts_regularized_sigma():
    rng = np.random.default_rng(5)
    feats = rng.standard_normal((30, 8))
    stats = fit_gaussian(feats)
    reg = stats.sigma + stats.regularization_eps * np.eye(8)
    assert np.abs(stats.precision @ reg - np.eye(8)).max() < 1e-8
    assert np.abs(stats.sigma - stats.sigma.T).max() < 1e-12


def test_mahalanobis_at_mean_is_zero():
    rng = np.random.default_rng(6)
    stats = fit_gaussian(rng.standard_normal((20, 4)))
    assert mahalanobis(stats, stats.mu) == 0.0


def test_mahalanobis_identity_covariance():
    stats = gaussian_from([0.0, 0.0], np.eye(2))
    assert abs(mahalanobis(stats, np.array([3.0, 4.0])) - 5.0) < 1e-12


def test_mahalanobis_diagonal_example():
    stats = gaussian_from([0.0, 0.0], np.diag([2.0, 0.5]))
    assert abs(mahalanobis(stats, np.array([2.0, 1.0])) - 2.0) < 1e-12


def test_mahalanobis_matches_gauss_jordan_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        feats = rng.standard_normal((25, 8))
        stats = fit_gaussian(feats)
        inv = gauss_jordan_inverse(stats.sigma + stats.regularization_eps * np.eye(8))
        z = rng.standard_normal(8)
        d = z - stats.mu
        ref = np.sqrt(d @ inv @ d)
        worst = max(worst, abs(mahalanobis(stats, z) - ref) / max(ref, 1e-12))
    assert worst < 1e-8


def test_mahalanobis_dimension_mismatch():
    stats = gaussian_from([0.0, 0.0], np.eye(2))
    with pytest.raises(ValueError):
        mahalanobis(stats, np.zeros(3))


def test_mahalanobis_permutation_invariant():
    rng = np.random.default_rng(8)
    for _ in range(20):
        feats = rng.standard_normal((30, 6))
        z = rng.standard_normal(6)
        perm = rng.permutation(6)
        d1 = mahalanobis(fit_gaussian(feats), z)
        d2 = mahalanobis(fit_gaussian(feats[:, perm]), z[perm])
        assert abs(d1 - d2) < 1e-9


def test_summed_history_distance():
    rng = np.random.default_rng(9)
    stats = fit_gaussian(rng.standard_normal((20, 3)))
    z = rng.standard_normal(3)
    single = mahalanobis(stats, z)
    assert summed_history_distance([stats], z) == single
    assert abs(summed_history_distance([stats, stats], z) - 2 * single) < 1e-12
    others = [gaussian_from(rng.standard_normal(3), np.eye(3)) for _ in range(2)]
    expected = single + sum(mahalanobis(s, z) for s in others)
    assert abs(summed_history_distance([stats] + others, z) - expected) < 1e-12
    with pytest.raises(ValueError):
        summed_history_distance([], z)


def test_history_sum_monotone_in_length():
    rng = np.random.default_rng(10)
    history = []
    z = rng.standard_normal(4)
    last = 0.0
    for _ in range(5):
        history.append(fit_gaussian(rng.standard_normal((15, 4))))
        cur = summed_history_distance(history, z)
        assert cur >= last
        last = cur


def test_stage_distance():
    rng = np.random.default_rng(11)
    stats = fit_gaussian(rng.standard_normal((20, 3)))
    history = [stats]
    v = rng.standard_normal(3)
    constant = np.tile(v, (6, 1))
    assert abs(stage_distance(history, constant)
               - summed_history_distance(history, v)) < 1e-12
    assert stage_distance(history, np.tile(stats.mu, (3, 1))) < 1e-12

    history2 = [stats, gaussian_from(rng.standard_normal(3), np.eye(3))]
    feats = rng.standard_normal((5, 3))
    expected = np.mean([summed_history_distance(history2, f) for f in feats])
    assert abs(stage_distance(history2, feats) - expected) < 1e-12
    with pytest.raises(ValueError):
        stage_distance(history, np.zeros((0, 3)))


def test_mahalanobis_batch_matches_scalar():
    rng = np.random.default_rng(12)
    stats = fit_gaussian(rng.standard_normal((25, 5)))
    feats = rng.standard_normal((10, 5))
    batch = mahalanobis_batch(stats, feats)
    for i in range(10):
        assert abs(batch[i] - mahalanobis(stats, feats[i])) < 1e-12


def test_calibrate_constant_distances_hits_floor():
    cal = calibrate_threshold([3.0, 3.0, 3.0])
    assert cal.d_min == cal.d_max == 3.0
    # every normalized value is 0, so xi would be 0; the floor keeps
    # identical re-presentations reusable
    assert cal.xi == 0.1
    assert normalize_distance(cal, 3.0) == 0.0


def test_calibrate_hand_examples():
    cal = calibrate_threshold([0.0, 1.0])
    assert abs(cal.xi - 0.5) < 1e-12
    cal = calibrate_threshold([1.0, 2.0, 3.0])
    assert cal.d_min == 1.0 and cal.d_max == 3.0
    assert abs(cal.xi - 0.4) < 1e-12


def test_calibrate_validates():
    with pytest.raises(ValueError):
        calibrate_threshold([1.0])
    with pytest.raises(ValueError):
        calibrate_threshold([-0.5, 1.0])


def test_calibrated_values_land_in_unit_half_interval():
    rng = np.random.default_rng(13)
    for _ in range(100):
        d = rng.uniform(0, 50, size=rng.integers(2, 40))
        cal = calibrate_threshold(d)
        normalized = [normalize_distance(cal, x) for x in d]
        assert min(normalized) >= 0.0
        assert max(normalized) <= 0.5 + 1e-12
        assert 0.1 <= cal.xi <= 1.0 + 1e-12


def test_normalize_distance_anchors():
    cal = calibrate_threshold([1.0, 2.0, 3.0])
    assert normalize_distance(cal, 1.0) == 0.0
    assert abs(normalize_distance(cal, 6.0) - 1.0) < 1e-12
    assert abs(normalize_distance(cal, 2 * cal.d_max) - 1.0) < 1e-12
    assert normalize_distance(cal, 0.0) == 0.0  # clamped below
    assert normalize_distance(cal, 11.0) > 1.0  # open above


def test_degenerate_zero_distance_calibration():
    cal = calibrate_threshold([0.0, 0.0])
    assert cal.denom == EPS_FLOOR
    assert cal.xi == 0.1
