"""Metric tests: moment fits, Frechet distance, MS-SSIM, PCA, density."""

import numpy as np
import pytest
from scipy import linalg as sla
from scipy import signal

from dermdit.data import render_toy_image
from dermdit.metrics import (
    FeatureSet,
    GaussianMoments,
    MetricError,
    RandomProjectionExtractor,
    density_export,
    diversity_msssim,
    fid,
    fit_moments,
    frechet_distance,
    max_scales_for,
    ms_ssim,
    pca_project,
)


def feature_set(arr, extractor="t"):
    return FeatureSet(embeddings=np.asarray(arr, dtype=np.float64), extractor_id=extractor)


class TestFitMoments:
    def test_two_point_hand_arithmetic(self):
        m = fit_moments(feature_set([[0.0, 0.0], [2.0, 0.0]]))
        assert np.allclose(m.mean, [1.0, 0.0])
        assert np.allclose(m.covariance, [[2.0, 0.0], [0.0, 0.0]])

    def test_identical_rows_zero_covariance(self):
        m = fit_moments(feature_set([[1.0, 2.0]] * 5))
        assert np.allclose(m.covariance, 0.0)

    def test_matches_high_precision_accumulation(self, rng):
        x = rng.standard_normal((500, 8))
        m = fit_moments(feature_set(x))
        # independent two-pass accumulation in extended precision
        xl = x.astype(np.longdouble)
        mean = xl.mean(axis=0)
        xc = xl - mean
        cov = (xc.T @ xc) / (len(xl) - 1)
        assert np.abs(m.mean - mean.astype(np.float64)).max() < 1e-10
        assert np.abs(m.covariance - cov.astype(np.float64)).max() < 1e-10

    def test_needs_two_rows(self):
        with pytest.raises(MetricError):
            fit_moments(feature_set([[1.0, 2.0]]))


def random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


class TestFrechetDistance:
    def test_identity_is_zero(self, rng):
        m = GaussianMoments(mean=rng.standard_normal(4), covariance=random_spd(rng, 4))
        assert frechet_distance(m, m) <= 1e-8

    def test_equal_covariances_leave_mean_term(self):
        a = GaussianMoments(mean=np.array([1.0, 0.0]), covariance=np.eye(2))
        b = GaussianMoments(mean=np.array([0.0, 0.0]), covariance=np.eye(2))
        assert np.isclose(frechet_distance(a, b), 1.0, atol=1e-10)

    def test_scalar_closed_form(self):
        a = GaussianMoments(mean=np.array([0.5]), covariance=np.array([[4.0]]))
        b = GaussianMoments(mean=np.array([0.5]), covariance=np.array([[1.0]]))
        # 4 + 1 - 2*sqrt(4) = 1
        assert np.isclose(frechet_distance(a, b), 1.0, atol=1e-12)

    def test_symmetry(self, rng):
        a = GaussianMoments(mean=rng.standard_normal(5), covariance=random_spd(rng, 5))
        b = GaussianMoments(mean=rng.standard_normal(5), covariance=random_spd(rng, 5))
        assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8

    def test_against_scipy_sqrtm_oracle(self):
        # independent oracle: ||dmu||^2 + Tr(Sa + Sb - 2 sqrtm(Sa @ Sb))
        rng = np.random.default_rng(42)
        for trial in range(100):
            d = int(rng.integers(1, 9))
            a = GaussianMoments(mean=rng.standard_normal(d),
                                covariance=random_spd(rng, d))
            b = GaussianMoments(mean=rng.standard_normal(d),
                                covariance=random_spd(rng, d))
            inner = sla.sqrtm(a.covariance @ b.covariance)
            if np.iscomplexobj(inner):
                inner = inner.real
            expected = (
                float((a.mean - b.mean) @ (a.mean - b.mean))
                + np.trace(a.covariance) + np.trace(b.covariance)
                - 2.0 * np.trace(inner)
            )
            got = frechet_distance(a, b)
            assert abs(got - expected) < 1e-6, (trial, got, expected)

    def test_dimension_mismatch(self, rng):
        a = GaussianMoments(mean=np.zeros(3), covariance=np.eye(3))
        b = GaussianMoments(mean=np.zeros(4), covariance=np.eye(4))
        with pytest.raises(MetricError):
            frechet_distance(a, b)


class TestFid:
    def test_identical_sets_zero(self, rng):
        x = rng.standard_normal((100, 6))
        report = fid(feature_set(x), feature_set(x.copy()))
        assert report["value"] < 1e-8

    def test_extractor_mismatch(self, rng):
        x = rng.standard_normal((10, 4))
        with pytest.raises(MetricError, match="extractor"):
            fid(feature_set(x, "a"), feature_set(x, "b"))

    def test_known_gaussians_within_sampling_error(self):
        rng = np.random.default_rng(7)
        mu_a, mu_b = np.zeros(4), np.full(4, 0.8)
        cov_a = np.diag([1.0, 2.0, 0.5, 1.5])
        cov_b = np.eye(4)
        xa = rng.multivariate_normal(mu_a, cov_a, size=5000)
        xb = rng.multivariate_normal(mu_b, cov_b, size=5000)
        truth = frechet_distance(
            GaussianMoments(mean=mu_a, covariance=cov_a),
            GaussianMoments(mean=mu_b, covariance=cov_b),
        )
        got = fid(feature_set(xa), feature_set(xb))["value"]
        assert abs(got - truth) < 0.05 * truth

    def test_far_clusters_dominated_by_mean_term(self, rng):
        xa = rng.standard_normal((300, 4))
        xb = rng.standard_normal((300, 4)) + 50.0
        dmu = fit_moments(feature_set(xb)).mean - fit_moments(feature_set(xa)).mean
        value = fid(feature_set(xa), feature_set(xb))["value"]
        assert value >= float(dmu @ dmu) * 0.95

    def test_row_permutation_invariance(self, rng):
        x = rng.standard_normal((50, 4))
        y = rng.standard_normal((60, 4))
        v1 = fid(feature_set(x), feature_set(y))["value"]
        v2 = fid(feature_set(x[rng.permutation(50)]),
                 feature_set(y[rng.permutation(60)]))["value"]
        assert abs(v1 - v2) < 1e-8


def _independent_msssim_constant(c1_val, c2_val, scales):
    """Scalar evaluation for constant images: cs = 1 at every scale, the
    luminance term enters at the coarsest scale only."""
    weights = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])[:scales]
    weights = weights / weights.sum()
    c1 = (0.01 * 1.0) ** 2
    lum = (2 * c1_val * c2_val + c1) / (c1_val**2 + c2_val**2 + c1)
    return lum ** weights[-1]


class TestMsSsim:
    def test_self_similarity(self, rng):
        x = rng.random((3, 32, 32))
        assert ms_ssim(x, x) >= 1.0 - 1e-9

    def test_symmetry(self, rng):
        x = rng.random((3, 32, 32))
        y = rng.random((3, 32, 32))
        assert abs(ms_ssim(x, y) - ms_ssim(y, x)) < 1e-9

    def test_bounded(self, rng):
        for _ in range(5):
            x = rng.random((3, 32, 32))
            y = rng.random((3, 32, 32))
            assert 0.0 <= ms_ssim(x, y) <= 1.0

    def test_strictly_decreases_with_noise(self):
        rng = np.random.default_rng(3)
        images = [
            (render_toy_image(("benign", "malignant")[i % 2],
                              ("light", "brown", "dark")[i % 3],
                              np.random.default_rng((31, i)), 32) + 1) / 2
            for i in range(20)
        ]
        means = []
        for sigma in (0.05, 0.1, 0.2):
            vals = [
                ms_ssim(img, np.clip(img + rng.normal(0, sigma, img.shape), 0, 1))
                for img in images
            ]
            means.append(np.mean(vals))
        assert means[0] > means[1] > means[2]

    def test_constant_images_match_scalar_formula(self):
        for ca, cb in ((0.3, 0.7), (0.2, 0.25), (0.5, 0.5)):
            x = np.full((3, 32, 32), ca)
            y = np.full((3, 32, 32), cb)
            scales = max_scales_for(x.shape)
            expected = _independent_msssim_constant(ca, cb, scales)
            assert abs(ms_ssim(x, y) - expected) < 1e-6

    def test_too_many_scales_suggests_fewer(self):
        x = np.zeros((3, 32, 32))
        with pytest.raises(MetricError, match="at most 3"):
            ms_ssim(x, x, scales=5)

    def test_auto_scale_reduction(self):
        assert max_scales_for((3, 32, 32)) == 3
        assert max_scales_for((3, 256, 256)) == 5
        assert max_scales_for((3, 8, 8)) == 1

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            ms_ssim(np.zeros((3, 32, 32)), np.zeros((3, 16, 16)))


def _reference_ssim_cs(x, y, data_range=1.0):
    """Independent single-scale SSIM/CS via scipy.signal 2-D convolution."""
    win1d = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5**2))
    win1d /= win1d.sum()
    win = np.outer(win1d, win1d)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2

    def filt(img):
        return np.stack([
            signal.convolve2d(np.pad(ch, 5, mode="symmetric"), win, mode="valid")
            for ch in img
        ])

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    lum = (2 * mx * my + c1) / (mx**2 + my**2 + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return float(lum.mean()), float(np.maximum(cs, 0).mean())


class TestDiversity:
    def test_identical_set_is_one(self, rng):
        img = rng.random((3, 32, 32)) * 2 - 1
        images = np.stack([img] * 5)
        report = diversity_msssim(images, n_pairs=10, seed=0)
        assert report["value"] >= 1.0 - 1e-9

    def test_seed_determinism(self, rng):
        images = rng.random((8, 3, 32, 32)) * 2 - 1
        a = diversity_msssim(images, n_pairs=12, seed=3)
        b = diversity_msssim(images, n_pairs=12, seed=3)
        assert a["value"] == b["value"]

    def test_fewer_than_two_images(self, rng):
        with pytest.raises(MetricError):
            diversity_msssim(rng.random((1, 3, 32, 32)), n_pairs=5)

    def test_noise_set_matches_independent_oracle(self):
        # iid noise images: mean pairwise score from an independently coded
        # single-scale SSIM pyramid over the same 100 pairs
        rng = np.random.default_rng(9)
        images = rng.random((30, 3, 32, 32)) * 2 - 1
        report = diversity_msssim(images, n_pairs=100, seed=5)

        pair_rng = np.random.default_rng(5)
        n = 30
        total = n * (n - 1) // 2
        chosen = np.sort(pair_rng.choice(total, size=100, replace=False))
        weights = np.array([0.0448, 0.2856, 0.3001])
        weights = weights / weights.sum()
        scores = []
        for k in chosen:
            i = int((2 * n - 1 - np.sqrt((2 * n - 1) ** 2 - 8 * k)) // 2)
            j = int(k - i * (2 * n - i - 1) // 2 + i + 1)
            x = (images[i].astype(np.float64) + 1) / 2
            y = (images[j].astype(np.float64) + 1) / 2
            value = 1.0
            for level in range(3):
                lum, cs = _reference_ssim_cs(x, y)
                if level < 2:
                    value *= cs ** weights[level]
                    x = _halve(x)
                    y = _halve(y)
                else:
                    value *= max(lum * cs, 0.0) ** weights[level]
            scores.append(value)
        oracle = float(np.mean(scores))
        assert abs(report["value"] - oracle) < 0.02

    def test_pair_unranking_enumerates_all_pairs(self):
        n = 7
        total = n * (n - 1) // 2
        seen = set()
        for k in range(total):
            i = int((2 * n - 1 - np.sqrt((2 * n - 1) ** 2 - 8 * k)) // 2)
            j = int(k - i * (2 * n - i - 1) // 2 + i + 1)
            assert 0 <= i < j < n
            seen.add((i, j))
        assert len(seen) == total


def _halve(img):
    c, h, w = img.shape
    return img.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


class TestPca:
    def test_collinear_points_rank_one(self):
        t = np.linspace(0, 1, 50)
        direction = np.array([1.0, 2.0, -0.5])
        x = t[:, None] * direction[None, :]
        _, ratios = pca_project(feature_set(x), k=2)
        assert abs(ratios[0] - 1.0) < 1e-10

    def test_isotropic_gaussian_even_split(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2000, 2))
        _, ratios = pca_project(feature_set(x), k=2)
        assert abs(ratios[0] - 0.5) < 0.05
        assert abs(ratios[1] - 0.5) < 0.05

    def test_isometry_on_subspace(self, rng):
        # data already in a 2-D subspace of R^5: projections preserve distances
        basis, _ = np.linalg.qr(rng.standard_normal((5, 2)))
        coords = rng.standard_normal((40, 2))
        x = coords @ basis.T
        projections, _ = pca_project(feature_set(x), k=2)
        d_orig = np.linalg.norm(x[:, None] - x[None, :], axis=-1)
        d_proj = np.linalg.norm(projections[:, None] - projections[None, :], axis=-1)
        assert np.abs(d_orig - d_proj).max() < 1e-8

    def test_ratios_nonincreasing_and_sum_to_one(self, rng):
        x = rng.standard_normal((100, 6)) * np.array([3, 2.5, 2, 1.5, 1, 0.5])
        _, ratios = pca_project(feature_set(x), k=6)
        assert np.all(np.diff(ratios) <= 1e-12)
        assert abs(ratios.sum() - 1.0) < 1e-10

    def test_sign_convention(self, rng):
        x = rng.standard_normal((50, 4))
        p1, _ = pca_project(feature_set(x), k=2)
        p2, _ = pca_project(feature_set(x.copy()), k=2)
        assert np.array_equal(p1, p2)

    def test_needs_more_rows_than_components(self):
        with pytest.raises(MetricError):
            pca_project(feature_set(np.zeros((2, 4))), k=2)


class TestDensityExport:
    def test_standard_normal_sample(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal(5000)
        table = density_export(x)
        grid, density = table["grid"], table["density"]
        assert len(grid) == 256 and len(density) == 256
        assert abs(grid[np.argmax(density)]) < 0.1
        integral = np.trapezoid(density, grid)
        assert abs(integral - 1.0) < 1e-3

    def test_degenerate_identical_points(self):
        table = density_export(np.array([2.5, 2.5]))
        assert table["degenerate"] is True
        assert len(table["grid"]) == 256

    def test_row_count_always_256(self, rng):
        for n in (2, 10, 100):
            table = density_export(rng.standard_normal(n))
            assert len(table["grid"]) == 256

    def test_needs_two_points(self):
        with pytest.raises(MetricError):
            density_export(np.array([1.0]))


def test_random_projection_extractor_stable(rng):
    ext1 = RandomProjectionExtractor((3, 32, 32), dim=64, seed=5)
    ext2 = RandomProjectionExtractor((3, 32, 32), dim=64, seed=5)
    images = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
    a = ext1.extract(images)
    b = ext2.extract(images)
    assert a.extractor_id == b.extractor_id
    assert np.array_equal(a.embeddings, b.embeddings)
