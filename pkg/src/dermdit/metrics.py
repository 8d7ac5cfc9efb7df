"""Fidelity and diversity metrics for generated image sets.

Frechet distance between Gaussian moment fits of feature embeddings
(with pluggable extractors), multi-scale structural similarity both as a
pairwise quality score and as a mean-pairwise diversity proxy, PCA
projection of embeddings, and kernel-density exports. Everything here is
pure numpy given seeds, so computations can run concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "FeatureSet",
    "GaussianMoments",
    "fit_moments",
    "frechet_distance",
    "fid",
    "ms_ssim",
    "diversity_msssim",
    "pca_project",
    "density_export",
    "RandomProjectionExtractor",
    "write_metric_report",
]


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSet:
    """Embeddings [N, D] plus the identity of the extractor that made them."""

    embeddings: np.ndarray
    extractor_id: str

    def __post_init__(self):
        arr = np.asarray(self.embeddings)
        if arr.ndim != 2:
            raise MetricError(f"embeddings must be [N, D], got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise MetricError("embeddings must be finite")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance)
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise MetricError("covariance must be symmetric")


def fit_moments(features: FeatureSet) -> GaussianMoments:
    """Sample mean and unbiased covariance (divisor N-1), symmetrized."""
    x = np.asarray(features.embeddings, dtype=np.float64)
    if x.shape[0] < 2:
        raise MetricError(f"need N >= 2 to fit moments, got {x.shape[0]}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianMoments(mean=mean, covariance=cov)


def _psd_sqrt(matrix: np.ndarray, clamp_rel: float = 1e-10) -> np.ndarray:
    """Symmetric matrix square root via eigendecomposition.

    Eigenvalues below clamp_rel times the largest are treated as zero,
    which absorbs the slightly negative values numerical symmetrization
    leaves behind.
    """
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    floor = clamp_rel * max(float(vals.max()), 0.0)
    vals = np.clip(vals, floor, None)
    vals = np.where(vals > 0, vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianMoments, b: GaussianMoments) -> float:
    """Squared Wasserstein-2 distance between two Gaussians.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), with the
    inner square roots computed by symmetric eigendecomposition and the
    result clamped to be nonnegative.
    """
    mu_a = np.asarray(a.mean, dtype=np.float64)
    mu_b = np.asarray(b.mean, dtype=np.float64)
    if mu_a.shape != mu_b.shape:
        raise MetricError(f"dimension mismatch: {mu_a.shape} vs {mu_b.shape}")
    sa = np.asarray(a.covariance, dtype=np.float64)
    sb = np.asarray(b.covariance, dtype=np.float64)
    diff = mu_a - mu_b
    root_a = _psd_sqrt(sa)
    inner = _psd_sqrt(root_a @ sb @ root_a)
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(inner))
    return max(value, 0.0)


def fid(real: FeatureSet, synth: FeatureSet) -> dict:
    """Frechet distance between fitted moments of two feature sets.

    Both sets must come from the same extractor; the report dictionary
    records the extractor and the sample sizes alongside the value.
    """
    if real.extractor_id != synth.extractor_id:
        raise MetricError(
            f"extractor mismatch: {real.extractor_id!r} vs {synth.extractor_id!r}"
        )
    value = frechet_distance(fit_moments(real), fit_moments(synth))
    return {
        "metric": "fid",
        "value": value,
        "extractor_id": real.extractor_id,
        "n_real": real.n,
        "n_synth": synth.n,
    }


# ---------------------------------------------------------------------------
# MS-SSIM
# ---------------------------------------------------------------------------

_MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
_WIN_SIZE = 11
_WIN_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03
_MIN_SCALE_PX = 8


def _gaussian_window(size: int = _WIN_SIZE, sigma: float = _WIN_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


_WINDOW = _gaussian_window()


def _filter2(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian filtering per channel, reflect boundary."""
    out = ndimage.correlate1d(img, _WINDOW, axis=-2, mode="reflect")
    return ndimage.correlate1d(out, _WINDOW, axis=-1, mode="reflect")


def _downsample2(img: np.ndarray) -> np.ndarray:
    c, h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, 0), (0, h % 2), (0, w % 2)), mode="edge")
        c, h, w = img.shape
    return img.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _ssim_terms(x: np.ndarray, y: np.ndarray, data_range: float):
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    mu_x = _filter2(x)
    mu_y = _filter2(y)
    sxx = _filter2(x * x) - mu_x * mu_x
    syy = _filter2(y * y) - mu_y * mu_y
    sxy = _filter2(x * y) - mu_x * mu_y
    luminance = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return float(luminance.mean()), float(np.maximum(cs, 0.0).mean()), float(
        np.maximum(luminance * cs, 0.0).mean()
    )


def max_scales_for(shape: tuple) -> int:
    """Largest dyadic scale count keeping the coarsest side >= 8 px."""
    side = min(shape[-2], shape[-1])
    scales = 1
    while scales < len(_MSSSIM_WEIGHTS) and side // 2 >= _MIN_SCALE_PX:
        side //= 2
        scales += 1
    return scales


def ms_ssim(
    x: np.ndarray,
    y: np.ndarray,
    scales: int | None = None,
    weights: np.ndarray | None = None,
    data_range: float = 1.0,
) -> float:
    """Multi-scale structural similarity of two [C, H, W] images.

    Contrast/structure terms are computed at every scale with an 11x11
    Gaussian window (sigma 1.5) and dyadic downsampling; the luminance
    term enters only at the coarsest scale. Stability constants are
    C1=(0.01 L)^2, C2=(0.03 L)^2 for value range L. When ``scales`` is
    None the count is auto-reduced so the coarsest scale keeps at least
    8 px per side; the standard five weights are truncated and
    renormalized over the retained scales.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != 3:
        raise MetricError(f"images must be [C,H,W], got {x.shape}")
    allowed = max_scales_for(x.shape)
    if scales is None:
        scales = allowed
    elif scales > allowed:
        raise MetricError(
            f"{scales} scales leave the coarsest side below {_MIN_SCALE_PX}px "
            f"for {x.shape[-2]}x{x.shape[-1]} images; use at most {allowed}"
        )
    if scales < 1:
        raise MetricError("need at least one scale")
    if weights is None:
        weights = _MSSSIM_WEIGHTS[:scales]
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != scales:
        raise MetricError(f"{len(weights)} weights for {scales} scales")
    weights = weights / weights.sum()

    value = 1.0
    for level in range(scales):
        lum, cs, full = _ssim_terms(x, y, data_range)
        if level < scales - 1:
            value *= cs ** weights[level]
            x = _downsample2(x)
            y = _downsample2(y)
        else:
            value *= full ** weights[level]
    return float(np.clip(value, 0.0, 1.0))


def diversity_msssim(images: np.ndarray, n_pairs: int = 1000, seed: int = 0) -> dict:
    """Mean MS-SSIM over random distinct pairs; lower means more diverse.

    Images arrive in [-1, 1] and are rescaled to [0, 1] before scoring
    so the value range constant is 1.
    """
    images = np.asarray(images)
    n = images.shape[0]
    if n < 2:
        raise MetricError(f"need at least 2 images, got {n}")
    total_pairs = n * (n - 1) // 2
    n_pairs = min(n_pairs, total_pairs)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total_pairs, size=n_pairs, replace=False)
    # unrank the pair index k to (i, j), i < j
    scores = np.empty(n_pairs)
    imgs01 = (images.astype(np.float64) + 1.0) * 0.5
    for out_idx, k in enumerate(np.sort(chosen)):
        i = int((2 * n - 1 - np.sqrt((2 * n - 1) ** 2 - 8 * k)) // 2)
        j = int(k - i * (2 * n - i - 1) // 2 + i + 1)
        scores[out_idx] = ms_ssim(imgs01[i], imgs01[j], data_range=1.0)
    return {
        "metric": "diversity_msssim",
        "value": float(scores.mean()),
        "n_pairs": int(n_pairs),
        "n_images": int(n),
        "seed": int(seed),
    }


# ---------------------------------------------------------------------------
# PCA and density exports
# ---------------------------------------------------------------------------

def pca_project(features: FeatureSet, k: int = 2):
    """Project embeddings onto the top-k principal components.

    Components are ordered by descending eigenvalue with signs fixed so
    each component's largest-magnitude loading is positive. Returns the
    [N, k] projections and the explained-variance ratios (eigenvalue
    over covariance trace).
    """
    x = np.asarray(features.embeddings, dtype=np.float64)
    n = x.shape[0]
    if n <= k:
        raise MetricError(f"need N > k, got N={n}, k={k}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    for col in range(vecs.shape[1]):
        lead = np.argmax(np.abs(vecs[:, col]))
        if vecs[lead, col] < 0:
            vecs[:, col] = -vecs[:, col]
    trace = float(np.trace(cov))
    ratios = vals[:k] / trace if trace > 0 else np.zeros(k)
    return xc @ vecs[:, :k], ratios


def density_export(values: np.ndarray, grid_points: int = 256) -> dict:
    """Gaussian kernel density on a uniform grid, Silverman bandwidth.

    The grid spans the data range extended by three bandwidths and the
    trapezoid integral of the densities is 1 to within 1e-3. Zero-spread
    input takes a degenerate single-spike path, flagged in the output.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise MetricError(f"need at least 2 points, got {n}")
    std = float(x.std(ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = q75 - q25
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    if spread <= 0:
        grid = np.full(grid_points, x[0])
        density = np.zeros(grid_points)
        density[grid_points // 2] = 1.0
        return {"grid": grid, "density": density, "bandwidth": 0.0, "degenerate": True}
    bandwidth = 0.9 * spread * n ** (-1 / 5)
    lo = x.min() - 3 * bandwidth
    hi = x.max() + 3 * bandwidth
    grid = np.linspace(lo, hi, grid_points)
    z = (grid[None, :] - x[:, None]) / bandwidth
    density = np.exp(-0.5 * z * z).sum(axis=0) / (n * bandwidth * np.sqrt(2 * np.pi))
    return {"grid": grid, "density": density, "bandwidth": float(bandwidth),
            "degenerate": False}


# ---------------------------------------------------------------------------
# feature extractors and reports
# ---------------------------------------------------------------------------

class RandomProjectionExtractor:
    """Frozen seeded random projection of pixels.

    Stands in for a generic pretrained embedding network: untrained on
    the data, fixed across runs, linear.
    """

    def __init__(self, input_shape: tuple, dim: int = 128, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9E37)))
        size = int(np.prod(input_shape))
        self.matrix = (rng.standard_normal((size, dim)) / np.sqrt(size)).astype(
            np.float32
        )
        self.extractor_id = f"random-proj-d{dim}-s{seed}"

    def extract(self, images: np.ndarray) -> FeatureSet:
        flat = np.asarray(images, dtype=np.float32).reshape(images.shape[0], -1)
        return FeatureSet(embeddings=flat @ self.matrix, extractor_id=self.extractor_id)


def write_metric_report(path: str | Path, report: dict, config_digest: str | None = None) -> None:
    """Write a metric report as JSON, with the config digest attached."""
    payload = dict(report)
    if config_digest is not None:
        payload["config_digest"] = config_digest
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
