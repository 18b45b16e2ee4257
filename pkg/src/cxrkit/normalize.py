"""Dynamic-windowing intensity normalization.

Each image is normalized from its own denoised histogram: spikes from text
overlays and collimation background are filtered out, quantile bounds pick a
tight intensity window, and pixel values are remapped linearly onto [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import as_float_array
from .exceptions import ConfigError, DegenerateImageError


@dataclass(frozen=True)
class Histogram:
    """Uniform-bin intensity histogram; counts are real-valued after smoothing."""

    bin_edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.float64)
        if edges.ndim != 1 or counts.ndim != 1 or len(edges) != len(counts) + 1:
            raise ConfigError("histogram needs bin_count counts and bin_count+1 edges")
        if not np.all(np.diff(edges) > 0):
            raise ConfigError("histogram edges must be strictly increasing")
        if np.any(counts < 0):
            raise ConfigError("histogram counts must be non-negative")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def bin_count(self) -> int:
        return len(self.counts)

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])


@dataclass(frozen=True)
class Window:
    b_low: float
    b_high: float

    def __post_init__(self):
        if not self.b_low < self.b_high:
            raise DegenerateImageError(
                f"window bounds must satisfy b_low < b_high, got [{self.b_low}, {self.b_high}]")


@dataclass(frozen=True)
class NormalizationParams:
    bin_count: int = 256
    gaussian_sigma: float = 2.0
    median_window: int = 5
    tail_mass: float = 0.005

    def __post_init__(self):
        if self.bin_count < 16:
            raise ConfigError(f"bin_count must be >= 16, got {self.bin_count}")
        if not self.gaussian_sigma > 0:
            raise ConfigError("gaussian_sigma must be positive")
        if self.median_window < 3 or self.median_window % 2 == 0:
            raise ConfigError(f"median_window must be odd and >= 3, got {self.median_window}")
        if not 0.0 < self.tail_mass < 0.5:
            raise ConfigError(f"tail_mass must lie in (0, 0.5), got {self.tail_mass}")


def compute_histogram(image, bin_count: int = 256) -> Histogram:
    """Uniform histogram over [min, max] of the image."""
    img = as_float_array(image, "image")
    if img.size == 0:
        raise ConfigError("image is empty")
    if bin_count < 16:
        raise ConfigError(f"bin_count must be >= 16, got {bin_count}")
    lo, hi = float(img.min()), float(img.max())
    if lo == hi:
        raise DegenerateImageError(f"constant image (value {lo}) has no intensity spread")
    counts, edges = np.histogram(img, bins=int(bin_count), range=(lo, hi))
    return Histogram(bin_edges=edges, counts=counts.astype(np.float64))


def denoise_histogram(h: Histogram, gaussian_sigma: float = 2.0,
                      median_window: int = 5) -> Histogram:
    """Median filtering (kills isolated spikes) followed by Gaussian smoothing.

    Both filters reflect at the edges; the Gaussian kernel is normalized and
    truncated at four sigma, so smooth mass is preserved. Mass sitting in
    isolated spikes is removed by the median pass on purpose.
    """
    if not gaussian_sigma > 0:
        raise ConfigError("gaussian_sigma must be positive")
    if median_window < 3 or median_window % 2 == 0:
        raise ConfigError(f"median_window must be odd and >= 3, got {median_window}")
    counts = h.counts
    half = median_window // 2
    padded = np.pad(counts, half, mode="reflect")
    filtered = np.median(sliding_window_view(padded, median_window), axis=1)

    radius = max(1, int(np.ceil(4.0 * gaussian_sigma)))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / gaussian_sigma) ** 2)
    kernel /= kernel.sum()
    smoothed = np.convolve(np.pad(filtered, radius, mode="reflect"), kernel, mode="valid")
    return Histogram(bin_edges=h.bin_edges, counts=np.maximum(smoothed, 0.0))


def find_window(h: Histogram, tail_mass: float = 0.005) -> Window:
    """Quantile bounds on the (denoised) histogram.

    b_low is the left edge of the first bin whose cumulative mass reaches
    tail_mass of the total; b_high is the right edge of the last bin whose
    cumulative mass stays within 1 - tail_mass.
    """
    if not 0.0 < tail_mass < 0.5:
        raise ConfigError(f"tail_mass must lie in (0, 0.5), got {tail_mass}")
    total = float(h.counts.sum())
    if total <= 0.0:
        raise DegenerateImageError("histogram has no mass")
    cum = np.cumsum(h.counts)
    low_idx = int(np.searchsorted(cum, tail_mass * total, side="left"))
    high_idx = int(np.searchsorted(cum, (1.0 - tail_mass) * total, side="right")) - 1
    if high_idx < 0 or low_idx > high_idx:
        raise DegenerateImageError("histogram mass is concentrated in a single bin")
    b_low = float(h.bin_edges[low_idx])
    b_high = float(h.bin_edges[high_idx + 1])
    if not b_low < b_high:
        raise DegenerateImageError("degenerate window: all usable mass in one bin")
    return Window(b_low=b_low, b_high=b_high)


def find_image_window(image, params: NormalizationParams = NormalizationParams()) -> Window:
    """Window bounds for an image under the full pipeline."""
    h = compute_histogram(image, params.bin_count)
    h = denoise_histogram(h, params.gaussian_sigma, params.median_window)
    return find_window(h, params.tail_mass)


def normalize_image(image, params: NormalizationParams = NormalizationParams()) -> np.ndarray:
    """Histogram -> denoise -> window -> linear remap clamped to [0, 1]."""
    img = as_float_array(image, "image")
    window = find_image_window(img, params)
    return np.clip((img - window.b_low) / (window.b_high - window.b_low), 0.0, 1.0)


class DynamicWindowNormalizer(TransformerMixin, BaseEstimator):
    """Stateless per-image normalizer with the estimator interface.

    ``transform`` accepts one image (H, W) or a batch (n, H, W); every image
    is windowed from its own histogram, so there is nothing to learn in
    ``fit``.
    """

    def __init__(self, bin_count: int = 256, gaussian_sigma: float = 2.0,
                 median_window: int = 5, tail_mass: float = 0.005):
        self.bin_count = bin_count
        self.gaussian_sigma = gaussian_sigma
        self.median_window = median_window
        self.tail_mass = tail_mass

    def _params(self) -> NormalizationParams:
        return NormalizationParams(bin_count=self.bin_count,
                                   gaussian_sigma=self.gaussian_sigma,
                                   median_window=self.median_window,
                                   tail_mass=self.tail_mass)

    def fit(self, X=None, y=None):
        self._params()  # validates the configuration
        return self

    def transform(self, X) -> np.ndarray:
        params = self._params()
        arr = as_float_array(X, "X")
        if arr.ndim == 2:
            return normalize_image(arr, params)
        if arr.ndim == 3:
            return np.stack([normalize_image(img, params) for img in arr])
        raise ConfigError(f"expected (H, W) or (n, H, W), got shape {arr.shape}")
