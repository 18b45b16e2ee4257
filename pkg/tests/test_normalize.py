"""Dynamic windowing: tally/filter oracles, quantile bounds, pipeline invariants."""

import numpy as np
import pytest
from sklearn.base import clone

from cxrkit.exceptions import ConfigError, DegenerateImageError, NumericsError
from cxrkit.normalize import (
    DynamicWindowNormalizer,
    Histogram,
    NormalizationParams,
    compute_histogram,
    denoise_histogram,
    find_image_window,
    find_window,
    normalize_image,
)


def fake_radiograph(seed, n=96):
    """Chest-film-like raw intensities: body over a gradient, dark lung
    fields, mediastinum ridge, bright abdomen, noisy collimation border,
    occasionally an exact-value burn-in block, acquisition gain jitter."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
    img = 0.45 + 0.25 * yy
    body = ((xx - 0.5) ** 2 / 0.18 + (yy - 0.55) ** 2 / 0.35) < 1.0
    img += 0.25 * body
    ridge = 0.30 * np.exp(-0.5 * ((xx - 0.5) / 0.09) ** 2)
    img += ridge * np.clip((0.80 - yy) / 0.10, 0.0, 1.0) * (yy > 0.18)
    img += 0.30 * np.clip((yy - 0.74) / 0.06, 0.0, 1.0) * body
    for cx in (0.32, 0.68):
        lung = ((xx - cx) ** 2 / 0.018 + (yy - 0.42) ** 2 / 0.06) < 1.0
        img -= 0.22 * lung
    img += rng.uniform(-0.04, 0.04, size=(n, n))
    border = max(2, int(rng.integers(3, 7)))
    border_values = np.clip(rng.normal(0.02, 0.015, size=(n, n)), 0.0, None)
    for sl in (np.s_[:border, :], np.s_[-border:, :], np.s_[:, :border], np.s_[:, -border:]):
        img[sl] = border_values[sl]
    if rng.random() < 0.5:
        img[4:10, -14:-4] = 1.6  # burn-in block: one exact value, a true spike
    gain = rng.uniform(600.0, 3500.0)
    offset = rng.uniform(0.0, 400.0)
    return np.clip(img, 0.0, 1.8) * gain + offset


def test_histogram_direct_count():
    h = compute_histogram(np.array([[0.0, 0.0], [1.0, 1.0]]), 16)
    assert h.counts[0] == 2 and h.counts[-1] == 2 and h.counts.sum() == 4


def test_histogram_constant_image_degenerate():
    with pytest.raises(DegenerateImageError):
        compute_histogram(np.full((4, 4), 3.0), 16)


def test_histogram_bin_count_floor():
    with pytest.raises(ConfigError):
        compute_histogram(np.array([[0.0, 1.0]]), 8)


def test_histogram_matches_tally_oracle():
    rng = np.random.default_rng(3)
    img = np.concatenate([rng.normal(120, 12, 2048), rng.normal(210, 8, 2048)])
    img = np.clip(img, 0, 255).reshape(64, 64)
    h = compute_histogram(img, 64)
    # oracle: place every pixel by edge scan, last bin right-closed
    tally = np.zeros(64)
    for v in img.ravel():
        idx = np.searchsorted(h.bin_edges, v, side="right") - 1
        tally[min(max(idx, 0), 63)] += 1
    assert np.array_equal(h.counts, tally)


def test_denoise_identity_on_flat():
    h = Histogram(bin_edges=np.linspace(0, 1, 33), counts=np.full(32, 7.0))
    out = denoise_histogram(h, 2.0, 5)
    assert np.allclose(out.counts, 7.0, atol=1e-9)


def test_denoise_removes_isolated_spike():
    counts = np.zeros(32)
    counts[12] = 500.0
    h = Histogram(bin_edges=np.linspace(0, 1, 33), counts=counts)
    out = denoise_histogram(h, 2.0, 3)
    assert out.counts[12] == 0.0
    assert np.all(out.counts == 0.0)


def test_denoise_matches_composed_filter_oracle():
    rng = np.random.default_rng(9)
    counts = rng.uniform(0, 50, 48)
    counts[[7, 30]] = 4000.0  # spikes
    h = Histogram(bin_edges=np.linspace(0, 1, 49), counts=counts)
    sigma, window = 1.5, 5
    out = denoise_histogram(h, sigma, window)

    # oracle: loop-based sliding median, then loop-based convolution, both
    # with edges mirrored about the boundary samples (edge sample not doubled)
    def reflect_index(i, n):
        period = 2 * n - 2
        i = i % period if n > 1 else 0
        return i if i < n else period - i

    half = window // 2
    n = len(counts)
    padded = np.array([counts[reflect_index(i, n)] for i in range(-half, n + half)])
    med = np.array([sorted(padded[i:i + window])[half] for i in range(n)])
    radius = int(np.ceil(4 * sigma))
    kern = np.array([np.exp(-0.5 * (o / sigma) ** 2) for o in range(-radius, radius + 1)])
    kern /= kern.sum()
    padded_m = np.array([med[reflect_index(i, n)] for i in range(-radius, n + radius)])
    expect = np.array([float(np.dot(padded_m[i:i + 2 * radius + 1], kern))
                       for i in range(n)])
    assert np.allclose(out.counts, expect, atol=1e-10)


def test_denoise_preserves_smooth_mass():
    xs = np.linspace(-3, 3, 64)
    counts = 1000.0 * np.exp(-0.5 * xs ** 2) + 40.0
    h = Histogram(bin_edges=np.linspace(0, 1, 65), counts=counts)
    out = denoise_histogram(h, 2.0, 5)
    assert abs(out.counts.sum() - counts.sum()) <= 0.01 * counts.sum()
    assert np.all(out.counts >= 0)


def test_denoise_parameter_validation():
    h = Histogram(bin_edges=np.linspace(0, 1, 17), counts=np.ones(16))
    with pytest.raises(ConfigError):
        denoise_histogram(h, 0.0, 5)
    with pytest.raises(ConfigError):
        denoise_histogram(h, 1.0, 4)


def test_find_window_uniform_quantiles():
    bins = 100
    h = Histogram(bin_edges=np.linspace(0, 1, bins + 1), counts=np.ones(bins))
    w = find_window(h, tail_mass=0.01)
    assert abs(w.b_low - 0.01) <= h.bin_width + 1e-12
    assert abs(w.b_high - 0.99) <= h.bin_width + 1e-12


def test_find_window_excludes_denoised_background():
    # black-background spike plus a body lobe: after denoising the window
    # should hug the body intensities
    counts = np.zeros(64)
    counts[0] = 3000.0
    xs = np.arange(64)
    counts += 800.0 * np.exp(-0.5 * ((xs - 40) / 6.0) ** 2)
    h = Histogram(bin_edges=np.linspace(0, 256, 65), counts=counts)
    clean = denoise_histogram(h, 2.0, 5)
    w = find_window(clean, 0.005)
    assert w.b_low >= 256 / 64  # at least one bin above the background spike
    assert 40 * 4 - 60 < w.b_high <= 256


def test_find_window_single_bin_degenerate():
    counts = np.zeros(32)
    counts[10] = 99.0
    h = Histogram(bin_edges=np.linspace(0, 1, 33), counts=counts)
    with pytest.raises(DegenerateImageError):
        find_window(h, 0.005)


def test_find_window_tail_mass_bounds():
    h = Histogram(bin_edges=np.linspace(0, 1, 17), counts=np.ones(16))
    with pytest.raises(ConfigError):
        find_window(h, 0.0)
    with pytest.raises(ConfigError):
        find_window(h, 0.5)


def test_normalize_spans_unit_interval():
    img = fake_radiograph(0)
    out = normalize_image(img)
    assert out.shape == img.shape and out.dtype == np.float64
    assert out.min() == 0.0 and out.max() == 1.0
    assert np.all((out >= 0) & (out <= 1))


def test_normalize_rejects_bad_images():
    with pytest.raises(DegenerateImageError):
        normalize_image(np.zeros((8, 8)))
    with pytest.raises(NumericsError):
        normalize_image(np.array([[np.nan, 1.0], [0.0, 2.0]]))


@pytest.mark.parametrize("seed", range(6))
def test_affine_equivariance(seed):
    rng = np.random.default_rng(seed + 500)
    img = fake_radiograph(seed)
    a, b = float(rng.uniform(0.5, 4.0)), float(rng.uniform(-50, 200))
    params = NormalizationParams()
    w = find_image_window(img, params)
    w2 = find_image_window(a * img + b, params)
    bw = (img.max() - img.min()) / params.bin_count * a
    assert abs(w2.b_low - (a * w.b_low + b)) <= bw + 1e-9
    assert abs(w2.b_high - (a * w.b_high + b)) <= bw + 1e-9
    out, out2 = normalize_image(img, params), normalize_image(a * img + b, params)
    assert np.max(np.abs(out - out2)) <= 2.0 / params.bin_count


@pytest.mark.parametrize("seed", range(6))
def test_idempotence(seed):
    params = NormalizationParams()
    once = normalize_image(fake_radiograph(seed + 40), params)
    twice = normalize_image(once, params)
    assert np.max(np.abs(twice - once)) <= 2.0 * params.tail_mass


def test_estimator_surface():
    est = DynamicWindowNormalizer(bin_count=64)
    batch = np.stack([fake_radiograph(s) for s in range(3)])
    out = est.fit(batch).transform(batch)
    assert out.shape == batch.shape
    single = est.transform(batch[0])
    assert np.array_equal(single, out[0])
    assert clone(est).get_params()["bin_count"] == 64
    with pytest.raises(ConfigError):
        DynamicWindowNormalizer(median_window=2).fit(batch)
    with pytest.raises(ConfigError):
        est.transform(batch[None])
