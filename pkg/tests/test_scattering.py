import math

import numpy as np
import pytest
from scipy import ndimage

from ehybrid.errors import ConfigError, ShapeError
from ehybrid.scattering import (ScatteringCache, ScatteringConfig, ScatteringPath, path_index, scatter,
                                scattering_channel_count)
from ehybrid.wavelets import build_filter_bank


def smooth_blob(side=64, sigma=14.0):
    y, x = np.mgrid[:side, :side]
    c = side / 2
    return np.exp(-((x - c) ** 2 + (y - c) ** 2) / (2 * sigma ** 2))[None, None]


def brute_force_path(img, bank, J, j, l, k):
    """One order-1 channel by direct spatial filtering with mirrored borders."""
    psi = bank.psi_real[j][l][k]
    # ndimage.convolve flips the kernel like a true convolution; 'mirror' matches numpy 'reflect'
    u = np.abs(ndimage.convolve(img, psi, mode="mirror"))
    low = ndimage.convolve(u, bank.phi, mode="mirror")
    return low[::2 ** J, ::2 ** J]


@pytest.mark.parametrize("J", [1, 2])
def test_matches_brute_force_filtering(J):
    rng = np.random.default_rng(4)
    x = rng.random((1, 1, 32, 32))
    bank = build_filter_bank(J, 4, 2, side=32)
    out = scatter(x, bank, ScatteringConfig(J, 4, 2))
    paths = out.path_index
    for i, p in enumerate(paths):
        if p.order == 0:
            ref = ndimage.convolve(x[0, 0], bank.phi, mode="mirror")[::2 ** J, ::2 ** J]
        else:
            ref = brute_force_path(x[0, 0], bank, J, p.j, p.theta, p.alpha)
        assert np.abs(out.coefficients[0, i] - ref).max() <= 1e-10 * np.abs(ref).max()


@pytest.mark.parametrize("J,channels,side", [(2, 195, 56), (3, 291, 28)])
def test_shape_law_at_224(J, channels, side):
    x = np.random.default_rng(0).random((1, 3, 224, 224))
    out = scatter(x, build_filter_bank(J, side=224), ScatteringConfig(J))
    assert out.coefficients.shape == (1, channels, side, side)
    assert scattering_channel_count(ScatteringConfig(J), 3) == channels


def test_path_index_order():
    paths = path_index(ScatteringConfig(2, 8, 4), 3)
    assert paths[0] == ScatteringPath(0, 0)
    assert paths[1] == ScatteringPath(0, 1, 0, 0, 0)
    assert paths[2] == ScatteringPath(0, 1, 0, 0, 1)
    assert paths[65] == ScatteringPath(1, 0)
    assert paths[-1] == ScatteringPath(2, 1, 1, 7, 3)
    assert len(paths) == 195


def test_without_order0():
    cfg = ScatteringConfig(1, 4, 2, include_order0=False)
    out = scatter(np.ones((1, 2, 16, 16)), build_filter_bank(1, 4, 2), cfg)
    assert out.coefficients.shape == (1, 16, 8, 8)
    assert all(p.order == 1 for p in out.path_index)


@pytest.mark.parametrize("padding", ["reflect", "circular"])
def test_constant_image(padding):
    c = 0.37
    x = np.full((1, 1, 32, 32), c)
    out = scatter(x, build_filter_bank(2, side=32), ScatteringConfig(2), padding=padding)
    assert np.abs(out.coefficients[0, 0] - c).max() <= 1e-12
    assert np.abs(out.coefficients[0, 1:]).max() <= 1e-6


@pytest.mark.parametrize("lam", [2.5, -3.0, 1e-3])
def test_homogeneity(lam):
    x = np.random.default_rng(1).standard_normal((2, 2, 32, 32))
    bank = build_filter_bank(2, side=32)
    cfg = ScatteringConfig(2)
    a = scatter(lam * x, bank, cfg).coefficients
    b = scatter(x, bank, cfg).coefficients
    # order-0 is linear, order-1 absolutely homogeneous
    expected = abs(lam) * b
    expected[:, 0::65] = lam * b[:, 0::65]
    assert np.abs(a - expected).max() <= 1e-10 * np.abs(a).max()


def translation_change(J, shift=2, side=64):
    x = smooth_blob(side)
    bank = build_filter_bank(J, side=side)
    cfg = ScatteringConfig(J)
    a = scatter(x, bank, cfg, padding="circular").coefficients
    b = scatter(np.roll(x, shift, axis=3), bank, cfg, padding="circular").coefficients
    return np.linalg.norm(a - b) / np.linalg.norm(a)


def test_translation_near_invariance():
    changes = [translation_change(J) for J in (1, 2, 3)]
    assert changes[2] <= 0.10
    assert changes[0] > changes[1] > changes[2]


def test_shift_by_stride_is_exact_under_circular_padding():
    x = np.random.default_rng(2).random((1, 1, 32, 32))
    bank = build_filter_bank(2, 4, 2, side=32)
    cfg = ScatteringConfig(2, 4, 2)
    a = scatter(x, bank, cfg, padding="circular").coefficients
    b = scatter(np.roll(x, 4, axis=2), bank, cfg, padding="circular").coefficients
    assert np.allclose(np.roll(a, 1, axis=2), b, rtol=0, atol=1e-12)


def test_batch_matches_single_items():
    x = np.random.default_rng(3).random((4, 3, 32, 32))
    bank = build_filter_bank(3, side=32)
    cfg = ScatteringConfig(3)
    whole = scatter(x, bank, cfg).coefficients
    for i in range(4):
        assert np.array_equal(whole[i:i + 1], scatter(x[i:i + 1], bank, cfg).coefficients)


def test_errors():
    bank = build_filter_bank(2, side=32)
    with pytest.raises(ShapeError):
        scatter(np.zeros((1, 1, 30, 30)), bank, ScatteringConfig(2))
    with pytest.raises(ShapeError):
        scatter(np.zeros((1, 32, 32)), bank, ScatteringConfig(2))
    with pytest.raises(ConfigError):
        scatter(np.zeros((1, 1, 32, 32)), bank, ScatteringConfig(3))
    with pytest.raises(ConfigError):
        scatter(np.zeros((1, 1, 32, 32)), bank, ScatteringConfig(2), padding="zero")
    with pytest.raises(ConfigError):
        ScatteringConfig(2, order=2)


def test_manifest_lists_every_channel():
    out = scatter(np.zeros((1, 1, 16, 16)), build_filter_bank(1, 2, 2), ScatteringConfig(1, 2, 2))
    lines = out.manifest().splitlines()
    assert lines[1] == "0 0 0 - - -"
    assert lines[2] == "1 0 1 0 0 0"
    assert len(lines) == 1 + 5


def test_cache_reuses_entries():
    cache = ScatteringCache()
    calls = []

    def compute():
        calls.append(1)
        return np.ones(3)

    a = cache.get_or_compute("k", 2, compute)
    b = cache.get_or_compute("k", 2, compute)
    cache.get_or_compute("k", 3, compute)
    assert a is b and len(calls) == 2 and len(cache) == 2
    cache.clear()
    assert len(cache) == 0


def test_rotating_the_image_permutes_orientations():
    # a quarter turn of the input maps theta_l to theta_{l+L/2} (up to the conjugation at pi)
    rng = np.random.default_rng(5)
    x = ndimage.gaussian_filter(rng.standard_normal((32, 32)), 1.0)[None, None]
    L, A = 4, 2
    bank = build_filter_bank(1, L, A, side=32)
    cfg = ScatteringConfig(1, L, A, include_order0=False)
    a = scatter(x, bank, cfg, padding="circular").coefficients[0].reshape(L, A, 16, 16)
    xr = np.rot90(x, -1, axes=(2, 3))
    b = scatter(xr, bank, cfg, padding="circular").coefficients[0].reshape(L, A, 16, 16)
    # alpha = 0 responds to Re(psi), which is symmetric under psi -> conj(psi)
    for l in range(L):
        lr = (l + L // 2) % L
        rot = np.rot90(a[l, 0], -1)
        # subsampling grids differ by one pixel after rotation; compare energies
        assert math.isclose(np.linalg.norm(rot), np.linalg.norm(b[lr, 0]), rel_tol=0.05)
