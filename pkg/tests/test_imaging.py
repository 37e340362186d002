import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ditfuse import imaging
from ditfuse.imaging import Degradation

unit = st.floats(0.0, 1.0, allow_nan=False)


def test_gauss_noise_sigma_zero_is_identity(rng):
    img = rng.random((8, 8, 3))
    out = imaging.degrade(img, np.ones((8, 8), bool), "gauss_noise", {"sigma": 0.0}, rng)
    np.testing.assert_array_equal(out, img)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 3.0])
def test_blur_of_constant_is_unchanged(sigma, rng):
    img = np.full((20, 20, 3), 0.42)
    out = imaging.degrade(img, np.ones((20, 20), bool), Degradation.BLUR, {"sigma": sigma}, rng)
    np.testing.assert_allclose(out, img, atol=1e-14)


def test_noise_mask_mean_in_hoeffding_band():
    out = imaging.degrade(np.zeros((16, 16, 3)), np.ones((16, 16), bool), "noise_mask", {}, np.random.default_rng(7))
    assert 0.40 <= out.mean() <= 0.60
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_blur_region_matches_whole_image_blur(rng):
    from scipy import ndimage

    img = rng.random((24, 24, 3))
    region = np.zeros((24, 24), bool)
    region[5:12, 9:20] = True
    out = imaging.degrade(img, region, "blur", {"sigma": 1.5}, rng)
    from ditfuse.kernels import gaussian_kernel

    k = gaussian_kernel(1.5)
    full = ndimage.correlate1d(ndimage.correlate1d(img, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")
    np.testing.assert_allclose(out[region], full[region], atol=1e-12)


def test_degrade_errors(rng):
    img = np.zeros((4, 4, 3))
    with pytest.raises(imaging.ShapeMismatch):
        imaging.degrade(img, np.ones((4, 5), bool), "blur", {"sigma": 1.0}, rng)
    with pytest.raises(imaging.BadParam):
        imaging.degrade(img, np.ones((4, 4), bool), "blur", {"sigma": 0.0}, rng)
    with pytest.raises(imaging.BadParam):
        imaging.degrade(img, np.ones((4, 4), bool), "gauss_noise", {"sigma": -0.1}, rng)


@settings(max_examples=60, deadline=None)
@given(
    region=arrays(np.bool_, (9, 7)),
    kind=st.sampled_from(list(Degradation)),
    sigma=st.floats(0.3, 3.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_degrade_never_touches_outside_region(region, kind, sigma, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((9, 7, 3))
    out = imaging.degrade(img, region, kind, {"sigma": sigma}, rng)
    np.testing.assert_array_equal(out[~region], img[~region])
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_photometric_examples():
    half = np.full((1, 1, 3), 0.5)
    np.testing.assert_allclose(imaging.adjust_photometric(half, "LIGHT+"), 0.6)
    np.testing.assert_array_equal(imaging.adjust_photometric(half, "CONTRAST+"), 0.5)
    np.testing.assert_array_equal(imaging.adjust_photometric(np.full((1, 1, 3), 0.9), "LIGHT++"), 1.0)
    with pytest.raises(imaging.UnknownSubtag):
        imaging.adjust_photometric(half, "LIGHT+++")


@settings(max_examples=100, deadline=None)
@given(a=unit, b=unit, tag=st.sampled_from(sorted(imaging.LIGHT_FACTORS)))
def test_light_is_monotone(a, b, tag):
    lo, hi = min(a, b), max(a, b)
    out = imaging.adjust_photometric(np.array([[[lo] * 3, [hi] * 3]]), tag)
    assert np.all(out[0, 0] <= out[0, 1])
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_overlay_examples():
    img = np.zeros((2, 2, 3))
    img[..., 0] = 1.0
    np.testing.assert_array_equal(imaging.overlay_mask(img, np.zeros((2, 2), bool)), img)
    out = imaging.overlay_mask(img, np.ones((2, 2), bool))
    np.testing.assert_array_equal(out[0, 0], [0.5, 0.0, 0.5])
    out = imaging.overlay_mask(np.zeros((3, 3, 3)), np.ones((3, 3), bool))
    np.testing.assert_array_equal(out, np.broadcast_to([0.0, 0.0, 0.5], (3, 3, 3)))
    with pytest.raises(imaging.BadParam):
        imaging.overlay_mask(img, np.ones((2, 2), bool), alpha=1.0)


def test_recover_mask_roundtrip_on_random_masks(rng):
    for _ in range(100):
        img = rng.random((10, 12, 3))
        img[..., 2] = np.minimum(img[..., 2], 0.99)
        mask = rng.random((10, 12)) < rng.random()
        np.testing.assert_array_equal(imaging.recover_mask(imaging.overlay_mask(img, mask), img), mask)


def test_recover_mask_examples():
    black = np.zeros((4, 4, 3))
    assert not imaging.recover_mask(black, black).any()
    blue = np.broadcast_to([0.0, 0.0, 0.5], (4, 4, 3))
    assert imaging.recover_mask(blue, black).all()
    with pytest.raises(imaging.ShapeMismatch):
        imaging.recover_mask(black, np.zeros((4, 5, 3)))


def test_mean_fuse_examples(rng):
    a = rng.random((3, 3, 3))
    np.testing.assert_array_equal(imaging.mean_fuse(a, a), a)
    np.testing.assert_array_equal(imaging.mean_fuse(np.zeros((2, 2, 3)), np.ones((2, 2, 3))), 0.5)
    np.testing.assert_allclose(imaging.mean_fuse(np.full((1, 1, 3), 0.2), np.full((1, 1, 3), 0.6)), 0.4)


def test_png_roundtrip_is_exact_on_8bit_values(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3)) / 255.0
    imaging.save_png(img, tmp_path / "x.png")
    np.testing.assert_array_equal(imaging.load_png(tmp_path / "x.png"), img)
    mask = rng.random((5, 7)) < 0.5
    imaging.save_mask_png(mask, tmp_path / "m.png")
    np.testing.assert_array_equal(imaging.load_mask_png(tmp_path / "m.png"), mask)


def test_to_uint8_rounds_and_clamps():
    img = np.array([[[-0.1, 0.5, 1.2]]])
    assert imaging.to_uint8(img).tolist() == [[[0, 128, 255]]]


def test_derived_streams_are_independent_and_reproducible():
    a = imaging.derive_rng(3, "x").random(4)
    np.testing.assert_array_equal(a, imaging.derive_rng(3, "x").random(4))
    assert not np.array_equal(a, imaging.derive_rng(3, "y").random(4))
