from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ycbcr_adv.colorspace import (
    ColorSpace,
    ColorSpaceError,
    ImageBatch,
    Scale,
    luma_t,
    per_channel_l2,
    replace_y,
    replace_y_t,
    rgb_to_ycbcr,
    rgb_to_ycbcr_t,
    ycbcr_to_rgb,
    ycbcr_to_rgb_t,
)

# forward coefficients as exact rationals, typed in independently of the module
Y_ROW = (Fraction("0.299"), Fraction("0.587"), Fraction("0.114"))
CB_ROW = (Fraction("-0.168736"), Fraction("-0.331264"), Fraction("0.5"))
CR_ROW = (Fraction("0.5"), Fraction("-0.418688"), Fraction("-0.081312"))


def exact_ycbcr(r, g, b):
    rgb = [Fraction(v) for v in (r, g, b)]
    y = sum(c * v for c, v in zip(Y_ROW, rgb))
    cb = 128 + sum(c * v for c, v in zip(CB_ROW, rgb))
    cr = 128 + sum(c * v for c, v in zip(CR_ROW, rgb))
    return float(y), float(cb), float(cr)


def pixel(r, g, b, scale=Scale.BYTE):
    return ImageBatch(np.array([[[[r, g, b]]]], dtype=np.float64), ColorSpace.RGB, scale)


@pytest.mark.parametrize(
    "rgb, expected",
    [
        ((255, 255, 255), (255.0, 128.0, 128.0)),
        ((0, 0, 0), (0.0, 128.0, 128.0)),
        ((255, 0, 0), exact_ycbcr(255, 0, 0)),
    ],
)
def test_forward_hand_values(rgb, expected):
    out = rgb_to_ycbcr(pixel(*rgb)).data.ravel()
    np.testing.assert_allclose(out, expected, atol=1e-9, rtol=0)


def test_red_is_unclamped():
    y, cb, cr = rgb_to_ycbcr(pixel(255, 0, 0)).data.ravel()
    assert y == pytest.approx(76.245, abs=1e-9)
    assert cb == pytest.approx(84.97232, abs=1e-9)
    assert cr == pytest.approx(255.5, abs=1e-9)  # above 255, kept as is


def test_unit_input_is_mapped_to_byte():
    out = rgb_to_ycbcr(pixel(1.0, 1.0, 1.0, Scale.UNIT))
    assert out.scale is Scale.BYTE and out.space is ColorSpace.YCBCR
    np.testing.assert_allclose(out.data.ravel(), [255, 128, 128], atol=1e-9)


@pytest.mark.parametrize("ycc, rgb", [((255, 128, 128), (255, 255, 255)), ((0, 128, 128), (0, 0, 0))])
def test_inverse_neutral_chroma(ycc, rgb):
    batch = ImageBatch(np.array([[[ycc]]], dtype=np.float64), ColorSpace.YCBCR, Scale.BYTE)
    np.testing.assert_allclose(ycbcr_to_rgb(batch).data.ravel(), rgb, atol=1e-9)


def test_wrong_tags_raise():
    rgb = pixel(1, 2, 3)
    with pytest.raises(ColorSpaceError):
        ycbcr_to_rgb(rgb)
    with pytest.raises(ColorSpaceError):
        rgb_to_ycbcr(rgb_to_ycbcr(rgb))
    with pytest.raises(ColorSpaceError):
        ycbcr_to_rgb(rgb_to_ycbcr(rgb).to_unit())


def test_round_trip_10k_pixels():
    rng = np.random.default_rng(0)
    x = ImageBatch(rng.uniform(0, 255, size=(1, 100, 100, 3)), ColorSpace.RGB, Scale.BYTE)
    back = ycbcr_to_rgb(rgb_to_ycbcr(x))
    assert np.abs(back.data - x.data).max() < 1e-3


def test_inverse_clamp_and_unit_flag():
    ycc = rgb_to_ycbcr(pixel(255, 0, 0))
    shifted = ImageBatch(ycc.data + [40, 0, 0], ColorSpace.YCBCR, Scale.BYTE)
    out = ycbcr_to_rgb(shifted, clamp=True, to_unit=True)
    assert out.scale is Scale.UNIT
    assert out.data.max() <= 1.0 and out.data.min() >= 0.0
    raw = ycbcr_to_rgb(shifted)
    assert raw.data.max() > 255  # no silent clamping by default


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (4, 3), elements=st.floats(0, 255)),
    st.floats(-50, 50),
)
def test_grayscale_shift_leaves_chroma(rgb, delta):
    a = ImageBatch(rgb.reshape(1, 2, 2, 3), ColorSpace.RGB, Scale.BYTE)
    b = ImageBatch(a.data + delta, ColorSpace.RGB, Scale.BYTE)
    ya, yb = rgb_to_ycbcr(a).data, rgb_to_ycbcr(b).data
    np.testing.assert_allclose(yb[..., 1:], ya[..., 1:], atol=1e-9)
    np.testing.assert_allclose(yb[..., 0] - ya[..., 0], delta, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(0, 255)), st.floats(-30, 30))
def test_luma_only_change_maps_to_equal_rgb_deltas(rgb, dy):
    ycc = rgb_to_ycbcr(ImageBatch(rgb.reshape(1, 2, 2, 3), ColorSpace.RGB, Scale.BYTE))
    bumped = ImageBatch(ycc.data + [dy, 0, 0], ColorSpace.YCBCR, Scale.BYTE)
    d = ycbcr_to_rgb(bumped).data - ycbcr_to_rgb(ycc).data
    np.testing.assert_allclose(d, np.full_like(d, dy), atol=1e-9)


# --- per-channel L2 ------------------------------------------------------------------


def test_l2_identity_and_single_pixel():
    x = ImageBatch(np.random.default_rng(1).uniform(0, 255, (2, 4, 4, 3)), ColorSpace.RGB, Scale.BYTE)
    assert np.all(per_channel_l2(x, x).per_channel_l2 == 0)
    y = x.data.copy()
    y[1, 2, 3] += [3, 4, 0]
    d = per_channel_l2(x, ImageBatch(y, ColorSpace.RGB, Scale.BYTE))
    np.testing.assert_allclose(d.per_channel_l2, [3, 4, 0], atol=1e-9)


def test_l2_is_measured_on_byte_scale():
    a = ImageBatch(np.zeros((1, 1, 1, 3)), ColorSpace.RGB, Scale.UNIT)
    b = ImageBatch(np.full((1, 1, 1, 3), 0.1), ColorSpace.RGB, Scale.UNIT)
    np.testing.assert_allclose(per_channel_l2(a, b).per_channel_l2, [25.5] * 3)


def test_l2_grayscale_shift_in_ycbcr():
    h, w, delta = 6, 5, 7.0
    x = ImageBatch(np.random.default_rng(2).uniform(20, 200, (1, h, w, 3)), ColorSpace.RGB, Scale.BYTE)
    shifted = ImageBatch(x.data + delta, ColorSpace.RGB, Scale.BYTE)
    d = per_channel_l2(rgb_to_ycbcr(shifted), rgb_to_ycbcr(x)).per_channel_l2
    np.testing.assert_allclose(d, [delta * np.sqrt(h * w), 0, 0], atol=1e-9)


def test_l2_mismatch_errors():
    a = ImageBatch(np.zeros((1, 2, 2, 3)))
    with pytest.raises(ColorSpaceError):
        per_channel_l2(a, ImageBatch(np.zeros((1, 2, 3, 3))))
    with pytest.raises(ColorSpaceError):
        per_channel_l2(a, rgb_to_ycbcr(a))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2, 2, 3), elements=st.floats(0, 1)))
def test_l2_symmetric_and_triangle(stack):
    a, b, c = (ImageBatch(s[None]) for s in stack)
    ab = per_channel_l2(a, b).per_channel_l2
    np.testing.assert_allclose(ab, per_channel_l2(b, a).per_channel_l2)
    assert np.all(ab <= per_channel_l2(a, c).per_channel_l2 + per_channel_l2(c, b).per_channel_l2 + 1e-9)
    assert np.all(ab >= 0) and np.all(np.isfinite(ab))


# --- Y replacement ----------------------------------------------------------------------


def test_replace_y_identity():
    x = ImageBatch(np.random.default_rng(3).uniform(0, 1, (2, 4, 4, 3)))
    np.testing.assert_allclose(replace_y(x, x).data * 255, x.data * 255, atol=1e-3)


def test_replace_y_keeps_carrier_chroma_and_equal_deltas():
    rng = np.random.default_rng(4)
    carrier = ImageBatch(rng.uniform(0.1, 0.9, (3, 5, 5, 3)))
    source = ImageBatch(np.clip(carrier.data + rng.normal(0, 0.05, carrier.shape), 0, 1))
    out = replace_y(carrier, source)
    np.testing.assert_allclose(rgb_to_ycbcr(out).data[..., 1:], rgb_to_ycbcr(carrier).data[..., 1:], atol=1e-6)
    d = out.data - carrier.data
    np.testing.assert_allclose(d[..., 0], d[..., 1], atol=1e-12)
    np.testing.assert_allclose(d[..., 1], d[..., 2], atol=1e-12)
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_replace_y_matches_inverse_formula_when_unclamped():
    rng = np.random.default_rng(5)
    carrier = ImageBatch(rng.uniform(0.2, 0.8, (2, 4, 4, 3)))
    source = ImageBatch(np.clip(carrier.data + rng.normal(0, 0.03, carrier.shape), 0, 1))
    ycc = rgb_to_ycbcr(carrier).data.copy()
    ycc[..., 0] = rgb_to_ycbcr(source).data[..., 0]
    via_formula = ycbcr_to_rgb(ImageBatch(ycc, ColorSpace.YCBCR, Scale.BYTE), clamp=True, to_unit=True)
    np.testing.assert_allclose(replace_y(carrier, source).data * 255, via_formula.data * 255, atol=1e-3)


def test_replace_y_overwrites_grayscale_shift():
    x = ImageBatch(np.random.default_rng(6).uniform(0.2, 0.8, (1, 4, 4, 3)))
    shifted = ImageBatch(x.data + 0.1)
    np.testing.assert_allclose(replace_y(shifted, x).data * 255, x.data * 255, atol=1e-3)


def test_replace_y_clamps_luma_not_rgb():
    carrier = ImageBatch(np.array([[[[0.95, 0.2, 0.1]]]]))
    source = ImageBatch(np.ones((1, 1, 1, 3)))
    out = replace_y(carrier, source)
    assert out.data.max() == pytest.approx(1.0)
    np.testing.assert_allclose(rgb_to_ycbcr(out).data[..., 1:], rgb_to_ycbcr(carrier).data[..., 1:], atol=1e-9)


def test_replace_y_shape_mismatch():
    with pytest.raises(ColorSpaceError):
        replace_y(ImageBatch(np.zeros((1, 2, 2, 3))), ImageBatch(np.zeros((1, 2, 3, 3))))


# --- torch twins ------------------------------------------------------------------------


def test_torch_twins_match_numpy():
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 1, (2, 4, 4, 3))
    xt = torch.from_numpy(x.transpose(0, 3, 1, 2).copy())
    ycc_np = rgb_to_ycbcr(ImageBatch(x)).data
    ycc_t = rgb_to_ycbcr_t(xt).numpy().transpose(0, 2, 3, 1)
    np.testing.assert_allclose(ycc_t, ycc_np, atol=1e-9)
    np.testing.assert_allclose(luma_t(xt).numpy()[:, 0], ycc_np[..., 0], atol=1e-9)
    back = ycbcr_to_rgb_t(rgb_to_ycbcr_t(xt)).numpy().transpose(0, 2, 3, 1)
    np.testing.assert_allclose(back * 255, x * 255, atol=1e-3)
    src = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
    rt = replace_y_t(xt, torch.from_numpy(src.transpose(0, 3, 1, 2).copy())).numpy().transpose(0, 2, 3, 1)
    np.testing.assert_allclose(rt, replace_y(ImageBatch(x), ImageBatch(src)).data, atol=1e-12)
