import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilevlm.image import (
    ContractError,
    ImageDims,
    PpmError,
    RasterImage,
    bilinear_resize,
    crop,
    read_ppm,
    read_ppm_bytes,
    write_ppm,
)


def _img(arr):
    return RasterImage(np.asarray(arr, dtype=np.float64))


def _random_image(rng, h, w):
    return RasterImage(rng.random((h, w, 3)))


def test_dims_validation():
    with pytest.raises(ContractError):
        ImageDims(0, 5)
    with pytest.raises(ContractError):
        RasterImage(np.zeros((4, 4, 4)))
    with pytest.raises(ContractError):
        RasterImage(np.zeros((4, 4, 3), dtype=np.float32))


def test_resize_identity_is_bit_exact():
    rng = np.random.default_rng(0)
    img = _random_image(rng, 17, 23)
    out = bilinear_resize(img, 17, 23)
    assert np.array_equal(out.pixels, img.pixels)


def test_resize_constant_stays_constant():
    img = RasterImage(np.full((13, 7, 3), 0.37))
    out = bilinear_resize(img, 29, 31)
    assert np.allclose(out.pixels, 0.37, atol=0, rtol=0)


def test_resize_upsample_2_to_4_hand_values():
    # Half-pixel centers for 2 -> 4 land at [-0.25, 0.25, 0.75, 1.25]:
    # clamped endpoints plus 3:1 / 1:3 blends in the middle.
    a, b = 0.2, 0.8
    col = np.zeros((2, 1, 3))
    col[0], col[1] = a, b
    out = bilinear_resize(RasterImage(col), 4, 1).pixels[:, 0, 0]
    expected = [a, 0.75 * a + 0.25 * b, 0.25 * a + 0.75 * b, b]
    assert np.allclose(out, expected, atol=1e-15)


def test_resize_downsample_4_to_2_hand_values():
    vals = np.array([0.1, 0.5, 0.3, 0.9])
    col = np.zeros((4, 1, 3))
    col[:, 0, :] = vals[:, None]
    out = bilinear_resize(RasterImage(col), 2, 1).pixels[:, 0, 0]
    # centers at 0.5 and 2.5: plain midpoints of each source pair
    assert np.allclose(out, [(0.1 + 0.5) / 2, (0.3 + 0.9) / 2], atol=1e-15)


def test_resize_rejects_bad_target():
    img = _img(np.zeros((2, 2, 3)))
    with pytest.raises(ContractError):
        bilinear_resize(img, 0, 4)


def test_crop_and_bounds():
    rng = np.random.default_rng(1)
    img = _random_image(rng, 10, 12)
    tile = crop(img, 2, 3, 4, 5)
    assert np.array_equal(tile.pixels, img.pixels[2:6, 3:8])
    with pytest.raises(ContractError):
        crop(img, 7, 0, 4, 4)


# ---- PPM IO ------------------------------------------------------------------


def test_ppm_round_trip_exact(tmp_path):
    rng = np.random.default_rng(2)
    raw = rng.integers(0, 256, size=(9, 5, 3), dtype=np.uint8)
    img = RasterImage(raw.astype(np.float64) / 255.0)
    path = tmp_path / "rt.ppm"
    write_ppm(img, path)
    back = read_ppm(path)
    assert np.array_equal(back.pixels, img.pixels)


def test_ppm_golden_bytes(tmp_path):
    img = _img([[[0.0, 0.5, 1.0], [1.0, 0.0, 0.0]]])  # 1x2 image
    path = tmp_path / "g.ppm"
    write_ppm(img, path)
    # 0.5*255 = 127.5 rounds to even -> 128
    assert path.read_bytes() == b"P6\n2 1\n255\n" + bytes([0, 128, 255, 255, 0, 0])


def test_ppm_header_comments_ok():
    data = b"P6 # magic\n# a comment line\n2 1\n# another\n255\n" + bytes(6)
    img = read_ppm_bytes(data)
    assert img.dims == ImageDims(1, 2)


@pytest.mark.parametrize(
    "data",
    [
        b"P5\n2 1\n255\n" + bytes(6),          # wrong magic
        b"P6\n2 1\n65535\n" + bytes(12),       # unsupported maxval
        b"P6\n2 1\n255\n" + bytes(5),          # truncated raster
        b"P6\n2 1\n255\n" + bytes(7),          # trailing byte
        b"P6\n0 1\n255\n",                     # zero width
        b"P6\n2 x\n255\n" + bytes(6),          # non-numeric height
        b"P6\n2 1\n255",                       # header cut short
    ],
)
def test_ppm_malformed_rejected(data):
    with pytest.raises(PpmError):
        read_ppm_bytes(data)


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(1, 8),
    w=st.integers(1, 8),
    seed=st.integers(0, 10_000),
)
def test_ppm_round_trip_property(h, w, seed, tmp_path_factory):
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    img = RasterImage(raw.astype(np.float64) / 255.0)
    buf_path = tmp_path_factory.mktemp("ppm") / "p.ppm"
    write_ppm(img, buf_path)
    assert np.array_equal(read_ppm(buf_path).pixels, img.pixels)


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(1, 20),
    w=st.integers(1, 20),
    oh=st.integers(1, 30),
    ow=st.integers(1, 30),
)
def test_resize_output_in_range(h, w, oh, ow):
    rng = np.random.default_rng(h * 1000 + w * 100 + oh * 10 + ow)
    out = bilinear_resize(_random_image(rng, h, w), oh, ow)
    assert out.dims == ImageDims(oh, ow)
    # Convex combinations of inputs cannot escape the input range.
    assert out.pixels.min() >= -1e-12
    assert out.pixels.max() <= 1.0 + 1e-12
