import io

import numpy as np
import pytest

from eresfd import imageio, tensor


def test_white_pixel_preprocessing(tmp_path):
    p = str(tmp_path / "white.ppm")
    imageio.write_ppm(p, np.full((1, 1, 3), 255, np.uint8))
    t = imageio.load_image(p)
    assert t.shape == (1, 3, 1, 1)
    assert t.ravel().tolist() == [151.0, 138.0, 132.0]  # BGR minus means


def test_mean_pixel_cancels(tmp_path):
    p = str(tmp_path / "mean.ppm")
    # RGB pixel whose BGR ordering equals the channel means
    imageio.write_ppm(p, np.array([[[123, 117, 104]]], np.uint8))
    t = imageio.load_image(p)
    assert np.array_equal(t, np.zeros((1, 3, 1, 1), np.float32))


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    p = str(tmp_path / "img.ppm")
    imageio.write_ppm(p, rgb)
    with open(p, "rb") as f:
        assert np.array_equal(imageio.parse_ppm(f.read()), rgb)


def test_ppm_comments_and_whitespace():
    rgb = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    data = b"P6 # inline\n# a comment line\n 2\t2 # dims\n255\n" + rgb.tobytes()
    assert np.array_equal(imageio.parse_ppm(data), rgb)


def test_non_255_maxval_rejected():
    with pytest.raises(ValueError, match="maxval"):
        imageio.parse_ppm(b"P6\n1 1\n65535\n" + b"\0" * 6)


def test_truncated_pixels_rejected():
    with pytest.raises(ValueError, match="truncated"):
        imageio.parse_ppm(b"P6\n2 2\n255\n" + b"\0" * 5)


def test_blob_passthrough(tmp_path):
    x = np.random.default_rng(1).normal(0, 300, (1, 3, 4, 4)).astype(np.float32)
    p = str(tmp_path / "img.blob")
    tensor.write_blob(x, p)
    assert np.array_equal(imageio.load_image(p), x)  # no preprocessing applied


def test_unsupported_format_names_magic(tmp_path):
    p = str(tmp_path / "img.png")
    with open(p, "wb") as f:
        f.write(b"\x89PNG\r\n" + b"\0" * 40)
    with pytest.raises(ValueError, match=r"PNG"):
        imageio.load_image(p)


def test_resize_nearest():
    x = np.arange(2 * 3 * 4, dtype=np.float32).reshape(1, 2, 3, 4)
    assert np.array_equal(imageio.resize_nearest(x, 3, 4), x)
    up = imageio.resize_nearest(x, 6, 8)
    assert up.shape == (1, 2, 6, 8)
    assert np.array_equal(up[:, :, ::2, ::2], x)
    down = imageio.resize_nearest(x, 1, 2)
    assert down.shape == (1, 2, 1, 2)


def test_flip_horizontal_involution():
    x = np.random.default_rng(2).normal(0, 1, (1, 3, 4, 5)).astype(np.float32)
    f = imageio.flip_horizontal(x)
    assert np.array_equal(f[..., 0], x[..., -1])
    assert np.array_equal(imageio.flip_horizontal(f), x)
