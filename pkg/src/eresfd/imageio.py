"""Image loading and preprocessing.

The one supported codec is binary PPM (P6, 8-bit): losslessly writable
by test fixtures without any codec dependency.  Preprocessing follows
the detector's training convention: channels reordered to BGR and the
per-channel means (104, 117, 123) subtracted, no scaling.  Raw tensor
blobs bypass preprocessing entirely.
"""

from __future__ import annotations

import numpy as np

from . import tensor

BGR_MEANS = (104.0, 117.0, 123.0)


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # PPM tokens are separated by whitespace; '#' starts a comment line.
    while pos < len(data):
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("truncated PPM header")
    return data[start:pos], pos


def parse_ppm(data: bytes) -> np.ndarray:
    """Binary P6 bytes -> (H, W, 3) uint8 RGB array."""
    if not data.startswith(b"P6"):
        raise ValueError(f"not a binary PPM: magic {data[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_token(data, pos)
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = data[pos : pos + 3 * width * height]
    if len(pixels) != 3 * width * height:
        raise ValueError("PPM pixel data truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: str, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def preprocess(rgb: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 RGB -> (1, 3, H, W) float32 BGR minus channel means."""
    bgr = rgb[:, :, ::-1].astype(np.float32)
    bgr -= np.asarray(BGR_MEANS, dtype=np.float32)
    return np.ascontiguousarray(bgr.transpose(2, 0, 1)[None])


def load_image(path: str) -> np.ndarray:
    """PPM files are preprocessed; raw tensor blobs pass through unchanged."""
    with open(path, "rb") as f:
        data = f.read()
    if data.startswith(b"P6"):
        return preprocess(parse_ppm(data))
    try:
        import io
        return tensor.read_blob(io.BytesIO(data))
    except ValueError:
        raise ValueError(
            f"unsupported image format: magic {data[:4]!r} "
            "(expected binary PPM 'P6' or a raw tensor blob)") from None


def resize_nearest(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a (n, c, h, w) tensor."""
    x = tensor.as_tensor(x)
    h, w = x.shape[2], x.shape[3]
    rows = np.minimum((np.arange(out_h) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum((np.arange(out_w) * w / out_w).astype(np.int64), w - 1)
    return np.ascontiguousarray(x[:, :, rows][:, :, :, cols])


def flip_horizontal(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(tensor.as_tensor(x)[:, :, :, ::-1])
