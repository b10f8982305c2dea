"""Image, watermark and manifest file formats.

Watermark container (little-endian)::

    offset  size  field
    0       4     magic b"CMUA"
    4       2     version (u16) = 1
    6       2     reserved (u16) = 0
    8       4     height (u32)
    12      4     width (u32)
    16      4     channels (u32)
    20      4     epsilon (f32)
    24      4*n   payload, f32, row-major, channel-last
    24+4n   4     CRC32 (IEEE) of the payload bytes (u32)
"""

import json
import os
import struct
import zlib

import numpy as np
from PIL import Image

from .attack import Watermark

MAGIC = b"CMUA"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIIf")


class WatermarkFormatError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------- images


def to_uint8(image):
    """Map [0, 1] floats to 8-bit values, rounding halves away from zero."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)


def from_uint8(pixels):
    return (np.asarray(pixels, dtype=np.float32) / np.float32(255)).astype(np.float32)


def load_image(path):
    """Read an 8-bit RGB PNG or PPM as an ``(H, W, 3)`` float32 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise ImageFormatError(f"{path}: expected 8-bit RGB, got mode {im.mode!r}")
            return from_uint8(np.asarray(im))
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot read image ({exc})") from exc


def save_image(path, image):
    """Write an ``(H, W, 3)`` image in [0, 1]; the format follows the suffix (.png or .ppm)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageFormatError(f"expected an (H, W, 3) image, got shape {image.shape}")
    ext = os.path.splitext(str(path))[1].lower()
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(ext)
    if fmt is None:
        raise ImageFormatError(f"{path}: unsupported image format {ext!r}; use .png or .ppm")
    Image.fromarray(to_uint8(image)).save(path, format=fmt)


def list_images(directory):
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith((".png", ".ppm")))
    return [os.path.join(directory, n) for n in names]


def load_image_dir(directory, start=0, count=None):
    paths = list_images(directory)
    stop = len(paths) if count is None else start + count
    if start < 0 or stop > len(paths):
        raise IndexError(f"{directory}: requested images [{start}, {stop}) but only {len(paths)} exist")
    images = [load_image(p) for p in paths[start:stop]]
    if images and any(im.shape != images[0].shape for im in images):
        raise ImageFormatError(f"{directory}: images differ in size")
    return np.stack(images) if images else np.zeros((0, 0, 0, 3), dtype=np.float32)


def watermark_preview(watermark):
    """Render a watermark as a viewable image, mapping [-eps, eps] to [0, 1]."""
    eps = watermark.epsilon or 1.0
    return (watermark.perturbation / (2 * eps) + 0.5).clip(0, 1)


# ------------------------------------------------------------- watermarks


def encode_watermark(watermark):
    w = np.ascontiguousarray(watermark.perturbation, dtype="<f4")
    if w.ndim != 3:
        raise WatermarkFormatError(f"watermark must be (H, W, C), got shape {w.shape}")
    h, wd, c = w.shape
    payload = w.tobytes()
    header = _HEADER.pack(MAGIC, VERSION, 0, h, wd, c, float(np.float32(watermark.epsilon)))
    return header + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode_watermark(blob):
    if len(blob) < _HEADER.size + 4:
        raise WatermarkFormatError("file too short for a watermark header")
    magic, version, reserved, h, w, c, eps = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise WatermarkFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WatermarkFormatError(f"unsupported version {version}")
    if reserved != 0:
        raise WatermarkFormatError("reserved header field is not zero")
    n = h * w * c
    expected = _HEADER.size + 4 * n + 4
    if len(blob) != expected:
        raise WatermarkFormatError(f"expected {expected} bytes for a {h}x{w}x{c} watermark, got {len(blob)}")
    payload = blob[_HEADER.size:_HEADER.size + 4 * n]
    (crc,) = struct.unpack_from("<I", blob, _HEADER.size + 4 * n)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise WatermarkFormatError("payload CRC mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise WatermarkFormatError("payload contains non-finite values")
    if eps < 0 or (data.size and np.max(np.abs(data)) > np.float32(eps)):
        raise WatermarkFormatError(f"payload exceeds its declared epsilon {eps}")
    return Watermark(data, float(eps))


def save_watermark(path, watermark):
    with open(path, "wb") as fh:
        fh.write(encode_watermark(watermark))


def load_watermark(path):
    with open(path, "rb") as fh:
        return decode_watermark(fh.read())


# ------------------------------------------------------------- documents


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
