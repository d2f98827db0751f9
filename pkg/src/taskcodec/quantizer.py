"""8-bit quantization of compact maps and their lossless PNG container.

Values in [-1, 1] map to integers by ``round((x + 1) * 255 / 2)`` with ties
rounded away from zero, and back by ``q * 2 / 255 - 1``.  A quantized map is
stored as one PNG (grayscale for one channel, RGB for three, otherwise a
grayscale mosaic of channel tiles) whose ``tckh`` text chunk carries the
header needed to undo padding and tiling.
"""

import io
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, PngImagePlugin

from .tensor import Tensor, default_dtype, make_node

HEADER_KEY = "tckh"
_HEADER_FIELDS = ("H", "W", "padH", "padW", "C", "tileRows", "tileCols", "cfgHash")


class ContainerError(ValueError):
    """The file is not a readable container."""


class ContainerHeaderError(ContainerError):
    """The header is missing or disagrees with the pixel payload."""


@dataclass
class QuantizedMap:
    """An 8-bit ``(C, h, w)`` compact map plus the geometry of its source image."""

    pixels: np.ndarray
    height: int
    width: int
    pad_h: int = 0
    pad_w: int = 0
    cfg_hash: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3:
            raise ValueError(f"pixels must be a 3-d uint8 array, got {self.pixels.dtype} {self.pixels.shape}")
        if min(self.pixels.shape) < 1:
            raise ValueError(f"pixels must be nonempty, got shape {self.pixels.shape}")
        if self.pad_h < 0 or self.pad_w < 0 or self.height < 1 or self.width < 1:
            raise ValueError("height/width must be positive and padding nonnegative")

    @property
    def channels(self):
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, QuantizedMap):
            return NotImplemented
        return (
            self.pixels.shape == other.pixels.shape
            and np.array_equal(self.pixels, other.pixels)
            and (self.height, self.width, self.pad_h, self.pad_w, self.cfg_hash)
            == (other.height, other.width, other.pad_h, other.pad_w, other.cfg_hash)
        )


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def quantize_values(x):
    """Elementwise quantization of an array in [-1, 1] to ``uint8``."""
    v = np.asarray(_values(x), dtype=np.float64)
    if v.size and not (np.all(v >= -1.0) and np.all(v <= 1.0)):
        bad = v[~((v >= -1.0) & (v <= 1.0))]
        raise ValueError(
            f"compact map values must lie in [-1, 1]; found {bad.size} outside (e.g. {bad.flat[0]!r})"
        )
    scaled = (v + 1.0) * 255.0 / 2.0
    # half-away-from-zero; scaled is never negative
    return np.floor(scaled + 0.5).astype(np.uint8)


def dequantize_values(q, dtype=None):
    q = np.asarray(q)
    if q.dtype != np.uint8:
        if q.size and (q.min() < 0 or q.max() > 255):
            raise ValueError("quantized values must lie in [0, 255]")
        q = q.astype(np.uint8)
    out = q.astype(np.float64) * 2.0 / 255.0 - 1.0
    return out.astype(dtype or default_dtype())


def quantize(compact, height=None, width=None, pad_h=0, pad_w=0, cfg_hash=""):
    """Quantize one ``(C, h, w)`` compact map.

    ``height``/``width`` describe the source image (before padding); they
    default to ``8*h - pad_h`` and ``8*w - pad_w``.
    """
    values = _values(compact)
    if values.ndim == 4 and values.shape[0] == 1:
        values = values[0]
    if values.ndim != 3:
        raise ValueError(f"expected a (C, h, w) compact map, got shape {values.shape}")
    pixels = quantize_values(values)
    _, h, w = pixels.shape
    if height is None:
        height = 8 * h - pad_h
    if width is None:
        width = 8 * w - pad_w
    return QuantizedMap(pixels, int(height), int(width), int(pad_h), int(pad_w), cfg_hash)


def dequantize(q, dtype=None):
    """Map a :class:`QuantizedMap` (or raw integers) back to [-1, 1]."""
    pixels = q.pixels if isinstance(q, QuantizedMap) else q
    return dequantize_values(pixels, dtype)


def train_bypass(compact):
    """Identity used in place of quantization inside training graphs."""
    return make_node(compact.data, (compact,), lambda g: (g,), "bypass")


def quantize_roundtrip(compact):
    """Quantize then dequantize a batch tensor; blocks gradients.

    The output node carries op name ``"quantize"`` so training code can assert
    it never appears in a differentiated graph.
    """
    out = dequantize_values(quantize_values(compact.data), compact.dtype)
    return make_node(out, (compact,), lambda g: (None,), "quantize")


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------


def _tile_geometry(channels):
    if channels in (1, 3):
        return 1, 1
    cols = math.ceil(math.sqrt(channels))
    rows = math.ceil(channels / cols)
    return rows, cols


def _header_text(q, rows, cols):
    values = {
        "H": q.height,
        "W": q.width,
        "padH": q.pad_h,
        "padW": q.pad_w,
        "C": q.channels,
        "tileRows": rows,
        "tileCols": cols,
        "cfgHash": q.cfg_hash,
    }
    return ";".join(f"{k}={values[k]}" for k in _HEADER_FIELDS)


def _parse_header(text):
    try:
        fields = dict(item.split("=", 1) for item in text.split(";"))
    except ValueError:
        raise ContainerHeaderError(f"malformed {HEADER_KEY} header: {text!r}") from None
    missing = [k for k in _HEADER_FIELDS if k not in fields]
    if missing:
        raise ContainerHeaderError(f"{HEADER_KEY} header lacks fields {missing}")
    try:
        ints = {k: int(fields[k]) for k in _HEADER_FIELDS if k != "cfgHash"}
    except ValueError:
        raise ContainerHeaderError(f"non-integer field in {HEADER_KEY} header: {text!r}") from None
    return ints, fields["cfgHash"]


def encode_container(q):
    """Serialize a :class:`QuantizedMap` to PNG bytes."""
    c, h, w = q.pixels.shape
    rows, cols = _tile_geometry(c)
    if c == 1:
        image = Image.fromarray(q.pixels[0])
    elif c == 3:
        image = Image.fromarray(np.ascontiguousarray(q.pixels.transpose(1, 2, 0)))
    else:
        mosaic = np.zeros((rows * h, cols * w), dtype=np.uint8)
        for k in range(c):
            r, s = divmod(k, cols)
            mosaic[r * h:(r + 1) * h, s * w:(s + 1) * w] = q.pixels[k]
        image = Image.fromarray(mosaic)
    info = PngImagePlugin.PngInfo()
    info.add_text(HEADER_KEY, _header_text(q, rows, cols))
    buf = io.BytesIO()
    image.save(buf, format="PNG", pnginfo=info, optimize=True)
    return buf.getvalue()


def decode_container(blob):
    """Inverse of :func:`encode_container`."""
    try:
        image = Image.open(io.BytesIO(blob))
        image.load()
    except Exception as exc:  # Pillow raises a zoo of types for bad data
        raise ContainerError(f"corrupt container: {exc}") from None
    if image.format != "PNG":
        raise ContainerError(f"corrupt container: expected PNG data, got {image.format}")
    text = getattr(image, "text", {}).get(HEADER_KEY)
    if text is None:
        raise ContainerHeaderError(f"container has no {HEADER_KEY} header")
    ints, cfg_hash = _parse_header(text)
    c, rows, cols = ints["C"], ints["tileRows"], ints["tileCols"]
    arr = np.asarray(image)
    if c == 3:
        if image.mode != "RGB" or (rows, cols) != (1, 1):
            raise ContainerHeaderError(f"header says C=3 but image mode is {image.mode} with tiles {rows}x{cols}")
        pixels = arr.transpose(2, 0, 1)
    elif image.mode != "L":
        raise ContainerHeaderError(f"header says C={c} but image mode is {image.mode}")
    elif c == 1:
        if (rows, cols) != (1, 1):
            raise ContainerHeaderError(f"header says C=1 but tiles are {rows}x{cols}")
        pixels = arr[None]
    else:
        if (rows, cols) != _tile_geometry(c) or arr.shape[0] % rows or arr.shape[1] % cols:
            raise ContainerHeaderError(f"tile geometry {rows}x{cols} inconsistent with C={c} and size {arr.shape}")
        h, w = arr.shape[0] // rows, arr.shape[1] // cols
        pixels = np.stack([arr[(k // cols) * h:(k // cols + 1) * h, (k % cols) * w:(k % cols + 1) * w] for k in range(c)])
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    _, h, w = pixels.shape
    full_h, full_w = ints["H"] + ints["padH"], ints["W"] + ints["padW"]
    if min(ints["H"], ints["W"]) < 1 or min(ints["padH"], ints["padW"]) < 0:
        raise ContainerHeaderError(f"invalid image extents in header: {text!r}")
    if full_h % h or full_w % w or full_h // h != full_w // w:
        raise ContainerHeaderError(
            f"header extents {ints['H']}+{ints['padH']} x {ints['W']}+{ints['padW']} "
            f"do not scale evenly to payload {h}x{w}"
        )
    return QuantizedMap(pixels, ints["H"], ints["W"], ints["padH"], ints["padW"], cfg_hash)


def pack_container(q, path):
    """Write ``q`` to ``path``; returns the on-disk size in bytes."""
    blob = encode_container(q)
    with open(path, "wb") as fh:
        fh.write(blob)
    return os.path.getsize(path)


def unpack_container(path):
    with open(path, "rb") as fh:
        return decode_container(fh.read())
