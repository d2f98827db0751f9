"""Compression accounting, reconstruction quality and recognition accuracy.

Reports are plain dataclasses written as CSV with a fixed column order
(:data:`REPORT_COLUMNS`).  Byte counts are always true on-disk (or
serialized) sizes of PNG data, headers included.
"""

import csv
import io
import math
import os
import shlex
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .data import hwc_to_nchw, nchw_to_hwc, read_image, to_uint8, to_unit_range
from .codec import pad_amounts
from .quantizer import (
    QuantizedMap,
    dequantize,
    encode_container,
    quantize_roundtrip,
    quantize_values,
    train_bypass,
    unpack_container,
)
from .recognizer import classification_accuracy, cosine_similarity, embed, kfold_accuracy
from .tensor import Tensor, default_dtype, no_grad

MODES = ("with_quant", "without_quant", "original")
REPORT_COLUMNS = (
    "dataset", "codec", "mode", "n_images", "original_bytes", "compressed_bytes",
    "compression_ratio", "bpp", "psnr_db", "accuracy", "metric", "config_hash", "timestamp",
)
CONTAINER_SUFFIX = ".tck.png"


class CompressionError(OSError):
    """Writing containers failed; ``written`` lists files to clean up."""

    def __init__(self, message, written):
        super().__init__(message)
        self.written = written


def report_timestamp():
    """``SOURCE_DATE_EPOCH`` when set (reproducible reports), else now."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class EvalReport:
    dataset: str
    codec: str
    mode: str
    n_images: int
    original_bytes: int
    compressed_bytes: int
    compression_ratio: float
    bpp: float
    psnr_db: float
    accuracy: float
    metric: str
    config_hash: str = ""
    timestamp: str = field(default_factory=report_timestamp)

    def row(self):
        return [_fmt(getattr(self, c)) for c in REPORT_COLUMNS]


def _fmt(value):
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf"
        return f"{value:.6f}"
    return str(value)


def reports_csv(reports, extra_columns=()):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(REPORT_COLUMNS) + [c for c, _ in extra_columns])
    for i, r in enumerate(reports):
        writer.writerow(r.row() + [_fmt(values[i]) for _, values in extra_columns])
    return buf.getvalue()


def write_reports(path, reports, extra_columns=()):
    with open(path, "w", newline="") as fh:
        fh.write(reports_csv(reports, extra_columns))


def compression_ratio(original_bytes, compressed_bytes):
    """``original / compressed``; NaN when nothing was compressed."""
    if compressed_bytes <= 0:
        return float("nan")
    return original_bytes / compressed_bytes


def bits_per_pixel(compressed_bytes, pixels):
    if pixels <= 0:
        return float("nan")
    return 8.0 * compressed_bytes / pixels


def psnr(original, reconstructed):
    """PSNR in dB on the 8-bit scale for arrays holding values in [-1, 1].

    Identical inputs give ``inf``.
    """
    a = np.asarray(original.data if isinstance(original, Tensor) else original, dtype=np.float64)
    b = np.asarray(reconstructed.data if isinstance(reconstructed, Tensor) else reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean(((a - b) * 127.5) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(255.0**2 / mse))


def mean_psnr(originals, reconstructions):
    values = [psnr(a, b) for a, b in zip(originals, reconstructions)]
    finite = [v for v in values if math.isfinite(v)]
    if not values:
        return float("nan")
    if len(finite) < len(values):
        return float("inf") if not finite else float(np.mean(finite))
    return float(np.mean(values))


def png_bytes(pixels_hwc):
    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels_hwc, dtype=np.uint8)).save(buf, format="PNG", optimize=True)
    return buf.getvalue()


def lossless_size(images):
    """Total PNG size of ``(N, 3, H, W)`` images in [-1, 1]."""
    return sum(len(png_bytes(img)) for img in nchw_to_hwc(to_uint8(images)))


# ---------------------------------------------------------------------------
# learned codec passes
# ---------------------------------------------------------------------------


def encode_batch(codec, images):
    """Inference CompNet on ``(N, 3, H, W)`` images; pads to the scale factor."""
    factor = codec.config.factor
    ph, pw = pad_amounts(images.shape[2], images.shape[3], factor)
    with no_grad():
        compact = codec.compnet(Tensor(images, dtype=default_dtype()), training=False, pad=True)
    return compact.data, ph, pw


def decode_batch(codec, compact, height, width):
    with no_grad():
        out = codec.recnet(Tensor(compact, dtype=default_dtype()), training=False).data
    return out[:, :, :height, :width]


def run_codec(codec, images, mode, batch_size=32):
    """Push images through the codec.

    Returns a dict with ``reconstructions``, ``recnet_inputs``, ``compacts``
    and ``compressed_bytes``.  Both modes share the CompNet pass and the
    container accounting; they differ only in what RecNet receives.
    """
    if mode not in ("with_quant", "without_quant"):
        raise ValueError(f"mode must be with_quant or without_quant, got {mode!r}")
    n, _, h, w = images.shape
    cfg_hash = codec.config.config_hash()
    recons, inputs, compacts, total = [], [], [], 0
    for start in range(0, n, batch_size):
        batch = images[start:start + batch_size]
        compact, ph, pw = encode_batch(codec, batch)
        for c in compact:
            q = QuantizedMap(quantize_values(c), h, w, ph, pw, cfg_hash)
            total += len(encode_container(q))
        with no_grad():
            leg = quantize_roundtrip if mode == "with_quant" else train_bypass
            rec_in = leg(Tensor(compact, dtype=compact.dtype)).data
        recons.append(decode_batch(codec, rec_in, h, w))
        inputs.append(rec_in)
        compacts.append(compact)
    empty = np.zeros((0, 3, h, w), dtype=default_dtype())
    return {
        "reconstructions": np.concatenate(recons) if recons else empty,
        "recnet_inputs": np.concatenate(inputs) if inputs else empty,
        "compacts": np.concatenate(compacts) if compacts else empty,
        "compressed_bytes": total,
    }


def pipeline_ops(codec, image, mode):
    """Op names recorded for one forward pass of the compress/reconstruct leg."""
    x = Tensor(image[None] if image.ndim == 3 else image, requires_grad=True)
    compact = codec.compnet(x, training=False, pad=True)
    leg = quantize_roundtrip if mode == "with_quant" else train_bypass
    out = codec.recnet(leg(compact), training=False)
    return [node.op for node in out.graph()]


def _accuracy(extractor, head, images, labels, pairs, n_folds):
    if pairs:
        emb = embed(extractor, images)
        a = np.array([p[0] for p in pairs])
        b = np.array([p[1] for p in pairs])
        same = np.array([bool(p[2]) for p in pairs])
        return kfold_accuracy(cosine_similarity(emb[a], emb[b]), same, n_folds).accuracy, "verification"
    return classification_accuracy(extractor, head, images, labels), "classification"


def evaluate_pipeline(dataset, codec, extractor, head, mode, pairs=None, dataset_name="toy",
                      original_bytes=None, expected_hash=None, n_folds=10, return_details=False):
    """CompNet -> (quantize + container | bypass) -> RecNet -> recognizer.

    ``mode="original"`` skips the codec and scores the source images.
    Accuracy is verification accuracy when ``pairs`` (index triples) are
    given, else classification accuracy of the LMCL head.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    images = dataset.images
    n, _, h, w = images.shape if len(images) else (0, 3, 0, 0)
    if original_bytes is None:
        original_bytes = lossless_size(images)
    if mode == "original" or codec is None:
        recon, compressed, cfg_hash, details = images, original_bytes, "", {}
        name = "original"
    else:
        cfg_hash = codec.config.config_hash()
        if expected_hash is not None and expected_hash != cfg_hash:
            raise ValueError(f"config hash mismatch: data encoded with {expected_hash}, codec is {cfg_hash}")
        details = run_codec(codec, images, mode)
        recon, compressed = details["reconstructions"], details["compressed_bytes"]
        name = "learned"
    acc, metric = _accuracy(extractor, head, recon, dataset.labels, pairs, n_folds) if n else (float("nan"), "none")
    report = EvalReport(
        dataset=dataset_name,
        codec=name,
        mode=mode,
        n_images=n,
        original_bytes=int(original_bytes),
        compressed_bytes=int(compressed),
        compression_ratio=compression_ratio(original_bytes, compressed),
        bpp=bits_per_pixel(compressed, n * h * w),
        psnr_db=mean_psnr(images, recon) if n else float("nan"),
        accuracy=acc,
        metric=metric,
        config_hash=cfg_hash,
    )
    return (report, details) if return_details else report


# ---------------------------------------------------------------------------
# dataset-level compress / decompress
# ---------------------------------------------------------------------------


def _stem(name):
    base = os.path.basename(name)
    for suffix in (CONTAINER_SUFFIX, ".png", ".jpg", ".jpeg", ".jp2", ".bmp"):
        if base.lower().endswith(suffix):
            return base[: -len(suffix)]
    return os.path.splitext(base)[0]


@dataclass
class CompressResult:
    paths: list
    sizes: list
    original_bytes: int
    compressed_bytes: int
    pixels: int

    @property
    def ratio(self):
        return compression_ratio(self.original_bytes, self.compressed_bytes)

    @property
    def bpp(self):
        return bits_per_pixel(self.compressed_bytes, self.pixels)

    @property
    def flagged(self):
        """True when the ratio is undefined (empty dataset)."""
        return self.compressed_bytes == 0


def compress_dataset(images, ids, codec, out_dir, original_bytes=None, batch_size=32):
    """Write one container per image into ``out_dir`` (sorted by id)."""
    os.makedirs(out_dir, exist_ok=True)
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    cfg_hash = codec.config.config_hash()
    written, sizes = [], []
    pixels = 0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        batch = images[idx]
        _, _, h, w = batch.shape
        compact, ph, pw = encode_batch(codec, batch)
        for i, c in zip(idx, compact):
            q = QuantizedMap(quantize_values(c), h, w, ph, pw, cfg_hash)
            path = os.path.join(out_dir, _stem(ids[i]) + CONTAINER_SUFFIX)
            try:
                with open(path, "wb") as fh:
                    fh.write(encode_container(q))
            except OSError as exc:
                raise CompressionError(f"failed writing {path}: {exc}", written) from exc
            written.append(path)
            sizes.append(os.path.getsize(path))
            pixels += h * w
    if original_bytes is None:
        original_bytes = lossless_size(images) if len(ids) else 0
    return CompressResult(written, sizes, int(original_bytes), int(sum(sizes)), pixels)


def decompress_dataset(in_dir, codec, out_dir):
    """Reconstruct every container in ``in_dir`` to PNG in ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    cfg_hash = codec.config.config_hash()
    outputs = []
    for name in sorted(f for f in os.listdir(in_dir) if f.endswith(CONTAINER_SUFFIX)):
        q = unpack_container(os.path.join(in_dir, name))
        if q.cfg_hash and q.cfg_hash != cfg_hash:
            raise ValueError(f"{name}: encoded with codec config {q.cfg_hash}, decoder is {cfg_hash}")
        compact = dequantize(q)[None]
        recon = decode_batch(codec, compact, q.height, q.width)
        path = os.path.join(out_dir, _stem(name) + ".png")
        Image.fromarray(nchw_to_hwc(to_uint8(recon))[0]).save(path)
        outputs.append(path)
    return outputs


# ---------------------------------------------------------------------------
# external baselines
# ---------------------------------------------------------------------------


@dataclass
class BaselineCodec:
    """External codec driven by command templates.

    ``encode`` and ``decode`` are shell-style templates over whole
    directories: ``{src}``, ``{dst}``, ``{quality}`` (encode only) and
    ``{python}`` (the running interpreter).  The decoder must write one PNG
    per input, named by the input stem.  Without ``{quality}`` the codec has
    a single operating point.
    """

    name: str
    encode: str
    decode: str
    quality_range: tuple = (1, 95)
    integer_quality: bool = True
    larger_is_smaller: bool = False

    @property
    def tunable(self):
        return "{quality}" in self.encode

    def command(self, template, **values):
        values.setdefault("python", sys.executable)
        return [part.format(**values) for part in shlex.split(template)]

    def available(self):
        exe = self.command(self.encode, src="x", dst="y", quality=1)[0]
        return shutil.which(exe) is not None or os.path.exists(exe)


def default_baselines():
    from PIL import features

    codecs = [BaselineCodec("jpeg", "{python} -m taskcodec.baseline encode --format jpeg --quality {quality} {src} {dst}",
                            "{python} -m taskcodec.baseline decode {src} {dst}", (1, 95))]
    if features.check("jpg_2000"):
        codecs.append(BaselineCodec("jpeg2000",
                                    "{python} -m taskcodec.baseline encode --format jpeg2000 --quality {quality} {src} {dst}",
                                    "{python} -m taskcodec.baseline decode {src} {dst}", (2, 400), False, True))
    return codecs


def _dir_bytes(path):
    return sum(os.path.getsize(os.path.join(path, f)) for f in os.listdir(path))


def run_baseline(codec, src_dir, work_dir, quality=None):
    """Encode and decode ``src_dir``; returns (bytes, decoded dir, command line)."""
    tag = "q" if quality is None else f"q{quality}"
    enc = os.path.join(work_dir, f"{codec.name}-{tag}-enc")
    dec = os.path.join(work_dir, f"{codec.name}-{tag}-dec")
    for d in (enc, dec):
        shutil.rmtree(d, ignore_errors=True)
        os.makedirs(d)
    values = {"src": src_dir, "dst": enc}
    if codec.tunable:
        values["quality"] = quality
    cmd = codec.command(codec.encode, **values)
    subprocess.run(cmd, check=True, capture_output=True)
    subprocess.run(codec.command(codec.decode, src=enc, dst=dec), check=True, capture_output=True)
    return _dir_bytes(enc), dec, shlex.join(cmd)


def _read_decoded(dec_dir, ids):
    pixels = [read_image(os.path.join(dec_dir, _stem(i) + ".png")) for i in ids]
    return to_unit_range(hwc_to_nchw(np.stack(pixels)))


def match_quality(codec, src_dir, work_dir, target_bytes, tolerance=0.02, max_iter=12):
    """Search the quality knob for total bytes closest to ``target_bytes``.

    Returns ``(quality, bytes, decoded_dir, command, matched)``; ``matched``
    is False when the codec cannot get within ``tolerance`` (a floor or
    ceiling of its rate range), in which case the closest point is kept.
    """
    if not codec.tunable:
        size, dec, cmd = run_baseline(codec, src_dir, work_dir)
        return None, size, dec, cmd, abs(size - target_bytes) <= tolerance * target_bytes
    lo, hi = codec.quality_range
    best = None
    cache = {}

    def probe(q):
        if q not in cache:
            cache[q] = run_baseline(codec, src_dir, work_dir, q)
        return cache[q]

    for _ in range(max_iter):
        q = (lo + hi) // 2 if codec.integer_quality else 0.5 * (lo + hi)
        size, dec, cmd = probe(q)
        err = abs(size - target_bytes)
        if best is None or err < best[0]:
            best = (err, q, size, dec, cmd)
        if err <= tolerance * target_bytes:
            break
        too_big = size > target_bytes
        # move toward fewer bytes if too big
        if too_big != codec.larger_is_smaller:
            hi = q
        else:
            lo = q
        if codec.integer_quality and hi - lo <= 1:
            for edge in (lo, hi):
                size, dec, cmd = probe(edge)
                if abs(size - target_bytes) < best[0]:
                    best = (abs(size - target_bytes), edge, size, dec, cmd)
            break
    err, q, size, dec, cmd = best
    return q, size, dec, cmd, err <= tolerance * target_bytes


@dataclass
class ComparisonRow:
    codec: str
    quality: object
    compressed_bytes: int
    compression_ratio: float
    bpp: float
    psnr_db: float
    accuracy: float
    matched: bool
    command: str


COMPARISON_COLUMNS = ("codec", "quality", "compressed_bytes", "compression_ratio", "bpp", "psnr_db",
                      "accuracy", "matched", "command")


def comparison_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARISON_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, c)) if getattr(r, c) is not None else "" for c in COMPARISON_COLUMNS])
    return buf.getvalue()


def compare_codecs(dataset, codec, extractor, head, baselines, pairs=None, target_bytes=None, work_dir=None,
                   tolerance=0.02):
    """Table-style comparison of the learned codec against external baselines.

    Every baseline is tuned to the learned codec's total size (or
    ``target_bytes``).  Unavailable baselines are skipped.
    """
    images = dataset.images
    n, _, h, w = images.shape
    original = lossless_size(images)
    rows = []
    if codec is not None:
        rep = evaluate_pipeline(dataset, codec, extractor, head, "with_quant", pairs, original_bytes=original)
        rows.append(ComparisonRow("learned", None, rep.compressed_bytes, rep.compression_ratio, rep.bpp,
                                  rep.psnr_db, rep.accuracy, True, "in-process"))
        target_bytes = target_bytes or rep.compressed_bytes
    if target_bytes is None:
        raise ValueError("need a learned codec or an explicit target_bytes")
    own_tmp = work_dir is None
    work_dir = work_dir or tempfile.mkdtemp(prefix="taskcodec-compare-")
    try:
        src = os.path.join(work_dir, "source")
        os.makedirs(src, exist_ok=True)
        for i, img in zip(dataset.ids, nchw_to_hwc(to_uint8(images))):
            Image.fromarray(img).save(os.path.join(src, _stem(i) + ".png"))
        for base in baselines:
            if not base.available():
                continue
            q, size, dec, cmd, matched = match_quality(base, src, work_dir, target_bytes, tolerance)
            recon = _read_decoded(dec, dataset.ids)
            acc, _ = _accuracy(extractor, head, recon, dataset.labels, pairs, 10)
            rows.append(ComparisonRow(base.name, q, size, compression_ratio(original, size),
                                      bits_per_pixel(size, n * h * w), mean_psnr(images, recon), acc, matched, cmd))
    finally:
        if own_tmp:
            shutil.rmtree(work_dir, ignore_errors=True)
    return rows
