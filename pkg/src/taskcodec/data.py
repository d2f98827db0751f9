"""Datasets: synthetic toy corpora, patch ingestion, labeled face folders.

Nothing here downloads anything.  ``render_face`` draws a parametric cartoon
face whose geometry and colors are fixed per identity and jittered per
image, which is enough structure for the recognizer to learn identities and
for the codec to have something to destroy.
"""

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

LOSSLESS_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm")
LOSSY_SUFFIXES = (".jpg", ".jpeg", ".webp", ".jp2", ".j2k")


def to_unit_range(pixels):
    """uint8 ``(..., H, W, 3)`` or ``(N, 3, H, W)`` values -> float32 in [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def to_uint8(values):
    """Inverse of :func:`to_unit_range` with rounding and clipping."""
    v = (np.asarray(values, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def hwc_to_nchw(images):
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2))


def nchw_to_hwc(images):
    return np.ascontiguousarray(np.asarray(images).transpose(0, 2, 3, 1))


# ---------------------------------------------------------------------------
# synthetic faces
# ---------------------------------------------------------------------------


def identity_params(rng):
    """Random per-identity face geometry and palette."""
    return {
        "face_ax": rng.uniform(0.30, 0.42),
        "face_ay": rng.uniform(0.36, 0.46),
        "skin": rng.uniform(80, 235, size=3),
        "hair": rng.uniform(10, 200, size=3),
        "hairline": rng.uniform(0.12, 0.36),
        "eye_y": rng.uniform(-0.12, 0.02),
        "eye_dx": rng.uniform(0.10, 0.22),
        "eye_r": rng.uniform(0.035, 0.075),
        "iris": rng.uniform(0, 160, size=3),
        "brow": rng.uniform(0.01, 0.04),
        "nose_len": rng.uniform(0.06, 0.20),
        "nose_w": rng.uniform(0.02, 0.06),
        "mouth_y": rng.uniform(0.18, 0.30),
        "mouth_w": rng.uniform(0.08, 0.22),
        "mouth_h": rng.uniform(0.015, 0.05),
        "lips": rng.uniform(60, 220, size=3),
        "background": rng.uniform(0, 255, size=3),
    }


def render_face(params, height=112, width=96, rng=None, jitter=1.0):
    """Draw one ``(height, width, 3)`` uint8 face image."""
    rng = rng or np.random.default_rng(0)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    scale = 1.0 + jitter * rng.uniform(-0.06, 0.06)
    cy = 0.5 + jitter * rng.uniform(-0.04, 0.04)
    cx = 0.5 + jitter * rng.uniform(-0.04, 0.04)
    # face-relative coordinates: unit = image height
    u = (xx / height - cx * width / height) / scale
    v = (yy / height - cy) / scale

    img = np.empty((height, width, 3))
    img[:] = params["background"]
    gradient = (yy / height - 0.5)[..., None] * rng.uniform(-40, 40, size=3) * jitter
    img += gradient

    def paint(mask, color):
        img[mask] = color

    face = (u / params["face_ax"]) ** 2 + (v / params["face_ay"]) ** 2 <= 1
    paint(face, params["skin"])
    hair = face & (v < -params["face_ay"] + params["hairline"])
    paint(hair, params["hair"])
    for side in (-1, 1):
        ex = side * params["eye_dx"]
        eye = (u - ex) ** 2 + (v - params["eye_y"]) ** 2 <= params["eye_r"] ** 2
        paint(eye, (245, 245, 245))
        iris = (u - ex) ** 2 + (v - params["eye_y"]) ** 2 <= (0.55 * params["eye_r"]) ** 2
        paint(iris, params["iris"])
        brow_y = params["eye_y"] - 1.6 * params["eye_r"]
        brow = (np.abs(u - ex) <= 1.3 * params["eye_r"]) & (np.abs(v - brow_y) <= params["brow"])
        paint(brow, params["hair"])
    nose_top = params["eye_y"] + 0.02
    nose = (np.abs(u) <= params["nose_w"] * (v - nose_top) / params["nose_len"]) & (v >= nose_top) & (
        v <= nose_top + params["nose_len"]
    )
    paint(nose, 0.8 * params["skin"])
    mouth = ((u / params["mouth_w"]) ** 2 + ((v - params["mouth_y"]) / params["mouth_h"]) ** 2) <= 1
    paint(mouth, params["lips"])

    light = 1.0 + jitter * rng.uniform(-0.15, 0.15)
    img = img * light + jitter * rng.normal(0, 4.0, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


@dataclass
class LabeledFaceDataset:
    """Images in [-1, 1] as ``(N, 3, H, W)`` float32 plus dense integer labels."""

    images: np.ndarray
    labels: np.ndarray
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size:
            present = np.unique(self.labels)
            if present[0] != 0 or present[-1] != len(present) - 1:
                raise ValueError("labels must be dense in [0, K)")
        if not self.ids:
            self.ids = [f"img{i:05d}" for i in range(len(self.labels))]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self):
        return len(self.labels)

    def subset(self, index):
        index = np.asarray(index)
        return LabeledFaceDataset(self.images[index], self.labels[index], [self.ids[i] for i in index])


def make_face_pixels(n_identities, per_identity, height=112, width=96, seed=0):
    """Render ``n_identities * per_identity`` faces; returns (uint8 NHWC, labels)."""
    rng = np.random.default_rng(seed)
    params = [identity_params(rng) for _ in range(n_identities)]
    pixels = np.empty((n_identities * per_identity, height, width, 3), dtype=np.uint8)
    labels = np.repeat(np.arange(n_identities), per_identity)
    for k, p in enumerate(params):
        for i in range(per_identity):
            img_rng = np.random.default_rng([seed, k, i])
            pixels[k * per_identity + i] = render_face(p, height, width, img_rng)
    return pixels, labels


def make_face_dataset(n_identities=20, per_identity=50, height=112, width=96, seed=0):
    pixels, labels = make_face_pixels(n_identities, per_identity, height, width, seed)
    ids = [f"id{lab:03d}_{i % per_identity:03d}" for i, lab in enumerate(labels)]
    return LabeledFaceDataset(to_unit_range(hwc_to_nchw(pixels)), labels, ids)


def split_per_identity(dataset, test_per_identity, seed=0):
    """Hold out ``test_per_identity`` images of every identity."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        idx = idx[rng.permutation(len(idx))]
        test.extend(sorted(idx[:test_per_identity]))
        train.extend(sorted(idx[test_per_identity:]))
    return dataset.subset(train), dataset.subset(test)


def make_pairs(labels, n_pairs, seed=0):
    """Balanced same/different index pairs ``[(i, j, same), ...]``."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    by_class = {k: np.flatnonzero(labels == k) for k in np.unique(labels)}
    usable = [k for k, v in by_class.items() if len(v) >= 2]
    if not usable:
        raise ValueError("need at least one identity with two images to form pairs")
    pairs = []
    for n in range(n_pairs):
        if n % 2 == 0:
            k = usable[rng.integers(len(usable))]
            i, j = rng.choice(by_class[k], size=2, replace=False)
            pairs.append((int(i), int(j), 1))
        else:
            while True:
                i, j = rng.integers(len(labels), size=2)
                if labels[i] != labels[j]:
                    break
            pairs.append((int(i), int(j), 0))
    return pairs


def write_face_corpus(out_dir, n_identities=20, per_identity=50, height=112, width=96, seed=0, n_pairs=600):
    """Write faces as PNG plus ``labels.csv`` and ``pairs.txt``; returns file names."""
    os.makedirs(out_dir, exist_ok=True)
    pixels, labels = make_face_pixels(n_identities, per_identity, height, width, seed)
    names = []
    for i, (img, lab) in enumerate(zip(pixels, labels)):
        name = f"id{lab:03d}_{i % per_identity:03d}.png"
        Image.fromarray(img).save(os.path.join(out_dir, name))
        names.append(name)
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "label"])
        writer.writerows(zip(names, labels.tolist()))
    if n_pairs:
        write_pairs(
            os.path.join(out_dir, "pairs.txt"),
            [(names[i], names[j], s) for i, j, s in make_pairs(labels, n_pairs, seed)],
        )
    return names


def write_pairs(path, pairs):
    with open(path, "w") as fh:
        for a, b, same in pairs:
            fh.write(f"{a} {b} {int(same)}\n")


def read_pairs(path):
    """Parse a ``pathA pathB 0|1`` pair list."""
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected 'pathA pathB 0|1', got {line!r}")
            pairs.append((parts[0], parts[1], int(parts[2])))
    return pairs


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def list_images(directory):
    return sorted(
        f for f in os.listdir(directory) if f.lower().endswith(LOSSLESS_SUFFIXES + LOSSY_SUFFIXES)
    )


def load_face_folder(directory):
    """Load a folder written by :func:`write_face_corpus` (labels optional)."""
    label_path = os.path.join(directory, "labels.csv")
    if os.path.exists(label_path):
        with open(label_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        names = [r["file"] for r in rows]
        labels = [int(r["label"]) for r in rows]
    else:
        names = list_images(directory)
        labels = [0] * len(names)
    pixels = np.stack([read_image(os.path.join(directory, n)) for n in names]) if names else np.zeros((0, 8, 8, 3), np.uint8)
    return LabeledFaceDataset(to_unit_range(hwc_to_nchw(pixels)), labels, names)


# ---------------------------------------------------------------------------
# patch corpus
# ---------------------------------------------------------------------------


def render_texture(size, rng):
    """Smooth synthetic natural-ish image: gradients, blobs, edges, stripes."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3))
    img[:] = rng.uniform(40, 215, size=3)
    img += (xx / w - 0.5)[..., None] * rng.uniform(-80, 80, size=3)
    img += (yy / h - 0.5)[..., None] * rng.uniform(-80, 80, size=3)
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.08, 0.35) * min(h, w)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += blob[..., None] * rng.uniform(-90, 90, size=3)
    angle = rng.uniform(0, np.pi)
    edge = (np.cos(angle) * (xx - w / 2) + np.sin(angle) * (yy - h / 2)) > rng.uniform(-w / 3, w / 3)
    img[edge] += rng.uniform(-50, 50, size=3)
    period = rng.uniform(6, 20)
    img += np.sin(2 * np.pi * (xx * np.cos(angle) - yy * np.sin(angle)) / period)[..., None] * rng.uniform(0, 20)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def write_patch_corpus(out_dir, n_images=16, size=64, seed=0):
    """Write ``n_images`` lossless texture images for codec pretraining."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(n_images):
        img = render_texture((size, size), np.random.default_rng([seed, i]))
        name = f"tex{i:04d}.png"
        Image.fromarray(img).save(os.path.join(out_dir, name))
        names.append(name)
    return names


@dataclass
class PatchDataset:
    """Equal-shape ``(N, 3, p, p)`` patches in [-1, 1] plus their provenance."""

    patches: np.ndarray
    manifest: dict

    def __len__(self):
        return len(self.patches)

    def manifest_json(self):
        return json.dumps(self.manifest, sort_keys=True, indent=1)


def _rescale(img, factor):
    if factor == 1:
        return img
    h, w = img.shape[:2]
    size = (max(1, int(round(w * factor))), max(1, int(round(h * factor))))
    return np.asarray(Image.fromarray(img).resize(size, Image.BICUBIC))


def ingest_patches(image_dir, patch_size=32, stride=None, rotations=(0,), scales=(1.0,), seed=0, max_patches=None):
    """Cut every image in ``image_dir`` into patches with rotation/scale augmentation.

    Rotations are multiples of 90 degrees.  Patches come out in a
    seed-determined order; ``max_patches`` keeps a prefix of that order.
    """
    stride = stride or patch_size
    for r in rotations:
        if r % 90:
            raise ValueError(f"rotations must be multiples of 90 degrees, got {r}")
    entries, patches, warnings = [], [], []
    skipped = 0
    for name in list_images(image_dir):
        path = os.path.join(image_dir, name)
        if name.lower().endswith(LOSSY_SUFFIXES):
            warnings.append(f"{name}: lossy source format; compression artifacts will leak into training")
        try:
            img = read_image(path)
        except Exception as exc:  # unreadable files are counted, not fatal
            log.warning("skipping unreadable image %s: %s", path, exc)
            skipped += 1
            continue
        for scale in scales:
            scaled = _rescale(img, scale)
            for rot in rotations:
                view = np.rot90(scaled, k=(rot // 90) % 4)
                h, w = view.shape[:2]
                for y in range(0, h - patch_size + 1, stride):
                    for x in range(0, w - patch_size + 1, stride):
                        patches.append(view[y:y + patch_size, x:x + patch_size])
                        entries.append([name, int(rot), float(scale), y, x])
    order = np.random.default_rng(seed).permutation(len(patches))
    if max_patches is not None:
        order = order[:max_patches]
    if patches:
        stack = np.stack([patches[i] for i in order])
    else:
        stack = np.zeros((0, patch_size, patch_size, 3), np.uint8)
    manifest = {
        "source": os.path.abspath(image_dir),
        "patch_size": patch_size,
        "stride": stride,
        "rotations": list(rotations),
        "scales": [float(s) for s in scales],
        "seed": seed,
        "patches": [entries[i] for i in order],
        "warnings": warnings,
        "skipped": skipped,
    }
    return PatchDataset(to_unit_range(hwc_to_nchw(stack)), manifest)
