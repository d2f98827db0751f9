"""Directory-level JPEG / JPEG2000 encoder and decoder built on Pillow.

Meant to be run as a subprocess by the comparison harness::

    python -m taskcodec.baseline encode --format jpeg --quality 30 SRC DST
    python -m taskcodec.baseline decode SRC DST
"""

import argparse
import os
import sys

from PIL import Image

SUFFIX = {"jpeg": ".jpg", "jpeg2000": ".jp2"}


def encode_dir(fmt, quality, src, dst):
    os.makedirs(dst, exist_ok=True)
    for name in sorted(os.listdir(src)):
        if not name.lower().endswith(".png"):
            continue
        stem = os.path.splitext(name)[0]
        with Image.open(os.path.join(src, name)) as im:
            im = im.convert("RGB")
            out = os.path.join(dst, stem + SUFFIX[fmt])
            if fmt == "jpeg":
                im.save(out, format="JPEG", quality=int(quality))
            else:
                # quality is the target compression ratio
                im.save(out, format="JPEG2000", quality_mode="rates", quality_layers=[float(quality)])


def decode_dir(src, dst):
    os.makedirs(dst, exist_ok=True)
    for name in sorted(os.listdir(src)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in (".jpg", ".jp2"):
            continue
        with Image.open(os.path.join(src, name)) as im:
            im.convert("RGB").save(os.path.join(dst, stem + ".png"))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="python -m taskcodec.baseline")
    sub = parser.add_subparsers(dest="action", required=True)
    enc = sub.add_parser("encode")
    enc.add_argument("--format", choices=sorted(SUFFIX), default="jpeg")
    enc.add_argument("--quality", type=float, required=True)
    enc.add_argument("src")
    enc.add_argument("dst")
    dec = sub.add_parser("decode")
    dec.add_argument("src")
    dec.add_argument("dst")
    args = parser.parse_args(argv)
    if args.action == "encode":
        encode_dir(args.format, args.quality, args.src, args.dst)
    else:
        decode_dir(args.src, args.dst)
    return 0


if __name__ == "__main__":
    sys.exit(main())
