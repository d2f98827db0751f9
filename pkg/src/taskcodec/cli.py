"""Command-line interface: ``taskcodec <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numeric failure during training.
"""

import argparse
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import data, evaluation
from .checkpoint import CheckpointError
from .codec import Codec, CodecConfig
from .models import load_codec, load_recognizer, save_codec, save_recognizer
from .quantizer import ContainerError
from .recognizer import Recognizer, RecognizerConfig, dump_embeddings
from .trainer import (
    ConfigError,
    NumericError,
    TrainConfig,
    load_training_state,
    parse_config_text,
    pretrain_classifier,
    pretrain_codec,
    pretrain_recognizer,
    save_training_state,
    train_joint,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("taskcodec")


def _ints(text):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floats(text):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _train_config(args, regime, **forced):
    """Preset for ``regime``, then the config file, then CLI flags."""
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            overrides.update(parse_config_text(fh.read()))
        if overrides.pop("regime", regime) != regime:
            raise ConfigError(f"config file is for another regime; this command trains {regime!r}")
    for key in ("epochs", "batch_size", "lr", "lr_final", "momentum", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    overrides.update(forced)
    unknown = sorted(set(overrides) - {f.name for f in fields(TrainConfig)})
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return TrainConfig.preset(regime, **overrides)


def _write_curve(result, path):
    if path:
        result.write_csv(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_toy_data(args):
    if args.kind == "faces":
        names = data.write_face_corpus(args.out, args.identities, args.per_identity, args.height, args.width,
                                       args.seed, args.pairs)
    else:
        names = data.write_patch_corpus(args.out, args.images, args.size, args.seed)
    print(f"wrote {len(names)} images to {args.out}")


def cmd_train_codec(args):
    config = _train_config(args, "codec_pretrain")
    dataset = data.ingest_patches(args.data, args.patch_size, args.stride, _ints(args.rotations),
                                  _floats(args.scales), config.seed, args.max_patches)
    for warning in dataset.manifest["warnings"]:
        log.warning(warning)
    if len(dataset) == 0:
        raise ConfigError(f"no patches could be cut from {args.data}")
    codec = Codec(CodecConfig(args.base_channels, args.compact_channels, 3, args.dropout), seed=config.seed)
    groups = {"compnet": codec.compnet, "recnet": codec.recnet}
    kwargs = {}
    if args.resume:
        kwargs["sgd_state"], kwargs["start_epoch"] = load_training_state(args.resume, groups, config)
    if args.until_epoch is not None:
        kwargs["until_epoch"] = args.until_epoch
    result = pretrain_codec(dataset, codec, config, **kwargs)
    save_codec(codec, args.out)
    if args.state_out:
        save_training_state(args.state_out, groups, result.sgd_state, result.epochs_done)
    if args.manifest:
        with open(args.manifest, "w") as fh:
            fh.write(dataset.manifest_json())
    _write_curve(result, args.loss_csv)
    print(f"codec trained on {len(dataset)} patches; final epoch loss {result.epoch_losses[-1] if result.epoch_losses else float('nan'):.6g}")


def cmd_train_recognizer(args):
    faces = data.load_face_folder(args.data)
    if len(faces) == 0:
        raise ConfigError(f"no images in {args.data}")
    _, _, h, w = faces.images.shape
    if args.extractor:
        recognizer = load_recognizer(args.extractor)
        config = _train_config(args, "classifier_pretrain")
        if "extractor" not in config.freeze:
            raise ConfigError("classifier pretraining needs the extractor frozen")
        result = pretrain_classifier(faces, recognizer.extractor, recognizer.head, config)
    else:
        rc = RecognizerConfig(h, w, _ints(args.stage_channels), args.blocks_per_stage, args.embedding_dim,
                              faces.num_classes, args.scale, args.margin)
        config = _train_config(args, "classifier_pretrain", freeze=())
        recognizer = Recognizer(rc, seed=config.seed)
        result = pretrain_recognizer(faces, recognizer.extractor, recognizer.head, config)
    save_recognizer(recognizer, args.out)
    _write_curve(result, args.loss_csv)
    print(f"recognizer trained; final epoch loss {result.epoch_losses[-1] if result.epoch_losses else float('nan'):.6g}")


def cmd_train_joint(args):
    missing = [flag for flag, value in (("--codec", args.codec), ("--recognizer", args.recognizer)) if not value]
    if missing:
        raise ConfigError(f"joint training needs pre-trained checkpoints; missing {', '.join(missing)}")
    config = _train_config(args, "joint")
    if args.unfreeze_extractor:
        config = _train_config(args, "joint", freeze=tuple(g for g in config.freeze if g != "extractor"))
    faces = data.load_face_folder(args.data)
    codec = load_codec(args.codec)
    recognizer = load_recognizer(args.recognizer)
    result = train_joint(faces, codec, recognizer.extractor, recognizer.head, config)
    save_codec(codec, args.out_codec)
    if args.out_recognizer:
        save_recognizer(recognizer, args.out_recognizer)
    _write_curve(result, args.loss_csv)
    print(f"joint training done; final epoch loss {result.epoch_losses[-1] if result.epoch_losses else float('nan'):.6g}")


def cmd_compress(args):
    codec = load_codec(args.codec)
    names = data.list_images(args.src)
    if names:
        pixels = np.stack([data.read_image(os.path.join(args.src, n)) for n in names])
        images = data.to_unit_range(data.hwc_to_nchw(pixels))
    else:
        images = np.zeros((0, 3, 8, 8), np.float32)
    original = sum(os.path.getsize(os.path.join(args.src, n)) for n in names)
    result = evaluation.compress_dataset(images, names, codec, args.dst, original_bytes=original)
    if args.report:
        report = evaluation.EvalReport(
            dataset=os.path.basename(os.path.normpath(args.src)), codec="learned", mode="with_quant",
            n_images=len(names), original_bytes=result.original_bytes, compressed_bytes=result.compressed_bytes,
            compression_ratio=result.ratio, bpp=result.bpp, psnr_db=float("nan"), accuracy=float("nan"),
            metric="none", config_hash=codec.config.config_hash(),
        )
        evaluation.write_reports(args.report, [report])
    flag = " (ratio undefined: empty dataset)" if result.flagged else ""
    print(f"{len(names)} images -> {result.compressed_bytes} bytes, ratio {result.ratio:.3f}{flag}")


def cmd_decompress(args):
    codec = load_codec(args.codec)
    outputs = evaluation.decompress_dataset(args.src, codec, args.dst)
    print(f"reconstructed {len(outputs)} images into {args.dst}")


def _pairs_for(faces, path):
    index = {name: i for i, name in enumerate(faces.ids)}
    pairs = []
    for a, b, same in data.read_pairs(path):
        if a not in index or b not in index:
            raise ConfigError(f"pair references unknown image: {a if a not in index else b}")
        pairs.append((index[a], index[b], same))
    return pairs


def cmd_evaluate(args):
    faces = data.load_face_folder(args.data)
    recognizer = load_recognizer(args.recognizer)
    codec = load_codec(args.codec) if args.codec else None
    pairs = _pairs_for(faces, args.pairs) if args.pairs else None
    original = sum(os.path.getsize(os.path.join(args.data, n)) for n in faces.ids)
    modes = ("original", "with_quant", "without_quant") if args.mode == "all" else (args.mode,)
    if codec is None and any(m != "original" for m in modes):
        raise ConfigError("--codec is required for with_quant / without_quant evaluation")
    if args.embeddings:
        dump_embeddings(args.embeddings, recognizer.extractor, faces.images, faces.ids)
    name = os.path.basename(os.path.normpath(args.data))
    reports = [evaluation.evaluate_pipeline(faces, codec, recognizer.extractor, recognizer.head, mode, pairs,
                                            name, original, args.expected_hash)
               for mode in modes]
    if args.report:
        evaluation.write_reports(args.report, reports)
    sys.stdout.write(evaluation.reports_csv(reports))


def _parse_baseline(spec):
    if "=" not in spec or "::" not in spec:
        raise ConfigError(f"baseline must be NAME=ENCODE_TEMPLATE::DECODE_TEMPLATE, got {spec!r}")
    name, rest = spec.split("=", 1)
    enc, dec = rest.split("::", 1)
    return evaluation.BaselineCodec(name.strip(), enc.strip(), dec.strip())


def cmd_compare(args):
    faces = data.load_face_folder(args.data)
    recognizer = load_recognizer(args.recognizer)
    codec = load_codec(args.codec) if args.codec else None
    pairs = _pairs_for(faces, args.pairs) if args.pairs else None
    baselines = [_parse_baseline(s) for s in args.baseline]
    if args.default_baselines:
        baselines.extend(evaluation.default_baselines())
    skipped = [b.name for b in baselines if not b.available()]
    for name in skipped:
        log.warning("baseline %s unavailable; skipped", name)
    rows = evaluation.compare_codecs(faces, codec, recognizer.extractor, recognizer.head, baselines, pairs,
                                     args.target_bytes)
    text = evaluation.comparison_csv(rows)
    if args.report:
        with open(args.report, "w", newline="") as fh:
            fh.write(text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--config", help="key=value or JSON training config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-final", dest="lr_final", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--loss-csv", dest="loss_csv", help="write the loss curve (epoch, step, loss, lr)")


def build_parser():
    parser = argparse.ArgumentParser(prog="taskcodec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy-data", help="write a synthetic face or texture corpus")
    p.add_argument("--kind", choices=("faces", "patches"), default="faces")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identities", type=int, default=20)
    p.add_argument("--per-identity", dest="per_identity", type=int, default=50)
    p.add_argument("--height", type=int, default=112)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--pairs", type=int, default=600)
    p.add_argument("--images", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_toy_data)

    p = sub.add_parser("train-codec", help="pretrain CompNet/RecNet on image patches")
    p.add_argument("--data", required=True, help="directory of lossless images")
    p.add_argument("--out", required=True, help="codec checkpoint path")
    p.add_argument("--patch-size", dest="patch_size", type=int, default=32)
    p.add_argument("--stride", type=int)
    p.add_argument("--rotations", default="0,90,180,270")
    p.add_argument("--scales", default="1.0")
    p.add_argument("--max-patches", dest="max_patches", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int, default=64)
    p.add_argument("--compact-channels", dest="compact_channels", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--resume", help="training state to continue from")
    p.add_argument("--state-out", dest="state_out", help="write resumable training state")
    p.add_argument("--until-epoch", dest="until_epoch", type=int)
    p.add_argument("--manifest", help="write the patch manifest (JSON)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train-recognizer", help="train extractor+head, or only the head on a frozen extractor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extractor", help="recognizer checkpoint whose extractor is frozen (classifier pretraining)")
    p.add_argument("--stage-channels", dest="stage_channels", default="16,32,64,128")
    p.add_argument("--blocks-per-stage", dest="blocks_per_stage", type=int, default=1)
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int, default=128)
    p.add_argument("--scale", type=float, default=30.0)
    p.add_argument("--margin", type=float, default=0.35)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_recognizer)

    p = sub.add_parser("train-joint", help="fine-tune the codec through the recognition loss")
    p.add_argument("--data", required=True)
    p.add_argument("--codec")
    p.add_argument("--recognizer")
    p.add_argument("--out-codec", dest="out_codec", required=True)
    p.add_argument("--out-recognizer", dest="out_recognizer")
    p.add_argument("--unfreeze-extractor", dest="unfreeze_extractor", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("compress", help="encode a folder of images into containers")
    p.add_argument("--codec", required=True)
    p.add_argument("--report")
    p.add_argument("src")
    p.add_argument("dst")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="reconstruct a folder of containers to PNG")
    p.add_argument("--codec", required=True)
    p.add_argument("src")
    p.add_argument("dst")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("evaluate", help="accuracy/PSNR/size report with and without quantization")
    p.add_argument("--data", required=True)
    p.add_argument("--recognizer", required=True)
    p.add_argument("--codec")
    p.add_argument("--mode", choices=("with_quant", "without_quant", "original", "all"), default="all")
    p.add_argument("--pairs", help="pair list for verification accuracy (default: classification)")
    p.add_argument("--expected-hash", dest="expected_hash")
    p.add_argument("--embeddings", help="dump source-image embeddings (emb/<image id>) to this file")
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="compare against external codecs at matched size")
    p.add_argument("--data", required=True)
    p.add_argument("--recognizer", required=True)
    p.add_argument("--codec")
    p.add_argument("--pairs")
    p.add_argument("--baseline", action="append", default=[],
                   help="NAME=ENCODE_TEMPLATE::DECODE_TEMPLATE (templates use {src} {dst} {quality} {python})")
    p.add_argument("--default-baselines", dest="default_baselines", action="store_true")
    p.add_argument("--target-bytes", dest="target_bytes", type=int)
    p.add_argument("--report")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ContainerError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
