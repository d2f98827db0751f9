"""Training regimes: codec pretraining, classifier pretraining, joint tuning.

All three share one epoch loop: data are shuffled once per epoch with a
generator seeded by ``(seed, epoch)``, dropout masks are seeded by
``(seed, epoch, step)``, and parameters are updated by plain SGD with
optional momentum.  Given the same seed, loss curves are bit-identical, and
a run resumed from a saved training state reproduces the uninterrupted run.
"""

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import functional as F
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import SgdState, sgd_step
from .quantizer import train_bypass
from .recognizer import embed, lmcl_loss
from .tensor import Tensor, default_dtype

log = logging.getLogger(__name__)

REGIMES = ("codec_pretrain", "classifier_pretrain", "joint")
GROUPS = {
    "codec_pretrain": ("compnet", "recnet"),
    "classifier_pretrain": ("extractor", "head"),
    "joint": ("compnet", "recnet", "extractor", "head"),
}
CSV_COLUMNS = ("epoch", "step", "loss", "lr")


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


def parse_config_text(text):
    """JSON object or ``key=value`` lines to a plain mapping (no validation)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            return json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from None
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        if key == "freeze" and isinstance(parsed, str):
            parsed = [g.strip() for g in parsed.split(",") if g.strip()]
        mapping[key] = parsed
    return mapping


@dataclass
class TrainConfig:
    regime: str = "codec_pretrain"
    batch_size: int = 20
    epochs: int = 40
    lr: float = 1e-4
    lr_final: float = None
    lr_steps: tuple = ()
    momentum: float = 0.9
    seed: int = 0
    freeze: tuple = ()
    loss_reduction: str = "mean"

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        self.lr_steps = tuple(tuple(p) for p in self.lr_steps)
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        unknown = [g for g in self.freeze if g not in GROUPS[self.regime]]
        if unknown:
            raise ConfigError(f"freeze groups {unknown} do not exist in regime {self.regime!r}; "
                              f"choose from {GROUPS[self.regime]}")
        if self.loss_reduction not in ("mean", "batch"):
            raise ConfigError(f"loss_reduction must be 'mean' or 'batch', got {self.loss_reduction!r}")
        rates = [self.lr_at(e) for e in range(max(self.epochs, 1))]
        if any(r < 0 or not math.isfinite(r) for r in rates):
            raise ConfigError("learning rates must be finite and nonnegative")
        if any(b > a for a, b in zip(rates, rates[1:])):
            raise ConfigError("learning-rate schedule must be nonincreasing")

    def lr_at(self, epoch):
        """Learning rate used throughout ``epoch`` (0-based)."""
        if self.lr_steps:
            lr = self.lr
            for start, value in sorted(self.lr_steps):
                if epoch >= start:
                    lr = value
            return float(lr)
        if self.lr_final is not None and self.epochs > 1:
            if self.lr == 0:
                return 0.0
            frac = epoch / (self.epochs - 1)
            return float(self.lr * (self.lr_final / self.lr) ** frac)
        return float(self.lr)

    @classmethod
    def preset(cls, regime, **overrides):
        """Reference hyperparameters for ``regime``; keyword overrides win."""
        presets = {
            "codec_pretrain": dict(batch_size=20, epochs=40, lr=1e-4, momentum=0.0, loss_reduction="batch"),
            "classifier_pretrain": dict(batch_size=100, epochs=6, lr=0.1, lr_final=1e-7, momentum=0.0,
                                        freeze=("extractor",)),
            "joint": dict(batch_size=100, epochs=40, lr=0.01, lr_final=1e-5, momentum=0.0, freeze=("extractor",)),
        }
        if regime not in presets:
            raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
        params = dict(presets[regime], regime=regime)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**mapping)

    @classmethod
    def from_text(cls, text):
        """Parse JSON or ``key=value`` lines (values parsed as JSON when possible)."""
        return cls.from_mapping(parse_config_text(text))

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    sgd_state: SgdState = None
    epochs_done: int = 0

    def curve_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for epoch, step, loss, lr in self.curve:
            writer.writerow([epoch, step, repr(float(loss)), repr(float(lr))])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.curve_csv())


def parameter_hash(modules):
    """SHA-256 over every parameter of the given modules, in order."""
    h = hashlib.sha256()
    for group, module in modules.items():
        for name, p in module.named_parameters():
            h.update(f"{group}.{name}{p.shape}".encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _named_params(groups):
    return {f"{g}.{n}": p for g, m in groups.items() for n, p in m.named_parameters()}


def save_training_state(path, groups, sgd_state, epoch, extra=None):
    """Parameters, optimizer velocities and epoch counter in one checkpoint."""
    state = {name: p.data for name, p in _named_params(groups).items()}
    for name, v in sgd_state.velocity.items():
        state[f"opt/{name}"] = v
    state["meta/epoch"] = np.array([epoch], dtype=np.float32)
    if extra:
        state.update(extra)
    return save_checkpoint(state, path)


def load_training_state(path, groups, config):
    """Restore parameters into ``groups``; returns ``(SgdState, epoch)``."""
    state = load_checkpoint(path)
    params = _named_params(groups)
    for name, p in params.items():
        if name not in state:
            raise ConfigError(f"training state lacks parameter {name!r}")
        p.data = state[name].astype(p.dtype, copy=True)
    sgd = SgdState(config.lr, config.momentum)
    for key, value in state.items():
        if key.startswith("opt/"):
            sgd.velocity[key[4:]] = value.copy()
    return sgd, int(state["meta/epoch"][0])


def _assert_untouched(before, groups, frozen):
    after = parameter_hash({g: groups[g] for g in frozen})
    if after != before:
        raise AssertionError(f"frozen parameter groups {sorted(frozen)} changed during training")


def _assert_no_quantize(loss):
    if any(node.op == "quantize" for node in loss.graph()):
        raise AssertionError("quantize op found in a training graph")


def _run(config, groups, n_items, step_loss, *, start_epoch=0, until_epoch=None, sgd_state=None,
         after_step=None):
    """Shared epoch/batch loop.  ``step_loss(index, seed)`` returns a scalar loss."""
    frozen = [g for g in groups if g in config.freeze]
    trainable = {g: m for g, m in groups.items() if g not in config.freeze}
    for g in frozen:
        groups[g].set_trainable(False)
    for m in trainable.values():
        m.set_trainable(True)
    frozen_hash = parameter_hash({g: groups[g] for g in frozen})
    params = _named_params(trainable)
    sgd_state = sgd_state or SgdState(config.lr_at(start_epoch), config.momentum)
    result = TrainResult(sgd_state=sgd_state, epochs_done=start_epoch)
    stop = config.epochs if until_epoch is None else min(until_epoch, config.epochs)

    for epoch in range(start_epoch, stop):
        lr = config.lr_at(epoch)
        sgd_state.learning_rate = lr
        order = np.random.default_rng([config.seed, epoch]).permutation(n_items)
        losses = []
        for step, start in enumerate(range(0, n_items, config.batch_size)):
            index = order[start:start + config.batch_size]
            loss = step_loss(index, (config.seed, epoch, step))
            value = float(loss.item())
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {step}")
            _assert_no_quantize(loss)
            if params:
                loss.backward()
                sgd_step(params, sgd_state)
            if after_step is not None:
                after_step()
            losses.append(value)
            result.curve.append((epoch, step, value, lr))
        result.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        result.epochs_done = epoch + 1
        log.info("%s epoch %d/%d loss %.6g lr %.3g", config.regime, epoch + 1, config.epochs,
                 result.epoch_losses[-1], lr)

    _assert_untouched(frozen_hash, groups, frozen)
    return result


def pretrain_codec(dataset, codec, config, **kwargs):
    """Minimize reconstruction MSE through CompNet -> bypass -> RecNet."""
    if config.regime != "codec_pretrain":
        raise ConfigError(f"pretrain_codec needs regime 'codec_pretrain', got {config.regime!r}")
    patches = dataset.patches if hasattr(dataset, "patches") else np.asarray(dataset)
    dtype = default_dtype()

    def step_loss(index, seed):
        x = Tensor(patches[index], dtype=dtype)
        compact = train_bypass(codec.compnet(x, training=True, seed=seed))
        y = codec.recnet(compact, training=True, seed=seed)
        return F.mse_loss(y, x, config.loss_reduction)

    groups = {"compnet": codec.compnet, "recnet": codec.recnet}
    return _run(config, groups, len(patches), step_loss, **kwargs)


def _recognizer_run(dataset, extractor, head, config, **kwargs):
    dtype = default_dtype()
    groups = {"extractor": extractor, "head": head}
    if "extractor" in config.freeze:
        # frozen and dropout-free: embeddings are constant, compute them once
        features = embed(extractor, dataset.images)

        def step_loss(index, seed):
            return lmcl_loss(Tensor(features[index], dtype=dtype), dataset.labels[index], head)
    else:
        def step_loss(index, seed):
            return lmcl_loss(extractor(Tensor(dataset.images[index], dtype=dtype)), dataset.labels[index], head)

    after = head.normalize if "head" not in config.freeze else None
    return _run(config, groups, len(dataset), step_loss, after_step=after, **kwargs)


def pretrain_classifier(dataset, extractor, head, config, **kwargs):
    """Train only the LMCL head on top of a frozen feature extractor."""
    if config.regime != "classifier_pretrain":
        raise ConfigError(f"pretrain_classifier needs regime 'classifier_pretrain', got {config.regime!r}")
    if "extractor" not in config.freeze:
        raise ConfigError("classifier pretraining requires 'extractor' in the freeze set")
    return _recognizer_run(dataset, extractor, head, config, **kwargs)


def pretrain_recognizer(dataset, extractor, head, config, **kwargs):
    """Train extractor and head together on uncompressed faces.

    Stands in for importing an externally pre-trained face model.
    """
    if config.regime != "classifier_pretrain":
        raise ConfigError(f"pretrain_recognizer needs regime 'classifier_pretrain', got {config.regime!r}")
    return _recognizer_run(dataset, extractor, head, config, **kwargs)


def train_joint(dataset, codec, extractor, head, config, **kwargs):
    """Fine-tune the codec (and head) through the recognition loss only."""
    if config.regime != "joint":
        raise ConfigError(f"train_joint needs regime 'joint', got {config.regime!r}")
    components = {"codec": codec, "extractor": extractor, "head": head}
    absent = [name for name, value in components.items() if value is None]
    if absent:
        raise ConfigError(f"joint training needs pre-trained components; missing: {', '.join(absent)}")
    dtype = default_dtype()

    def step_loss(index, seed):
        x = Tensor(dataset.images[index], dtype=dtype)
        compact = train_bypass(codec.compnet(x, training=True, seed=seed))
        y = codec.recnet(compact, training=True, seed=seed)
        return lmcl_loss(extractor(y), dataset.labels[index], head)

    groups = {"compnet": codec.compnet, "recnet": codec.recnet, "extractor": extractor, "head": head}
    after = head.normalize if "head" not in config.freeze else None
    return _run(config, groups, len(dataset), step_loss, after_step=after, **kwargs)
