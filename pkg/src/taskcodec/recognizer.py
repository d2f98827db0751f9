"""Face feature extractor, large-margin cosine head and pair verification."""

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .checkpoint import save_checkpoint
from .codec import ResidualBlock
from .nn import Conv2d, Linear, Module, Parameter, PReLU
from .tensor import Tensor, default_dtype, no_grad


@dataclass(frozen=True)
class RecognizerConfig:
    input_height: int = 112
    input_width: int = 96
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    embedding_dim: int = 128
    num_classes: int = 10
    scale: float = 30.0
    margin: float = 0.35

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.scale <= 0 or self.margin < 0:
            raise ValueError(f"need scale > 0 and margin >= 0, got s={self.scale}, m={self.margin}")
        if self.num_classes < 1 or self.embedding_dim < 1 or not self.stage_channels:
            raise ValueError(f"invalid recognizer config {self}")

    def as_vector(self):
        return np.array(
            [self.input_height, self.input_width, self.blocks_per_stage, self.embedding_dim,
             self.num_classes, self.scale, self.margin, *self.stage_channels],
            dtype=np.float32,
        )

    @classmethod
    def from_vector(cls, vec):
        v = [float(x) for x in np.asarray(vec, dtype=np.float32)]
        return cls(
            input_height=int(v[0]), input_width=int(v[1]), blocks_per_stage=int(v[2]),
            embedding_dim=int(v[3]), num_classes=int(v[4]), scale=round(v[5], 6),
            margin=round(v[6], 6), stage_channels=tuple(int(c) for c in v[7:]),
        )


def _halved(n, times):
    for _ in range(times):
        n = (n + 1) // 2
    return n


class FeatureExtractor(Module):
    """Strided residual CNN followed by a linear embedding layer."""

    def __init__(self, config=RecognizerConfig(), seed=0):
        rng = np.random.default_rng(seed)
        self._config = config
        stages, prev = [], 3
        for ch in config.stage_channels:
            stage = _Stage(prev, ch, config.blocks_per_stage, rng)
            stages.append(stage)
            prev = ch
        self.stages = stages
        n = len(config.stage_channels)
        flat = prev * _halved(config.input_height, n) * _halved(config.input_width, n)
        self.embed = Linear(flat, config.embedding_dim, rng)

    @property
    def config(self):
        return self._config

    def forward(self, images):
        cfg = self._config
        if images.ndim != 4 or images.shape[1:] != (3, cfg.input_height, cfg.input_width):
            raise ValueError(
                f"extractor expects (N, 3, {cfg.input_height}, {cfg.input_width}) input, got {images.shape}"
            )
        h = images
        for stage in self.stages:
            h = stage(h)
        return self.embed(F.flatten(h))


class _Stage(Module):
    def __init__(self, cin, cout, n_blocks, rng):
        self.down = Conv2d(cin, cout, 3, 2, rng=rng)
        self.act = PReLU(cout)
        self.blocks = [ResidualBlock(cout, 3, 0.0, rng) for _ in range(n_blocks)]

    def forward(self, x):
        h = self.act(self.down(x))
        for block in self.blocks:
            h = block(h)
        return h


class LmclHead(Module):
    """Class weight matrix ``(D, K)`` with unit-norm columns."""

    def __init__(self, embedding_dim, num_classes, scale=30.0, margin=0.35, seed=0):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((embedding_dim, num_classes))
        self.scale = scale
        self.margin = margin
        self.weight = Parameter(w / np.linalg.norm(w, axis=0, keepdims=True))

    def normalize(self):
        w = self.weight.data.astype(np.float64)
        self.weight.data = (w / np.linalg.norm(w, axis=0, keepdims=True)).astype(self.weight.dtype)

    def cosines(self, embeddings):
        return F.l2_normalize(embeddings, axis=1) @ F.l2_normalize(self.weight, axis=0)

    def predict(self, embeddings):
        emb = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
        with no_grad():
            return np.argmax(self.cosines(emb).data, axis=1)


def lmcl_loss(embeddings, labels, head, scale=None, margin=None):
    """Large margin cosine loss.

    ``-mean_i log softmax(s * (cos_ij - m * [j == y_i]))[y_i]`` where the
    cosines are taken between L2-normalized embeddings and class columns.
    """
    s = head.scale if scale is None else scale
    m = head.margin if margin is None else margin
    labels = np.asarray(labels, dtype=np.int64)
    k = head.weight.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    cos = head.cosines(embeddings)
    onehot = np.zeros(cos.shape, dtype=cos.dtype)
    onehot[np.arange(len(labels)), labels] = m
    logits = (cos - onehot) * s
    return F.cross_entropy(logits, labels)


class Recognizer(Module):
    """Extractor and head saved/loaded as one unit."""

    def __init__(self, config=RecognizerConfig(), seed=0):
        self._config = config
        self.extractor = FeatureExtractor(config, seed)
        self.head = LmclHead(config.embedding_dim, config.num_classes, config.scale, config.margin, seed + 1)

    @property
    def config(self):
        return self._config


def embed(extractor, images, batch_size=64):
    """Inference-mode embeddings for an ``(N, 3, H, W)`` array."""
    images = images.data if isinstance(images, Tensor) else np.asarray(images)
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(extractor(Tensor(images[start:start + batch_size], dtype=default_dtype())).data)
    if not out:
        return np.zeros((0, extractor.config.embedding_dim), dtype=default_dtype())
    return np.concatenate(out)


def dump_embeddings(path, extractor, images, ids, batch_size=64):
    """Write embeddings as a checkpoint with one ``emb/<id>`` tensor per image."""
    emb = embed(extractor, images, batch_size)
    save_checkpoint({f"emb/{i}": e for i, e in zip(ids, emb)}, path)
    return emb


def classification_accuracy(extractor, head, images, labels, batch_size=64):
    if len(labels) == 0:
        return float("nan")
    pred = head.predict(embed(extractor, images, batch_size))
    return float(np.mean(pred == np.asarray(labels)))


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = np.sum(a * b, axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return num / np.maximum(den, 1e-12)


def select_threshold(similarities, same):
    """Threshold maximizing accuracy of ``similarity >= t`` on the given pairs."""
    sims = np.asarray(similarities, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    order = np.argsort(sims, kind="stable")
    s, y = sims[order], same[order]
    n = len(s)
    # predicting "same" for sorted positions >= k: correct = negatives below k + positives from k
    neg_below = np.concatenate([[0], np.cumsum(~y)])
    pos_from = np.concatenate([np.cumsum(y[::-1])[::-1], [0]])
    correct = neg_below + pos_from
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = s[1:] > s[:-1]
    k = int(np.argmax(np.where(valid, correct, -1)))
    if k == 0:
        return s[0] - 1.0 if n else 0.0
    if k == n:
        return s[-1] + 1.0
    return 0.5 * (s[k - 1] + s[k])


@dataclass
class VerificationReport:
    accuracy: float
    std: float
    fold_accuracies: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    n_pairs: int = 0
    fallback: bool = False

    def as_dict(self):
        return asdict(self)


def kfold_accuracy(similarities, same, n_folds=10, selector=select_threshold):
    """Standard k-fold verification protocol.

    For each fold the threshold is chosen by ``selector`` on the other folds
    only and scored on the held-out fold.  With fewer pairs than folds a
    single threshold fit on all pairs is used and ``fallback`` is set.
    """
    sims = np.asarray(similarities, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    n = len(sims)
    if n == 0:
        raise ValueError("verification needs at least one pair")
    if n < n_folds:
        warnings.warn(f"only {n} pairs; using a single threshold instead of {n_folds}-fold protocol")
        t = selector(sims, same)
        acc = float(np.mean((sims >= t) == same))
        return VerificationReport(acc, 0.0, [acc], [float(t)], n, True)
    folds = np.array_split(np.arange(n), n_folds)
    accs, thresholds = [], []
    for held in folds:
        train = np.setdiff1d(np.arange(n), held)
        t = selector(sims[train], same[train])
        accs.append(float(np.mean((sims[held] >= t) == same[held])))
        thresholds.append(float(t))
    return VerificationReport(float(np.mean(accs)), float(np.std(accs)), accs, thresholds, n, False)


def verify(pairs, extractor, images, n_folds=10, batch_size=64):
    """Verification accuracy for ``(index_a, index_b, same)`` pairs over ``images``."""
    if not pairs:
        raise ValueError("verification needs a nonempty pair list")
    emb = embed(extractor, images, batch_size)
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    same = np.array([bool(p[2]) for p in pairs])
    return kfold_accuracy(cosine_similarity(emb[a], emb[b]), same, n_folds)
