"""CompNet / RecNet convolutional autoencoder.

CompNet maps an ``(N, 3, H, W)`` image in [-1, 1] to a compact map of shape
``(N, C, H/8, W/8)``; RecNet mirrors it back to full resolution.  Both end
in ``tanh`` so their outputs always stay inside [-1, 1].
"""

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .nn import Conv2d, ConvTranspose2d, Module, PReLU
from .quantizer import train_bypass
from .tensor import Tensor, tanh


@dataclass(frozen=True)
class CodecConfig:
    base_channels: int = 64
    compact_channels: int = 3
    kernel_size: int = 3
    dropout_rate: float = 0.1
    num_scales: int = 3

    def __post_init__(self):
        if self.base_channels < 1 or self.compact_channels < 1 or self.num_scales < 1:
            raise ValueError(f"channel counts and num_scales must be positive: {self}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def factor(self):
        return 2**self.num_scales

    def as_vector(self):
        return np.array(
            [self.base_channels, self.compact_channels, self.kernel_size, self.dropout_rate, self.num_scales],
            dtype=np.float32,
        )

    @classmethod
    def from_vector(cls, vec):
        vec = np.asarray(vec, dtype=np.float32)
        return cls(
            base_channels=int(vec[0]),
            compact_channels=int(vec[1]),
            kernel_size=int(vec[2]),
            dropout_rate=round(float(vec[3]), 6),
            num_scales=int(vec[4]),
        )

    def config_hash(self):
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def pad_amounts(height, width, factor=8):
    """Bottom/right padding that makes both extents multiples of ``factor``."""
    return (-height) % factor, (-width) % factor


def _step_seed(seed, index):
    if seed is None:
        return None
    if isinstance(seed, np.random.Generator):
        return seed
    base = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return base + [index]


class ResidualBlock(Module):
    """conv -> PReLU -> dropout -> conv, identity skip, then PReLU."""

    def __init__(self, channels, kernel_size=3, dropout_rate=0.1, rng=None):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.dropout_rate = dropout_rate
        self.conv1 = Conv2d(channels, channels, kernel_size, 1, rng=rng)
        self.act1 = PReLU(channels)
        self.conv2 = Conv2d(channels, channels, kernel_size, 1, rng=rng)
        self.act2 = PReLU(channels)
        self._dropout_rng = np.random.default_rng(int(rng.integers(2**31)))

    def forward(self, x, training=False, rng_seed=None):
        if x.shape[1] != self.channels:
            raise ValueError(f"residual block expects {self.channels} channels, got input shape {x.shape}")
        h = self.act1(self.conv1(x))
        h = F.dropout(h, self.dropout_rate, training, self._dropout_rng if rng_seed is None else rng_seed)
        return self.act2(x + self.conv2(h))


class CompNet(Module):
    """Five convolutions; the middle ``num_scales`` ones downsample by 2."""

    def __init__(self, config=CodecConfig(), rng=None):
        rng = rng or np.random.default_rng(0)
        self._config = config
        ch, k = config.base_channels, config.kernel_size
        self.head = Conv2d(3, ch, k, 1, rng=rng)
        self.head_act = PReLU(ch)
        self.down = [Conv2d(ch, ch, k, 2, rng=rng) for _ in range(config.num_scales)]
        self.down_act = [PReLU(ch) for _ in range(config.num_scales)]
        self.blocks = [ResidualBlock(ch, k, config.dropout_rate, rng) for _ in range(config.num_scales - 1)]
        self.tail = Conv2d(ch, config.compact_channels, k, 1, rng=rng)

    @property
    def config(self):
        return self._config

    def forward(self, image, training=False, seed=None, pad=False):
        """Encode ``image`` into a compact map in [-1, 1].

        With ``pad=True`` extents that are not multiples of ``2**num_scales``
        are reflect-padded at the bottom/right; otherwise they are rejected.
        """
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"CompNet expects (N, 3, H, W) input, got {image.shape}")
        factor = self._config.factor
        ph, pw = pad_amounts(image.shape[2], image.shape[3], factor)
        if ph or pw:
            if not pad:
                raise ValueError(
                    f"image extent {image.shape[2]}x{image.shape[3]} is not divisible by {factor}; "
                    f"pad bottom by {ph} and right by {pw} (or pass pad=True)"
                )
            image = Tensor(F.reflect_pad(image, ph, pw), dtype=image.dtype)
        h = self.head_act(self.head(image))
        for i, (conv, act) in enumerate(zip(self.down, self.down_act)):
            h = act(conv(h))
            if i < len(self.blocks):
                h = self.blocks[i](h, training, _step_seed(seed, i))
        return tanh(self.tail(h))


class RecNet(Module):
    """Mirror of CompNet with transposed convolutions for upsampling."""

    def __init__(self, config=CodecConfig(), rng=None):
        rng = rng or np.random.default_rng(1)
        self._config = config
        ch, k = config.base_channels, config.kernel_size
        self.head = Conv2d(config.compact_channels, ch, k, 1, rng=rng)
        self.head_act = PReLU(ch)
        self.up = [ConvTranspose2d(ch, ch, k, 2, rng=rng) for _ in range(config.num_scales)]
        self.up_act = [PReLU(ch) for _ in range(config.num_scales)]
        self.blocks = [ResidualBlock(ch, k, config.dropout_rate, rng) for _ in range(config.num_scales - 1)]
        self.tail = Conv2d(ch, 3, k, 1, rng=rng)

    @property
    def config(self):
        return self._config

    def forward(self, compact, training=False, seed=None):
        if compact.ndim != 4 or compact.shape[1] != self._config.compact_channels:
            raise ValueError(
                f"RecNet expects (N, {self._config.compact_channels}, h, w) input, got {compact.shape}"
            )
        h = self.head_act(self.head(compact))
        for i, (conv, act) in enumerate(zip(self.up, self.up_act)):
            h = act(conv(h))
            if i < len(self.blocks):
                h = self.blocks[i](h, training, _step_seed(seed, 100 + i))
        return tanh(self.tail(h))


class Codec(Module):
    """CompNet and RecNet trained together, plus their shared config."""

    def __init__(self, config=CodecConfig(), seed=0):
        self._config = config
        rng = np.random.default_rng(seed)
        self.compnet = CompNet(config, rng)
        self.recnet = RecNet(config, rng)

    @property
    def config(self):
        return self._config

    def forward(self, image, training=False, seed=None, bypass=None):
        compact = self.compnet(image, training, seed)
        compact = (bypass or train_bypass)(compact)
        return self.recnet(compact, training, seed)
