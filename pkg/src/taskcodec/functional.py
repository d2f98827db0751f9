"""Differentiable network operations built on :mod:`taskcodec.tensor`.

Convolutions are cross-correlations (no kernel flip) over NCHW arrays and
go through im2col + a single BLAS matmul.  The gather/scatter loops live in
:mod:`taskcodec._kernels`.
"""

import numpy as np

from . import _kernels
from .tensor import Tensor, as_tensor, make_node


def _out_extent(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation.

    Args:
        x: input of shape ``(N, Cin, H, W)``.
        weight: kernels of shape ``(Cout, Cin, kH, kW)``.
        bias: optional ``(Cout,)`` tensor.
        stride: step between windows, same for both axes.
        padding: zero padding added to every side.

    Returns:
        Tensor of shape ``(N, Cout, H', W')`` with
        ``H' = (H + 2*padding - kH) // stride + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} has {c} channels, "
            f"weight shape {weight.shape} expects {cin}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input of shape {x.shape} (padding {padding})")
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(w, kw, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _kernels.im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = wmat.T @ gmat
            dxp = _kernels.col2im(dcols, n, c, hp, wp, kh, kw, stride, ho, wo)
            gx = dxp[:, :, padding:padding + h, padding:padding + w]
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv2d")


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution, the adjoint of :func:`conv2d` w.r.t. its input.

    ``weight`` has shape ``(Cin, Cout, kH, kW)``.  The output extent is
    ``(H - 1)*stride - 2*padding + kH + output_padding``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cin, cout, kh, kw = weight.shape
    if cin != c:
        raise ValueError(
            f"conv_transpose2d channel mismatch: input shape {x.shape} has {c} channels, "
            f"weight shape {weight.shape} expects {cin}"
        )
    if not 0 <= output_padding < stride:
        raise ValueError(f"output_padding must satisfy 0 <= output_padding < stride, got {output_padding}")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv_transpose2d output extent {ho}x{wo} is not positive")
    hp, wp = ho + 2 * padding, wo + 2 * padding

    wmat = weight.data.reshape(cin, -1)
    xmat = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    cols = wmat.T @ xmat
    canvas = _kernels.col2im(cols, n, cout, hp, wp, kh, kw, stride, h, w)
    out = canvas[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward(g):
        gp = g
        if padding:
            gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        gcols = _kernels.im2col(np.ascontiguousarray(gp), kh, kw, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (wmat @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        if weight.requires_grad:
            gw = (xmat @ gcols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "conv_transpose2d")


def prelu(x, slope):
    """Parametric ReLU with per-channel (axis 1) or shared slope."""
    if slope.ndim != 1:
        raise ValueError(f"prelu slope must be 1-d, got shape {slope.shape}")
    channels = x.shape[1] if x.ndim > 1 else x.shape[0] if x.ndim == 1 else 1
    if slope.shape[0] not in (1, channels):
        raise ValueError(f"prelu slope length {slope.shape[0]} does not match channel extent {channels}")
    xd = x.data
    if xd.ndim == 0:
        xd = xd.reshape(1)
    out = _kernels.prelu_forward(xd, slope.data).reshape(x.shape)

    def backward(g):
        dx, da = _kernels.prelu_backward(xd, slope.data, np.asarray(g).reshape(xd.shape))
        return dx.reshape(x.shape), da.astype(slope.dtype, copy=False)

    return make_node(out, (x, slope), backward, "prelu")


def _generator(rng_seed):
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def dropout(x, rate, training, rng_seed=None):
    """Inverted dropout.

    In training mode each element is zeroed with probability ``rate`` and the
    survivors are scaled by ``1 / (1 - rate)``.  The mask depends only on
    ``rng_seed`` (an int, a sequence of ints or a ``numpy`` Generator whose
    state advances with every call).
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = _generator(rng_seed).random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale

    def backward(g):
        return (g * mask,)

    return make_node(x.data * mask, (x,), backward, "dropout")


def mse_loss(pred, target, reduction="mean"):
    """Squared error between ``pred`` and ``target``.

    ``reduction="mean"`` averages over every element.  ``reduction="batch"``
    sums over each sample and averages over the leading (batch) axis only,
    i.e. ``(1/N) * sum_n ||Y_n - X_n||^2``.
    """
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    if reduction == "mean":
        count = pred.size
    elif reduction == "batch":
        count = pred.shape[0] if pred.ndim else 1
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    diff = pred.data - target.data
    out = np.asarray(np.sum(diff * diff, dtype=np.float64) / count, dtype=pred.dtype)

    def backward(g):
        gd = (2.0 / count) * g * diff
        return gd, -gd

    return make_node(out, (pred, target), backward, "mse_loss")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` for ``x`` of shape ``(N, in)`` and weight ``(in, out)``."""
    out = x @ weight
    return out if bias is None else out + bias


def flatten(x):
    return x.reshape((x.shape[0], -1))


def l2_normalize(x, axis=1, eps=1e-12):
    """Scale slices along ``axis`` to unit Euclidean norm."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return make_node(y, (x,), backward, "l2_normalize")


def cross_entropy(logits, labels):
    """Softmax cross-entropy averaged over the batch, using max-subtraction."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (g * p / n,)

    return make_node(out, (logits,), backward, "cross_entropy")


def reflect_pad(images, pad_h, pad_w):
    """Reflect-pad an ``(N, C, H, W)`` array at the bottom/right edges."""
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    if pad_h == 0 and pad_w == 0:
        return data
    mode = "reflect" if pad_h < data.shape[2] and pad_w < data.shape[3] else "symmetric"
    return np.pad(data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode=mode)
