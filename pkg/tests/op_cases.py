"""Random instances of every differentiable op, for gradient checking.

Each builder takes a Generator and returns ``(fn, arrays)`` where ``fn``
maps tensors to a tensor.  Shapes are drawn per seed.
"""

import numpy as np

from taskcodec import functional as F
from taskcodec import tensor as T
from taskcodec.quantizer import train_bypass
from taskcodec.recognizer import LmclHead, lmcl_loss


def _shape(rng, ndim=2, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def add(rng):
    s = _shape(rng)
    return (lambda a, b: a + b), [rng.standard_normal(s), rng.standard_normal(s[1:])]


def sub(rng):
    s = _shape(rng)
    return (lambda a, b: a - b), [rng.standard_normal(s), rng.standard_normal((s[0], 1))]


def mul(rng):
    s = _shape(rng, 3)
    return (lambda a, b: a * b), [rng.standard_normal(s), rng.standard_normal(s)]


def div(rng):
    s = _shape(rng)
    return (lambda a, b: a / b), [rng.standard_normal(s), rng.uniform(0.5, 2.0, s) * rng.choice([-1, 1], s)]


def neg(rng):
    return (lambda a: -a), [rng.standard_normal(_shape(rng))]


def matmul(rng):
    n, k, m = _shape(rng, 3)
    return (lambda a, b: a @ b), [rng.standard_normal((n, k)), rng.standard_normal((k, m))]


def tsum(rng):
    s = _shape(rng, 3)
    axis = int(rng.integers(0, 3))
    return (lambda a: T.tsum(a, axis=axis, keepdims=bool(axis % 2))), [rng.standard_normal(s)]


def mean(rng):
    s = _shape(rng, 3)
    return (lambda a: T.mean(a, axis=(0, 2))), [rng.standard_normal(s)]


def reshape(rng):
    a, b, c = _shape(rng, 3)
    return (lambda x: x.reshape((c, a * b))), [rng.standard_normal((a, b, c))]


def transpose(rng):
    return (lambda x: x.T), [rng.standard_normal(_shape(rng))]


def tanh(rng):
    return T.tanh, [rng.standard_normal(_shape(rng, 3))]


def exp(rng):
    return T.exp, [rng.uniform(-2, 2, _shape(rng, 3))]


def log(rng):
    return T.log, [rng.uniform(0.5, 3, _shape(rng, 3))]


def square(rng):
    return T.square, [rng.standard_normal(_shape(rng, 3))]


def conv2d(rng):
    n, cin, cout = _shape(rng, 3, 1, 3)
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, k))
    h, w = _shape(rng, 2, k, k + 4)
    return (lambda x, wt, b: F.conv2d(x, wt, b, stride, padding)), [
        rng.standard_normal((n, cin, h, w)),
        rng.standard_normal((cout, cin, k, k)),
        rng.standard_normal(cout),
    ]


def conv_transpose2d(rng):
    n, cin, cout = _shape(rng, 3, 1, 3)
    k = int(rng.choice([2, 3]))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, k // 2 + 1))
    out_pad = int(rng.integers(0, stride))
    h, w = _shape(rng, 2, 2, 4)
    return (lambda x, wt, b: F.conv_transpose2d(x, wt, b, stride, padding, out_pad)), [
        rng.standard_normal((n, cin, h, w)),
        rng.standard_normal((cin, cout, k, k)),
        rng.standard_normal(cout),
    ]


def prelu(rng):
    n, c, h = _shape(rng, 3)
    shared = bool(rng.integers(0, 2))
    slope = rng.uniform(0.05, 0.5, 1 if shared else c)
    return F.prelu, [_away_from_zero(rng, (n, c, h, 3)), slope]


def dropout(rng):
    seed = int(rng.integers(0, 2**31))
    return (lambda x: F.dropout(x, 0.3, True, seed)), [rng.standard_normal(_shape(rng, 3))]


def mse_mean(rng):
    s = _shape(rng, 4)
    return (lambda p, t: F.mse_loss(p, t)), [rng.standard_normal(s), rng.standard_normal(s)]


def mse_batch(rng):
    s = _shape(rng, 4)
    return (lambda p, t: F.mse_loss(p, t, reduction="batch")), [rng.standard_normal(s), rng.standard_normal(s)]


def l2_normalize(rng):
    return (lambda x: F.l2_normalize(x, axis=1)), [rng.standard_normal(_shape(rng, 2, 2, 5))]


def cross_entropy(rng):
    n, k = _shape(rng, 2, 2, 5)
    labels = rng.integers(0, k, n)
    return (lambda z: F.cross_entropy(z, labels)), [rng.standard_normal((n, k)) * 2]


def lmcl(rng):
    n, d, k = _shape(rng, 3, 2, 5)
    labels = rng.integers(0, k, n)
    head = LmclHead(d, k, scale=4.0, margin=0.35, seed=int(rng.integers(0, 1000)))

    def fn(emb, w):
        head.weight = w
        return lmcl_loss(emb, labels, head)

    return fn, [rng.standard_normal((n, d)), head.weight.data.astype(np.float64)]


def bypass(rng):
    return train_bypass, [rng.uniform(-1, 1, _shape(rng, 4))]


CASES = {f.__name__: f for f in (
    add, sub, mul, div, neg, matmul, tsum, mean, reshape, transpose, tanh, exp, log, square,
    conv2d, conv_transpose2d, prelu, dropout, mse_mean, mse_batch, l2_normalize, cross_entropy, lmcl, bypass,
)}
