"""Time the numba and numpy kernel backends against each other.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 20]

Each kernel is run once per backend to warm up (numba compiles on first
call), checked for agreement, then timed with ``timeit``, alternating
backends between repeats.  Prints one row per kernel with the best time of
each backend and the speedup.
"""

import argparse
import timeit

import numpy as np

from taskcodec import _kernels
from taskcodec import functional as F
from taskcodec.codec import Codec, CodecConfig
from taskcodec.tensor import Tensor


def cases(batch, rng):
    x = rng.standard_normal((batch, 64, 32, 32)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _kernels.im2col(xp, 3, 3, 1, 32, 32)
    slope = np.full(64, 0.25, np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    w = rng.standard_normal((64, 64, 3, 3)).astype(np.float32) * 0.05

    def conv_fwd_bwd():
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        F.conv2d(xt, wt, None, 1, 1).sum().backward()
        return xt.grad

    codec = Codec(CodecConfig(), seed=0)
    images = np.tanh(rng.standard_normal((batch, 3, 32, 32))).astype(np.float32)

    def codec_step():
        codec.zero_grad()
        out = codec(Tensor(images), training=True, seed=0)
        F.mse_loss(out, Tensor(images)).backward()
        return out.data

    return {
        "im2col 3x3 s1": lambda: _kernels.im2col(xp, 3, 3, 1, 32, 32),
        "col2im 3x3 s1": lambda: _kernels.col2im(cols, batch, 64, 34, 34, 3, 3, 1, 32, 32),
        "im2col 3x3 s2": lambda: _kernels.im2col(xp, 3, 3, 2, 16, 16),
        "prelu forward": lambda: _kernels.prelu_forward(x, slope),
        "prelu backward": lambda: _kernels.prelu_backward(x, slope, g),
        "conv2d fwd+bwd": conv_fwd_bwd,
        "codec step": codec_step,
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--batch", type=int, default=20)
    args = parser.parse_args(argv)

    backends = _kernels.available_backends()
    original = _kernels.BACKEND
    results = {}
    outputs = {}
    try:
        per_backend = {b: cases(args.batch, np.random.default_rng(0)) for b in backends}
        for name in per_backend[backends[0]]:
            for backend in backends:
                _kernels.set_backend(backend)
                outputs.setdefault(name, []).append(per_backend[backend][name]())  # warm-up / JIT compile
            # interleave backends so cache and allocator state favour neither
            for _ in range(args.repeat):
                for backend in backends:
                    _kernels.set_backend(backend)
                    t = min(timeit.repeat(per_backend[backend][name], number=1, repeat=1))
                    results[name, backend] = min(t, results.get((name, backend), t))
    finally:
        _kernels.set_backend(original)

    for name, outs in outputs.items():
        ref = outs[0][0] if isinstance(outs[0], tuple) else outs[0]
        for other in outs[1:]:
            other = other[0] if isinstance(other, tuple) else other
            if not np.allclose(ref, other, rtol=1e-5, atol=1e-5):
                raise SystemExit(f"backends disagree on {name}")

    header = f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(header)
    for name in outputs:
        times = [results[name, b] for b in backends]
        row = f"{name:<16}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(backends) > 1:
            row += f"{times[-1] / times[0]:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
