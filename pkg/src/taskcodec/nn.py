"""Parameter containers and the small set of layers the networks use."""

import math

import numpy as np

from . import functional as F
from .tensor import Tensor, default_dtype

PRELU_INIT = 0.25


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, requires_grad=True, dtype=None, name=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype, name=name)


def kaiming_uniform(shape, fan_in, rng, negative_slope=PRELU_INIT):
    gain = math.sqrt(2.0 / (1.0 + negative_slope**2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class: parameters and submodules are discovered from attributes.

    Attribute insertion order defines the parameter order, which in turn
    fixes checkpoint layout and optimizer iteration order.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"state is missing parameters: {missing[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"parameter {name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel_size, stride=1, padding=None, rng=None, dtype=None):
        rng = rng or np.random.default_rng(0)
        dtype = dtype or default_dtype()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = cin * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform((cout, cin, kernel_size, kernel_size), fan_in, rng), dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype)

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel_size, stride=2, padding=None, output_padding=None, rng=None, dtype=None):
        rng = rng or np.random.default_rng(0)
        dtype = dtype or default_dtype()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        if output_padding is None:
            # makes the output exactly stride * input for odd kernels with "same" padding
            output_padding = stride + 2 * self.padding - kernel_size
        self.output_padding = output_padding
        # each output pixel sees about cin * k * k / stride**2 inputs
        fan_in = max(1.0, cin * kernel_size * kernel_size / stride**2)
        self.weight = Parameter(kaiming_uniform((cin, cout, kernel_size, kernel_size), fan_in, rng), dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype)

    def forward(self, x):
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class PReLU(Module):
    def __init__(self, channels=1, init=PRELU_INIT, dtype=None):
        self.slope = Parameter(np.full(channels, init), dtype=dtype or default_dtype())

    def forward(self, x):
        return F.prelu(x, self.slope)


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng=None, dtype=None):
        rng = rng or np.random.default_rng(0)
        dtype = dtype or default_dtype()
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), dtype=dtype)
        self.bias = Parameter(np.zeros(fan_out), dtype=dtype)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)
