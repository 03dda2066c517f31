"""Trainable layers and the small module system that holds them together.

Modules register parameters, buffers, and child modules by attribute
assignment.  Parameters carry a ``no_decay`` flag consulted by the optimizer;
normalization scales/shifts and biases set it so weight decay only touches
actual weights.
"""

import math

import numpy as np

from fflab import tensor as T
from fflab.tensor import Tensor


class Param(Tensor):
    __slots__ = ("no_decay",)

    def __init__(self, data, no_decay=False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.no_decay = no_decay


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Param):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        """All parameters and buffers as name -> numpy array, in a stable order."""
        state = {}
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state["buffer:" + name] = b
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise ValueError(
                f"state mismatch: missing {missing[:3]}{'...' if len(missing) > 3 else ''}, "
                f"unexpected {extra[:3]}{'...' if len(extra) > 3 else ''}"
            )
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
            arr[...] = src.astype(arr.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._order = []
        for m in mods:
            self.append(m)

    def append(self, mod):
        setattr(self, str(len(self._order)), mod)
        self._order.append(mod)

    def __iter__(self):
        return iter(self._order)

    def __len__(self):
        return len(self._order)

    def __getitem__(self, i):
        return self._order[i]


class Sequential(ModuleList):
    def forward(self, x):
        for m in self:
            x = m(x)
        return x


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1,
                 padding=0, bias=True, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Param(_he_normal(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Param(np.zeros(out_channels, dtype=dtype), no_decay=True) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1,
                 padding=0, bias=True, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Param(_he_normal(
            rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Param(np.zeros(out_channels, dtype=dtype), no_decay=True) if bias else None

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, stride=self.stride,
                                  padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel_size, rng, stride=1, padding=0, bias=True, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.channels = channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = kernel_size * kernel_size
        self.weight = Param(_he_normal(
            rng, (channels, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Param(np.zeros(channels, dtype=dtype), no_decay=True) if bias else None

    def forward(self, x):
        return T.depthwise_conv2d(x, self.weight, self.bias, stride=self.stride,
                                  padding=self.padding)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Param(_he_normal(rng, (in_features, out_features), in_features, dtype))
        self.bias = Param(np.zeros(out_features, dtype=dtype), no_decay=True) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(np.ones(channels, dtype=dtype), no_decay=True)
        self.beta = Param(np.zeros(channels, dtype=dtype), no_decay=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, self.training,
                             momentum=self.momentum, eps=self.eps)


class LayerNormChannels(Module):
    def __init__(self, channels, eps=1e-6, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.channels = channels
        self.eps = eps
        self.gamma = Param(np.ones(channels, dtype=dtype), no_decay=True)
        self.beta = Param(np.zeros(channels, dtype=dtype), no_decay=True)

    def forward(self, x):
        return T.layernorm_channels(x, self.gamma, self.beta, eps=self.eps)


class ChannelAttention(Module):
    """Squeeze-and-gate over channels: global average pool, a two-layer MLP,
    and a sigmoid gate multiplied back onto the input."""

    def __init__(self, channels, rng, reduction=4, dtype=None):
        super().__init__()
        self.channels = channels
        hidden = max(channels // reduction, 1)
        self.fc1 = Linear(channels, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, dtype=dtype)

    def gate(self, x):
        s = T.reshape(T.global_avg_pool(x), (x.shape[0], self.channels))
        g = T.sigmoid(self.fc2(T.relu(self.fc1(s))))
        return T.reshape(g, (x.shape[0], self.channels, 1, 1))

    def forward(self, x):
        return T.mul(x, self.gate(x))


class SpatialAttention(Module):
    """Gate over positions: channel mean, one wide conv, sigmoid, multiply."""

    def __init__(self, rng, kernel_size=7, dtype=None):
        super().__init__()
        self.conv = Conv2d(1, 1, kernel_size, rng, padding=kernel_size // 2, dtype=dtype)

    def gate(self, x):
        return T.sigmoid(self.conv(T.channel_mean(x)))

    def forward(self, x):
        return T.mul(x, self.gate(x))


class DynamicConv2d(Module):
    """Convolution whose kernel is assembled per sample from a learned bank.

    A pooled descriptor of the input drives four attention heads: one over the
    kernel bank, one over kernel positions, one over input channels, and one
    over output channels.  The position/input/output attentions modulate every
    bank entry, the bank attention mixes the entries, and the input is then
    convolved with its own aggregated kernel.  No bias term; stride 1 with
    same padding, so the spatial size is preserved.
    """

    def __init__(self, in_channels, out_channels, rng, kernel_size=3, n_kernels=4,
                 reduction=4, kernel_attention="sigmoid", dtype=None):
        super().__init__()
        if kernel_attention not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown kernel_attention {kernel_attention!r}")
        dtype = dtype or T.default_dtype()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.n_kernels = n_kernels
        self.kernel_attention = kernel_attention
        hidden = max(in_channels // reduction, 1)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Param(_he_normal(
            rng, (n_kernels, out_channels, in_channels, kernel_size, kernel_size),
            fan_in, dtype))
        self.reduce = Linear(in_channels, hidden, rng, dtype=dtype)
        self.head_n = Linear(hidden, n_kernels, rng, dtype=dtype)
        self.head_s = Linear(hidden, kernel_size * kernel_size, rng, dtype=dtype)
        self.head_i = Linear(hidden, in_channels, rng, dtype=dtype)
        self.head_o = Linear(hidden, out_channels, rng, dtype=dtype)

    def attention(self, x):
        """Per-sample attention vectors (bank, position, input ch, output ch)."""
        s = T.reshape(T.global_avg_pool(x), (x.shape[0], self.in_channels))
        h = T.relu(self.reduce(s))
        if self.kernel_attention == "softmax":
            a_n = T.softmax(self.head_n(h), axis=1)
        else:
            a_n = T.sigmoid(self.head_n(h))
        return (a_n, T.sigmoid(self.head_s(h)), T.sigmoid(self.head_i(h)),
                T.sigmoid(self.head_o(h)))

    def aggregate_weight(self, attention):
        """Collapse the kernel bank into one kernel per sample."""
        a_n, a_s, a_i, a_o = attention
        b = a_n.shape[0]
        k = self.kernel_size
        ci, co = self.in_channels, self.out_channels
        mix = T.linear(a_n, T.reshape(self.weight, (self.n_kernels, co * ci * k * k)))
        mix = T.reshape(mix, (b, co, ci, k, k))
        mix = T.mul(mix, T.reshape(a_s, (b, 1, 1, k, k)))
        mix = T.mul(mix, T.reshape(a_i, (b, 1, ci, 1, 1)))
        return T.mul(mix, T.reshape(a_o, (b, co, 1, 1, 1)))

    def forward(self, x, attention_override=None):
        att = attention_override if attention_override is not None else self.attention(x)
        att = tuple(a if isinstance(a, Tensor) else Tensor(a, dtype=x.dtype) for a in att)
        kernels = self.aggregate_weight(att)
        return T.conv2d_batched(x, kernels, stride=1, padding=self.kernel_size // 2)
