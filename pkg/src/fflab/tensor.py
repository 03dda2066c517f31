"""Reverse-mode automatic differentiation over numpy arrays.

Tensors wrap NCHW (or flat) float arrays and record the operations applied to
them.  Calling ``backward()`` on a scalar result walks the recorded graph in
reverse topological order and accumulates gradients into ``.grad`` of every
tensor created with ``requires_grad=True``.  The graph is released as soon as
the walk finishes, so each forward pass pays only for itself and a second
``backward()`` on the same result raises.
"""

import contextlib
import math

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype):
    """Set the dtype new tensors default to.  Accepts float32 or float64."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block.  Forward results are detached."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def numpy(self):
        return self.data

    def backward(self):
        if self.data.size != 1:
            raise RuntimeError(
                f"backward() requires a scalar result, got shape {self.data.shape}"
            )
        if self._done:
            raise RuntimeError(
                "backward() already ran on this result; the graph was released, "
                "re-run the forward pass first"
            )
        if not self.requires_grad:
            raise RuntimeError("result does not require grad; no graph was recorded")

        # Iterative depth-first topological sort: graphs from long training
        # steps can exceed the recursion limit.
        order = []
        seen = {id(self)}
        stack = [(self, iter(self._prev))]
        while stack:
            node, children = stack[-1]
            nxt = None
            for child in children:
                if id(child) not in seen:
                    nxt = child
                    break
            if nxt is None:
                order.append(node)
                stack.pop()
            else:
                seen.add(id(nxt))
                stack.append((nxt, iter(nxt._prev)))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
        # Release the graph and intermediate gradients; leaves keep theirs.
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._prev = ()
                node.grad = None
        self._done = True

    def __getitem__(self, key):
        out_data = self.data[key]
        out = _result(out_data, (self,))
        if out._backward is not None:
            src = self

            def backward(g):
                if src.requires_grad:
                    acc = np.zeros_like(src.data)
                    np.add.at(acc, key, g)
                    _accum(src, acc)

            out._backward = backward
        return out

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use reciprocal ops")
        return mul(self, 1.0 / float(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, inputs):
    """Build the output tensor of an op; mark it for recording if needed."""
    req = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = req
    out._prev = tuple(inputs) if req else ()
    out._done = False
    # A placeholder so callers can test "is recording"; replaced by the op.
    out._backward = (lambda g: None) if req else None
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True) if g.dtype != t.data.dtype else g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise ops


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, dtype=a.data.dtype)
    out = _result(a.data + b.data, (a, b))
    if out._backward is not None:

        def backward(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))

        out._backward = backward
    return out


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, dtype=a.data.dtype)
    out = _result(a.data * b.data, (a, b))
    if out._backward is not None:
        ad, bd = a.data, b.data

        def backward(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * bd, ad.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * ad, bd.shape))

        out._backward = backward
    return out


def relu(x):
    x = _as_tensor(x)
    out = _result(np.maximum(x.data, 0.0), (x,))
    if out._backward is not None:
        # Subgradient 0 at exactly 0.
        mask = x.data > 0

        def backward(g):
            _accum(x, g * mask)

        out._backward = backward
    return out


def sigmoid(x):
    x = _as_tensor(x)
    d = x.data
    # Split by sign so the exponential never overflows.
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = _result(s, (x,))
    if out._backward is not None:

        def backward(g):
            _accum(x, g * s * (1.0 - s))

        out._backward = backward
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Gaussian error linear unit, tanh form."""
    x = _as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    out = _result(0.5 * d * (1.0 + t), (x,))
    if out._backward is not None:

        def backward(g):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * d ** 2)
            dt = (1.0 - t ** 2) * dinner
            _accum(x, g * (0.5 * (1.0 + t) + 0.5 * d * dt))

        out._backward = backward
    return out


def reciprocal(x):
    x = _as_tensor(x)
    inv = 1.0 / x.data
    out = _result(inv, (x,))
    if out._backward is not None:

        def backward(g):
            _accum(x, -g * inv * inv)

        out._backward = backward
    return out


def absolute(x):
    x = _as_tensor(x)
    out = _result(np.abs(x.data), (x,))
    if out._backward is not None:
        sign = np.sign(x.data)

        def backward(g):
            _accum(x, g * sign)

        out._backward = backward
    return out


def softmax(x, axis=-1):
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _result(s, (x,))
    if out._backward is not None:

        def backward(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(x, s * (g - dot))

        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Reductions and reshaping


def tsum(x):
    """Sum of all elements, as a 0-d tensor."""
    x = _as_tensor(x)
    out = _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,))
    if out._backward is not None:

        def backward(g):
            _accum(x, np.broadcast_to(g, x.data.shape))

        out._backward = backward
    return out


def l1_norm(x):
    """Sum of absolute values, as a 0-d tensor."""
    x = _as_tensor(x)
    out = _result(np.asarray(np.abs(x.data).sum(), dtype=x.data.dtype), (x,))
    if out._backward is not None:
        sign = np.sign(x.data)

        def backward(g):
            _accum(x, g * sign)

        out._backward = backward
    return out


def mean(x):
    x = _as_tensor(x)
    n = x.data.size
    return mul(tsum(x), 1.0 / n)


def dot(a, b):
    """Full inner product of two same-shaped tensors, as a 0-d tensor."""
    return tsum(mul(a, b))


def reshape(x, shape):
    x = _as_tensor(x)
    orig = x.data.shape
    out = _result(x.data.reshape(shape), (x,))
    if out._backward is not None:

        def backward(g):
            _accum(x, g.reshape(orig))

        out._backward = backward
    return out


def global_avg_pool(x):
    """(n, c, h, w) -> (n, c, 1, 1), mean over the spatial axes."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    out = _result(x.data.mean(axis=(2, 3), keepdims=True), (x,))
    if out._backward is not None:
        scale = 1.0 / (h * w)

        def backward(g):
            _accum(x, np.broadcast_to(g * scale, x.data.shape))

        out._backward = backward
    return out


def channel_mean(x):
    """(n, c, h, w) -> (n, 1, h, w), mean over the channel axis."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"channel_mean expects NCHW input, got shape {x.data.shape}")
    c = x.data.shape[1]
    out = _result(x.data.mean(axis=1, keepdims=True), (x,))
    if out._backward is not None:
        scale = 1.0 / c

        def backward(g):
            _accum(x, np.broadcast_to(g * scale, x.data.shape))

        out._backward = backward
    return out


def concat_channels(tensors):
    """Concatenate NCHW tensors along the channel axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if len({(t.data.shape[0],) + t.data.shape[2:] for t in tensors}) != 1:
        raise ValueError(
            "concat_channels requires matching batch and spatial dims, got "
            + ", ".join(str(t.data.shape) for t in tensors)
        )
    out = _result(np.concatenate([t.data for t in tensors], axis=1), (*tensors,))
    if out._backward is not None:
        splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

        def backward(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=1)):
                if t.requires_grad:
                    _accum(t, piece)

        out._backward = backward
    return out


def linear(x, weight, bias=None):
    """x (n, d) @ weight (d, e) + bias (e)."""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    inputs = (x, weight) if bias is None else (x, weight, _as_tensor(bias))
    y = x.data @ weight.data
    if bias is not None:
        y = y + inputs[2].data
    out = _result(y, inputs)
    if out._backward is not None:

        def backward(g):
            if x.requires_grad:
                _accum(x, g @ weight.data.T)
            if weight.requires_grad:
                _accum(weight, x.data.T @ g)
            if bias is not None and inputs[2].requires_grad:
                _accum(inputs[2], g.sum(axis=0))

        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Convolution family.  One forward kernel and two adjoint kernels are shared
# between conv2d and conv_transpose2d, so the transpose is the exact adjoint
# of the convolution by construction.


def conv_output_hw(h, w, kh, kw, stride, padding):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"kernel ({kh}x{kw}) with stride {stride}, padding {padding} does not fit "
            f"input ({h}x{w})"
        )
    return oh, ow


def _pad_nchw(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _gather(xp, weight, stride, oh, ow):
    """Correlation of padded input xp (n,ci,H,W) with weight (co,ci,kh,kw)."""
    n, ci, _, _ = xp.shape
    co, _, kh, kw = weight.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, ci * kh * kw)
    y = cols @ weight.reshape(co, -1).T
    return y.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)


def _scatter(y, weight, stride, padding, out_h, out_w):
    """Adjoint of _gather with respect to its input: spread y (n,co,oh,ow)
    back through weight (co,ci,kh,kw) onto an (n,ci,out_h,out_w) canvas."""
    n, co, oh, ow = y.shape
    _, ci, kh, kw = weight.shape
    gcols = y.transpose(0, 2, 3, 1).reshape(n * oh * ow, co) @ weight.reshape(co, -1)
    gwin = gcols.reshape(n, oh, ow, ci, kh, kw)
    canvas = np.zeros((n, ci, out_h + 2 * padding, out_w + 2 * padding), dtype=y.dtype)
    for u in range(kh):
        for v in range(kw):
            canvas[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += (
                gwin[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            )
    if padding:
        canvas = canvas[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(canvas)


def _kernel_grad(y, xp, stride, kh, kw):
    """Weight cotangent: y (n,co,oh,ow) against padded input xp (n,ci,H,W)."""
    n, co, oh, ow = y.shape
    ci = xp.shape[1]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, ci * kh * kw)
    g = y.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
    return (g.T @ cols).reshape(co, ci, kh, kw)


def _check_conv_args(x, weight, stride, padding):
    if x.ndim != 4:
        raise ValueError(f"conv input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv weight must be 4-d, got shape {weight.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d correlation: x (n,ci,h,w), weight (co,ci,kh,kw) -> (n,co,oh,ow)."""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    _check_conv_args(x.data, weight.data, stride, padding)
    n, ci, h, w = x.data.shape
    co, wci, kh, kw = weight.data.shape
    if wci != ci:
        raise ValueError(f"weight expects {wci} input channels, input has {ci}")
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    xp = _pad_nchw(x.data, padding)
    y = _gather(xp, weight.data, stride, oh, ow)
    inputs = (x, weight) if bias is None else (x, weight, _as_tensor(bias))
    if bias is not None:
        y = y + inputs[2].data.reshape(1, co, 1, 1)
    out = _result(y, inputs)
    if out._backward is not None:

        def backward(g):
            if x.requires_grad:
                _accum(x, _scatter(g, weight.data, stride, padding, h, w))
            if weight.requires_grad:
                _accum(weight, _kernel_grad(g, xp, stride, kh, kw))
            if bias is not None and inputs[2].requires_grad:
                _accum(inputs[2], g.sum(axis=(0, 2, 3)))

        out._backward = backward
    return out


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0):
    """Transposed 2-d convolution: the exact adjoint of conv2d.

    x (n,ci,h,w), weight (ci,co,kh,kw) -> (n,co,(h-1)*stride-2*padding+kh, ...).
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    _check_conv_args(x.data, weight.data, stride, padding)
    n, ci, h, w = x.data.shape
    wci, co, kh, kw = weight.data.shape
    if wci != ci:
        raise ValueError(f"weight expects {wci} input channels, input has {ci}")
    out_h = (h - 1) * stride - 2 * padding + kh
    out_w = (w - 1) * stride - 2 * padding + kw
    if out_h < 1 or out_w < 1:
        raise ValueError(
            f"transposed conv output would be empty: ({out_h}x{out_w}) from ({h}x{w})"
        )
    y = _scatter(x.data, weight.data, stride, padding, out_h, out_w)
    inputs = (x, weight) if bias is None else (x, weight, _as_tensor(bias))
    if bias is not None:
        y = y + inputs[2].data.reshape(1, co, 1, 1)
    out = _result(y, inputs)
    if out._backward is not None:

        def backward(g):
            gp = _pad_nchw(g, padding)
            if x.requires_grad:
                _accum(x, _gather(gp, weight.data, stride, h, w))
            if weight.requires_grad:
                _accum(weight, _kernel_grad(x.data, gp, stride, kh, kw))
            if bias is not None and inputs[2].requires_grad:
                _accum(inputs[2], g.sum(axis=(0, 2, 3)))

        out._backward = backward
    return out


def depthwise_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Per-channel convolution: x (n,c,h,w), weight (c,kh,kw) -> (n,c,oh,ow)."""
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if weight.data.ndim != 3:
        raise ValueError(f"depthwise weight must be (c,kh,kw), got {weight.data.shape}")
    n, c, h, w = x.data.shape
    wc, kh, kw = weight.data.shape
    if wc != c:
        raise ValueError(f"weight expects {wc} channels, input has {c}")
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    xp = _pad_nchw(x.data, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    y = np.einsum("ncijuv,cuv->ncij", win, weight.data, optimize=True)
    inputs = (x, weight) if bias is None else (x, weight, _as_tensor(bias))
    if bias is not None:
        y = y + inputs[2].data.reshape(1, c, 1, 1)
    out = _result(y, inputs)
    if out._backward is not None:

        def backward(g):
            if x.requires_grad:
                canvas = np.zeros_like(xp)
                for u in range(kh):
                    for v in range(kw):
                        canvas[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += (
                            g * weight.data[:, u, v].reshape(1, c, 1, 1)
                        )
                if padding:
                    gx = canvas[:, :, padding:-padding, padding:-padding]
                else:
                    gx = canvas
                _accum(x, np.ascontiguousarray(gx))
            if weight.requires_grad:
                _accum(weight, np.einsum("ncij,ncijuv->cuv", g, win, optimize=True))
            if bias is not None and inputs[2].requires_grad:
                _accum(inputs[2], g.sum(axis=(0, 2, 3)))

        out._backward = backward
    return out


def conv2d_batched(x, weights, stride=1, padding=0):
    """Convolution with a separate kernel per sample.

    x (n,ci,h,w), weights (n,co,ci,kh,kw) -> (n,co,oh,ow).  Used where kernels
    are produced from the input itself.
    """
    x = _as_tensor(x)
    weights = _as_tensor(weights)
    if weights.data.ndim != 5:
        raise ValueError(f"batched weights must be 5-d, got shape {weights.data.shape}")
    n, ci, h, w = x.data.shape
    wn, co, wci, kh, kw = weights.data.shape
    if wn != n or wci != ci:
        raise ValueError(
            f"batched weights {weights.data.shape} do not match input {x.data.shape}"
        )
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    xp = _pad_nchw(x.data, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    y = np.empty((n, co, oh, ow), dtype=x.data.dtype)
    for b in range(n):
        cols = win[b].transpose(1, 2, 0, 3, 4).reshape(oh * ow, ci * kh * kw)
        y[b] = (cols @ weights.data[b].reshape(co, -1).T).T.reshape(co, oh, ow)
    out = _result(y, (x, weights))
    if out._backward is not None:

        def backward(g):
            if x.requires_grad:
                gx = np.empty_like(x.data)
                for b in range(n):
                    gx[b] = _scatter(
                        g[b : b + 1], weights.data[b], stride, padding, h, w
                    )[0]
                _accum(x, gx)
            if weights.requires_grad:
                gw = np.empty_like(weights.data)
                for b in range(n):
                    gw[b] = _kernel_grad(g[b : b + 1], xp[b : b + 1], stride, kh, kw)
                _accum(weights, gw)

        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Normalization


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over NCHW input.

    In training mode statistics come from the batch (biased variance for the
    normalization, unbiased for the running update) and ``running_mean`` /
    ``running_var`` are updated in place.  In eval mode the running buffers are
    used as constants; the op stays differentiable with respect to the input
    and the affine parameters in both modes.
    """
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if training:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = _result(y, (x, gamma, beta))
    if out._backward is not None:

        def backward(g):
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gi = g * gamma.data.reshape(1, c, 1, 1)
                if training:
                    m = n * h * w
                    mean_g = gi.mean(axis=(0, 2, 3), keepdims=True)
                    mean_gx = (gi * xhat).mean(axis=(0, 2, 3), keepdims=True)
                    gx = inv.reshape(1, c, 1, 1) * (gi - mean_g - xhat * mean_gx)
                else:
                    gx = gi * inv.reshape(1, c, 1, 1)
                _accum(x, gx)

        out._backward = backward
    return out


def layernorm_channels(x, gamma, beta, eps=1e-6):
    """Layer normalization over the channel axis of an NCHW tensor."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma)
    beta = _as_tensor(beta)
    if x.data.ndim != 4:
        raise ValueError(f"layernorm_channels expects NCHW input, got shape {x.data.shape}")
    c = x.data.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = _result(y, (x, gamma, beta))
    if out._backward is not None:

        def backward(g):
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gi = g * gamma.data.reshape(1, c, 1, 1)
                mean_g = gi.mean(axis=1, keepdims=True)
                mean_gx = (gi * xhat).mean(axis=1, keepdims=True)
                _accum(x, inv * (gi - mean_g - xhat * mean_gx))

        out._backward = backward
    return out
