"""Independent reference implementations used to check the fast paths.

Everything here is written as plainly as possible (explicit loops, scipy's
LP solver) so a disagreement with the package points at the package.
"""

import numpy as np


def conv2d_loop(x, weight, bias=None, stride=1, padding=0):
    """Four-loop 2-d correlation. x (n,ci,h,w), weight (co,ci,kh,kw)."""
    n, ci, h, w = x.shape
    co, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * weight[o])
            if bias is not None:
                out[b, o] += bias[o]
    return out


def conv2d_loop_macs(x_shape, w_shape, stride=1, padding=0):
    """Count the multiply-accumulates the loop reference performs (no bias)."""
    n, ci, h, w = x_shape
    co, _, kh, kw = w_shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    return n * co * oh * ow * ci * kh * kw


def conv_transpose2d_loop(x, weight, bias=None, stride=1, padding=0):
    """Scatter-loop transposed convolution. x (n,ci,h,w), weight (ci,co,kh,kw)."""
    n, ci, h, w = x.shape
    _, co, kh, kw = weight.shape
    out_h = (h - 1) * stride - 2 * padding + kh
    out_w = (w - 1) * stride - 2 * padding + kw
    canvas = np.zeros((n, co, out_h + 2 * padding, out_w + 2 * padding), dtype=x.dtype)
    for b in range(n):
        for c in range(ci):
            for i in range(h):
                for j in range(w):
                    canvas[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += (
                        x[b, c, i, j] * weight[c]
                    )
    if padding:
        canvas = canvas[:, :, padding:-padding, padding:-padding]
    if bias is not None:
        canvas = canvas + bias.reshape(1, co, 1, 1)
    return canvas


def depthwise_conv2d_loop(x, weight, stride=1, padding=0):
    """Per-channel correlation. x (n,c,h,w), weight (c,kh,kw)."""
    n, c, h, w = x.shape
    _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, ch, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, ch, i, j] = np.sum(patch * weight[ch])
    return out


def finite_diff_grad(f, x, h=1e-5):
    """Central finite differences of scalar-valued f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b):
    """Largest elementwise |a-b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def lp_transport_cost(a, b, cost):
    """Exact optimal transport cost by linear programming."""
    from scipy.optimize import linprog

    m, k = cost.shape
    # Variables are the flattened plan; rows then columns as equalities.
    a_eq = np.zeros((m + k, m * k))
    for i in range(m):
        a_eq[i, i * k : (i + 1) * k] = 1.0
    for j in range(k):
        a_eq[m + j, j::k] = 1.0
    res = linprog(cost.reshape(-1), A_eq=a_eq, b_eq=np.concatenate([a, b]),
                  bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"LP solve failed: {res.message}")
    return float(res.fun)
