import numpy as np
import pytest

from fflab import tensor as T
from fflab import layers as L

from oracles import conv2d_loop, finite_diff_grad, max_rel_err

FD_TOL = 1e-4


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# Module bookkeeping


def test_named_parameters_and_buffers():
    rng = np.random.default_rng(0)

    class Net(L.Module):
        def __init__(self):
            super().__init__()
            self.conv = L.Conv2d(1, 2, 3, rng)
            self.bn = L.BatchNorm2d(2)

    net = Net()
    names = [n for n, _ in net.named_parameters()]
    assert names == ["conv.weight", "conv.bias", "bn.gamma", "bn.beta"]
    bufs = [n for n, _ in net.named_buffers()]
    assert bufs == ["bn.running_mean", "bn.running_var"]


def test_no_decay_flags():
    rng = np.random.default_rng(0)
    conv = L.Conv2d(1, 2, 3, rng)
    assert not conv.weight.no_decay
    assert conv.bias.no_decay
    bn = L.BatchNorm2d(2)
    assert bn.gamma.no_decay and bn.beta.no_decay


def test_state_dict_roundtrip_and_mismatch():
    rng = np.random.default_rng(1)
    a = L.Sequential([L.Conv2d(1, 2, 3, rng), L.BatchNorm2d(2)])
    b = L.Sequential([L.Conv2d(1, 2, 3, np.random.default_rng(2)), L.BatchNorm2d(2)])
    state = {k: v.copy() for k, v in a.state_dict().items()}
    b.load_state_dict(state)
    for k, v in b.state_dict().items():
        np.testing.assert_array_equal(v, state[k])
    with pytest.raises(ValueError, match="state mismatch"):
        b.load_state_dict({k: v for k, v in state.items() if "gamma" not in k})


def test_train_eval_recurses():
    rng = np.random.default_rng(1)
    net = L.Sequential([L.Conv2d(1, 2, 3, rng), L.BatchNorm2d(2)])
    net.eval()
    assert all(not m.training for m in net.modules())
    net.train()
    assert all(m.training for m in net.modules())


def test_seeded_init_is_reproducible():
    w1 = L.Conv2d(3, 4, 3, np.random.default_rng(42)).weight.data
    w2 = L.Conv2d(3, 4, 3, np.random.default_rng(42)).weight.data
    assert np.array_equal(w1, w2)


# ---------------------------------------------------------------------------
# Channel and spatial attention


def test_channel_attention_zero_weights_gate_half():
    rng = np.random.default_rng(2)
    ca = L.ChannelAttention(4, rng)
    for p in ca.parameters():
        p.data[...] = 0.0
    x = np.random.default_rng(3).normal(size=(2, 4, 5, 5))
    out = ca(T.Tensor(x))
    np.testing.assert_allclose(out.data, 0.5 * x, atol=1e-12)


def test_channel_attention_matches_manual_composition():
    rng = np.random.default_rng(4)
    ca = L.ChannelAttention(3, rng, reduction=1)
    x = np.random.default_rng(5).normal(size=(2, 3, 4, 4))
    pooled = x.mean(axis=(2, 3))
    h = np.maximum(pooled @ ca.fc1.weight.data + ca.fc1.bias.data, 0.0)
    gate = _sigmoid(h @ ca.fc2.weight.data + ca.fc2.bias.data)
    want = x * gate[:, :, None, None]
    np.testing.assert_allclose(ca(T.Tensor(x)).data, want, atol=1e-12)


def test_channel_attention_gate_range():
    rng = np.random.default_rng(6)
    ca = L.ChannelAttention(8, rng)
    x = np.random.default_rng(7).normal(size=(1, 8, 3, 3)) * 50.0
    g = ca.gate(T.Tensor(x)).data
    assert np.all(g > 0.0) and np.all(g < 1.0)


def test_spatial_attention_matches_manual_composition():
    rng = np.random.default_rng(8)
    sa = L.SpatialAttention(rng)
    x = np.random.default_rng(9).normal(size=(1, 3, 6, 6))
    mean = x.mean(axis=1, keepdims=True)
    conv = conv2d_loop(mean, sa.conv.weight.data, sa.conv.bias.data, stride=1, padding=3)
    want = x * _sigmoid(conv)
    np.testing.assert_allclose(sa(T.Tensor(x)).data, want, atol=1e-12)


def test_attention_fd():
    rng = np.random.default_rng(10)
    ca = L.ChannelAttention(3, rng)
    sa = L.SpatialAttention(rng)
    x0 = np.random.default_rng(11).normal(size=(2, 3, 4, 4))
    w = np.random.default_rng(12).normal(size=(2, 3, 4, 4))

    def f(v):
        with T.no_grad():
            return T.tsum(T.mul(sa(ca(T.Tensor(v))), T.Tensor(w))).item()

    x = T.Tensor(x0, requires_grad=True)
    T.tsum(T.mul(sa(ca(x)), T.Tensor(w))).backward()
    assert max_rel_err(x.grad, finite_diff_grad(f, x0.copy())) < FD_TOL


# ---------------------------------------------------------------------------
# Dynamic convolution


def test_dynconv_attention_zero_weights_all_half():
    rng = np.random.default_rng(13)
    dc = L.DynamicConv2d(4, 6, rng, kernel_size=3, n_kernels=2)
    for name, p in dc.named_parameters():
        if name != "weight":
            p.data[...] = 0.0
    a_n, a_s, a_i, a_o = dc.attention(T.Tensor(np.random.default_rng(14).normal(size=(2, 4, 5, 5))))
    for a, dim in ((a_n, 2), (a_s, 9), (a_i, 4), (a_o, 6)):
        assert a.shape == (2, dim)
        np.testing.assert_allclose(a.data, 0.5, atol=1e-12)


def test_dynconv_attention_in_unit_interval():
    rng = np.random.default_rng(15)
    dc = L.DynamicConv2d(3, 5, rng, n_kernels=4)
    x = np.random.default_rng(16).normal(size=(3, 3, 6, 6)) * 10.0
    for a in dc.attention(T.Tensor(x)):
        assert np.all(a.data > 0.0) and np.all(a.data < 1.0)


def test_dynconv_softmax_bank_attention_sums_to_one():
    rng = np.random.default_rng(17)
    dc = L.DynamicConv2d(3, 5, rng, n_kernels=4, kernel_attention="softmax")
    x = np.random.default_rng(18).normal(size=(2, 3, 6, 6))
    a_n = dc.attention(T.Tensor(x))[0]
    np.testing.assert_allclose(a_n.data.sum(axis=1), np.ones(2), atol=1e-12)
    with pytest.raises(ValueError, match="kernel_attention"):
        L.DynamicConv2d(3, 5, rng, kernel_attention="gumbel")


def test_dynconv_unit_attention_single_kernel_equals_conv2d():
    rng = np.random.default_rng(19)
    dc = L.DynamicConv2d(3, 4, rng, kernel_size=3, n_kernels=1)
    x = np.random.default_rng(20).normal(size=(2, 3, 6, 6))
    ones = (np.ones((2, 1)), np.ones((2, 9)), np.ones((2, 3)), np.ones((2, 4)))
    got = dc(T.Tensor(x), attention_override=ones)
    want = T.conv2d(T.Tensor(x), T.Tensor(dc.weight.data[0]), stride=1, padding=1)
    np.testing.assert_allclose(got.data, want.data, atol=1e-12)


def test_dynconv_zero_attention_gives_zero_output():
    rng = np.random.default_rng(21)
    dc = L.DynamicConv2d(3, 4, rng, n_kernels=2)
    x = np.random.default_rng(22).normal(size=(2, 3, 5, 5))
    zeros = (np.zeros((2, 2)), np.ones((2, 9)), np.ones((2, 3)), np.ones((2, 4)))
    np.testing.assert_allclose(dc(T.Tensor(x), attention_override=zeros).data, 0.0, atol=1e-12)


def test_dynconv_aggregation_matches_manual_kernel():
    rng = np.random.default_rng(23)
    dc = L.DynamicConv2d(2, 3, rng, kernel_size=3, n_kernels=2)
    gen = np.random.default_rng(24)
    x = gen.normal(size=(2, 2, 5, 5))
    a_n = gen.uniform(0.1, 0.9, size=(2, 2))
    a_s = gen.uniform(0.1, 0.9, size=(2, 9))
    a_i = gen.uniform(0.1, 0.9, size=(2, 2))
    a_o = gen.uniform(0.1, 0.9, size=(2, 3))
    got = dc(T.Tensor(x), attention_override=(a_n, a_s, a_i, a_o))
    for b in range(2):
        kern = np.zeros((3, 2, 3, 3))
        for k in range(2):
            mod = (dc.weight.data[k]
                   * a_s[b].reshape(1, 1, 3, 3)
                   * a_i[b].reshape(1, 2, 1, 1)
                   * a_o[b].reshape(3, 1, 1, 1))
            kern += a_n[b, k] * mod
        want = conv2d_loop(x[b : b + 1], kern, stride=1, padding=1)
        np.testing.assert_allclose(got.data[b : b + 1], want, atol=1e-12)


def test_dynconv_preserves_spatial_size():
    rng = np.random.default_rng(25)
    for k in (1, 3, 5):
        dc = L.DynamicConv2d(2, 2, rng, kernel_size=k, n_kernels=2)
        out = dc(T.Tensor(np.zeros((1, 2, 7, 7))))
        assert out.shape == (1, 2, 7, 7)


def test_dynconv_fd_end_to_end():
    rng = np.random.default_rng(26)
    dc = L.DynamicConv2d(2, 2, rng, kernel_size=3, n_kernels=2, reduction=1)
    n_params = sum(p.size for p in dc.parameters())
    assert n_params <= 500, n_params
    x0 = np.random.default_rng(27).normal(size=(2, 2, 4, 4))
    w = np.random.default_rng(28).normal(size=(2, 2, 4, 4))

    def scalar():
        return lambda t: T.tsum(T.mul(dc(t), T.Tensor(w)))

    x = T.Tensor(x0, requires_grad=True)
    scalar()(x).backward()

    def f(v):
        with T.no_grad():
            return scalar()(T.Tensor(v)).item()

    assert max_rel_err(x.grad, finite_diff_grad(f, x0.copy())) < FD_TOL

    # Every parameter, including the bank and each attention head.
    for name, p in dc.named_parameters():
        dc.zero_grad()
        T.tsum(T.mul(dc(T.Tensor(x0)), T.Tensor(w))).backward()
        orig = p.data.copy()

        def fp(v, p=p, orig=orig):
            p.data[...] = v
            with T.no_grad():
                val = T.tsum(T.mul(dc(T.Tensor(x0)), T.Tensor(w))).item()
            p.data[...] = orig
            return val

        num = finite_diff_grad(fp, orig.copy())
        assert max_rel_err(p.grad, num) < FD_TOL, name
