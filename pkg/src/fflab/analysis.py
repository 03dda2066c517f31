"""Cost accounting, receptive-field probing, and map export.

Counting conventions: a matrix-multiply style layer (convolution,
transposed convolution, linear, kernel aggregation) contributes its
multiply-accumulate count; bias additions ride along for free.
Elementwise work (activations, gates, residual adds, normalization,
pooling) costs 1 FLOP per output element, recorded as half a MAC so the
FLOPs column is exactly twice the MACs column everywhere.
"""

import dataclasses
import json
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import data as D
from .model import build_model, count_parameters

__all__ = [
    "LayerCost",
    "AnalysisReport",
    "ERFMap",
    "conv_macs",
    "conv_transpose_macs",
    "depthwise_macs",
    "linear_macs",
    "count_params_flops",
    "receptive_field",
    "effective_receptive_field",
    "erf_of",
    "erf_area",
    "branch_heatmap",
    "density_grid",
    "export_density",
]


def conv_macs(cin, cout, kernel, oh, ow):
    return kernel * kernel * cin * cout * oh * ow


def conv_transpose_macs(cin, cout, kernel, h_in, w_in):
    # Every input element multiplies into kernel^2 * cout outputs.
    return kernel * kernel * cin * cout * h_in * w_in


def depthwise_macs(channels, kernel, oh, ow):
    return kernel * kernel * channels * oh * ow


def linear_macs(din, dout, rows=1):
    return din * dout * rows


def _elem(count):
    """Elementwise work: 1 FLOP per element = half a MAC."""
    return 0.5 * count


@dataclasses.dataclass
class LayerCost:
    name: str
    params: int
    macs: float

    @property
    def flops(self):
        return 2.0 * self.macs


@dataclasses.dataclass
class AnalysisReport:
    input_shape: tuple
    rows: list

    @property
    def total_params(self):
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self):
        return sum(r.macs for r in self.rows)

    @property
    def total_flops(self):
        return sum(r.flops for r in self.rows)

    def table(self):
        def fmt(x):
            return f"{x:,.0f}" if float(x).is_integer() else f"{x:,.1f}"

        name_w = max(len("layer"), len("total"), *(len(r.name) for r in self.rows))
        lines = [f"input shape: {self.input_shape}",
                 f"{'layer':<{name_w}}  {'params':>12}  {'MACs':>16}  {'FLOPs':>16}"]
        for r in self.rows:
            lines.append(f"{r.name:<{name_w}}  {fmt(r.params):>12}  "
                         f"{fmt(r.macs):>16}  {fmt(r.flops):>16}")
        lines.append(f"{'total':<{name_w}}  {fmt(self.total_params):>12}  "
                     f"{fmt(self.total_macs):>16}  {fmt(self.total_flops):>16}")
        return "\n".join(lines)

    def to_json(self):
        return json.dumps({
            "input_shape": list(self.input_shape),
            "rows": [{"name": r.name, "params": r.params,
                      "macs": r.macs, "flops": r.flops} for r in self.rows],
            "totals": {"params": self.total_params,
                       "macs": self.total_macs,
                       "flops": self.total_flops},
        }, indent=2)


def _module_params(module):
    return int(sum(p.data.size for p in module.parameters()))


def _block_macs(kind, ch, hh, ww):
    if kind == "plain":
        return (conv_macs(ch, ch, 3, hh, ww)
                + _elem(ch * hh * ww)       # relu
                + _elem(ch * hh * ww))      # batchnorm
    return (depthwise_macs(ch, 7, hh, ww)
            + _elem(ch * hh * ww)           # channel norm
            + conv_macs(ch, 4 * ch, 1, hh, ww)
            + _elem(4 * ch * hh * ww)       # gelu
            + conv_macs(4 * ch, ch, 1, hh, ww)
            + _elem(ch * hh * ww)           # residual scale
            + _elem(ch * hh * ww))          # residual add


def _dynconv_macs(conv, hh, ww):
    cin, cout, k = conv.in_channels, conv.out_channels, conv.kernel_size
    hidden = conv.reduce.bias.data.size
    logits = conv.n_kernels + k * k + cin + cout
    return (_elem(cin * hh * ww)                       # pooled descriptor
            + linear_macs(cin, hidden)
            + _elem(hidden)                            # relu
            + linear_macs(hidden, logits)              # four heads
            + _elem(logits)                            # gates
            + linear_macs(conv.n_kernels, cout * cin * k * k)  # bank mix
            + _elem(3 * cout * cin * k * k)            # three modulations
            + conv_macs(cin, cout, k, hh, ww))


def _dynblock_macs(block, hh, ww):
    cout = block.conv.out_channels
    return _dynconv_macs(block.conv, hh, ww) + 2 * _elem(cout * hh * ww)


def _channel_att_macs(att, hh, ww):
    ch = att.channels
    hidden = att.fc1.bias.data.size
    return (_elem(ch * hh * ww)                        # pool
            + linear_macs(ch, hidden) + _elem(hidden)  # fc1 + relu
            + linear_macs(hidden, ch) + _elem(ch)      # fc2 + sigmoid
            + _elem(ch * hh * ww))                     # gate multiply


def _spatial_att_macs(att, ch, hh, ww):
    k = att.conv.weight.data.shape[-1]
    return (_elem(ch * hh * ww)                        # channel mean
            + conv_macs(1, 1, k, hh, ww)
            + _elem(hh * ww)                           # sigmoid
            + _elem(ch * hh * ww))                     # gate multiply


def count_params_flops(config, input_shape=(1, 3, 512, 512)):
    """Cost report from the closed-form layer formulas.

    Parameters are counted from an instantiated model so the totals are
    exact by construction; MACs come from the per-layer formulas at the
    spatial sizes the forward pass would produce for input_shape.
    """
    n, c, h, w = input_shape
    if c != config.in_channels:
        raise ValueError(f"input has {c} channels, model expects {config.in_channels}")
    if h % 32 or w % 32:
        raise ValueError(f"input size must be divisible by 32, got {(h, w)}")

    model = build_model(config, seed=0, dtype=np.float32)
    rows = []

    def add(name, module, macs, extra_params=0):
        params = (_module_params(module) if module is not None else 0) + extra_params
        rows.append(LayerCost(name, params, macs * n))

    bb = model.backbone
    h4, w4 = h // 4, w // 4
    cs = config.stem_channels
    stem_macs = conv_macs(c, cs, 4, h4, w4) + _elem(cs * h4 * w4)
    if bb.stem_norm is None:
        stem_macs += _elem(cs * h4 * w4)  # relu before the norm
        stem_extra = bb.stem_bn
    else:
        stem_extra = bb.stem_norm
    add("backbone.stem", bb.stem, stem_macs, extra_params=_module_params(stem_extra))

    for i, block in enumerate(bb.stem_blocks):
        add(f"backbone.stem_blocks.{i}", block, _block_macs(config.block, cs, h4, w4))

    prev = cs
    hh, ww = h4, w4
    grids = []
    for s, (width, depth) in enumerate(zip(config.stage_channels, config.stage_depths)):
        hh, ww = hh // 2, ww // 2
        down_macs = conv_macs(prev, width, 2, hh, ww)
        if config.block == "plain":
            down_macs += 2 * _elem(width * hh * ww)      # relu + batchnorm
        else:
            down_macs += _elem(prev * hh * ww * 4)       # norm before the stride
        add(f"backbone.downs.{s}", bb.downs[s], down_macs)
        for j in range(depth):
            add(f"backbone.stages.{s}.{j}", bb.stages[s][j],
                _block_macs(config.block, width, hh, ww))
        grids.append((hh, ww))
        prev = width

    widths = config.branch_channels()
    if model.ftms is not None:
        for b, ftm in enumerate(model.ftms):
            gh, gw = grids[b]
            cin = config.stage_channels[b]
            cout = widths[b]
            add(f"ftms.{b}.channel_att", ftm.channel_att, _channel_att_macs(ftm.channel_att, gh, gw))
            add(f"ftms.{b}.y1", ftm.y1, _dynblock_macs(ftm.y1, gh, gw) + _elem(cin * gh * gw))
            add(f"ftms.{b}.y2", ftm.y2, _dynblock_macs(ftm.y2, gh, gw) + _elem(cin * gh * gw))
            add(f"ftms.{b}.y3", ftm.y3, _dynblock_macs(ftm.y3, gh, gw))
            if ftm.y4 is not None:
                add(f"ftms.{b}.y4", ftm.y4, _dynblock_macs(ftm.y4, gh, gw))
            add(f"ftms.{b}.spatial_att", ftm.spatial_att,
                _spatial_att_macs(ftm.spatial_att, cout, gh, gw))

    (h8, w8), (h16, w16), (h32, w32) = grids
    c1, c2, c3 = widths
    fus = model.fusion
    if config.fusion == "concat":
        add("fusion.up2", fus.up2, conv_transpose_macs(c2, c2, 2, h16, w16))
        add("fusion.up3", fus.up3, conv_transpose_macs(c3, c3, 4, h32, w32))
    elif config.fusion == "add":
        add("fusion.proj2", fus.proj2, conv_macs(c2, c1, 1, h16, w16))
        add("fusion.up2", fus.up2, conv_transpose_macs(c1, c1, 2, h16, w16))
        add("fusion.proj3", fus.proj3, conv_macs(c3, c1, 1, h32, w32))
        add("fusion.up3", fus.up3, conv_transpose_macs(c1, c1, 4, h32, w32))
        add("fusion.sum", None, 2 * _elem(c1 * h8 * w8))
    else:
        add("fusion.proj32", fus.proj32, conv_macs(c3, c2, 1, h32, w32))
        add("fusion.up32", fus.up32, conv_transpose_macs(c2, c2, 2, h32, w32))
        add("fusion.proj21", fus.proj21, conv_macs(c2, c1, 1, h16, w16))
        add("fusion.up21", fus.up21, conv_transpose_macs(c1, c1, 2, h16, w16))
        add("fusion.sum", None, _elem(c2 * h16 * w16) + _elem(c1 * h8 * w8))

    add("head", model.head,
        conv_macs(fus.out_channels, 1, 1, h8, w8) + _elem(h8 * w8))

    report = AnalysisReport(tuple(input_shape), rows)
    assert report.total_params == count_parameters(model)
    return report


def receptive_field(chain):
    """(rf, jump) of a stack of local ops given as (kernel, stride) pairs."""
    rf, jump = 1, 1
    for k, s in chain:
        rf += (k - 1) * jump
        jump *= s
    return rf, jump


def branch_receptive_field(config, branch):
    """Theoretical receptive field of a backbone stage output.

    Only meaningful for configurations whose path to that output is
    purely local (no global pooling), i.e. the focus transitions and
    their gates are excluded: this describes stage outputs, which equal
    the branches when use_ftm is off.
    """
    if branch not in (1, 2, 3):
        raise ValueError(f"unknown branch {branch!r}")
    block_chain = [(3, 1)] if config.block == "plain" else [(7, 1), (1, 1), (1, 1)]
    chain = [(4, 4)]
    chain += block_chain * config.stem_depth
    for s in range(branch):
        chain.append((2, 2))
        chain += block_chain * config.stage_depths[s]
    return receptive_field(chain)


@dataclasses.dataclass(eq=False)
class ERFMap:
    values: np.ndarray  # (h, w), max-normalized
    branch: object
    probes: int

    def support(self, threshold=0.05):
        return self.values >= threshold


def erf_area(erf, threshold=0.05):
    values = erf.values if isinstance(erf, ERFMap) else erf
    return int(np.count_nonzero(values >= threshold))


def erf_of(forward, images, tag="output"):
    """Average |d center-output / d input| over probe images.

    forward maps an input Tensor (1, c, h, w) to any NCHW Tensor; the
    scalar probed is the channel sum at the output's center cell.
    """
    acc = None
    for image in images:
        x = Tensor(image, requires_grad=True)
        out = forward(x)
        hc, wc = out.shape[2] // 2, out.shape[3] // 2
        center = out[(slice(None), slice(None), hc, wc)]
        T.tsum(center).backward()
        contribution = np.abs(x.grad[0]).sum(axis=0)
        acc = contribution if acc is None else acc + contribution
    acc /= len(images)
    peak = acc.max()
    if peak > 0:
        acc = acc / peak
    return ERFMap(acc, tag, len(images))


_BRANCH_TAGS = (1, 2, 3, "fused", "density")


def effective_receptive_field(model, branch, probes=16, size=64, seed=0):
    """Measured receptive field of one branch (or the fused/density output).

    Probes are synthetic scenes; gradients flow from the channel sum at
    the chosen output's center cell back to the input. Branch gates pool
    globally, so branch supports may exceed any local-ops bound; the
    map is max-normalized and thresholded downstream.
    """
    if branch not in _BRANCH_TAGS:
        raise ValueError(f"unknown branch {branch!r}; expected one of {_BRANCH_TAGS}")
    dtype = np.float32
    for p in model.parameters():
        dtype = p.data.dtype
        break
    images = []
    for i in range(probes):
        img, _ = D.generate_scene(D.SceneConfig(height=size, width=size, seed=seed + i))
        x = img.astype(dtype)[None, None]
        if model.config.in_channels > 1:
            x = np.repeat(x, model.config.in_channels, axis=1)
        images.append(x)

    def forward(x):
        feats = model.forward_features(x)
        if branch in (1, 2, 3):
            return feats["branches"][branch - 1]
        return feats[branch]

    was_training = model.training
    model.eval()
    try:
        result = erf_of(forward, images, tag=branch)
    finally:
        model.zero_grad()
        if was_training:
            model.train()
    return result


def _prepare_full_image(model, image):
    """Pad an (h, w) image to a multiple of 32, returning the original size."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    ph, pw = (-h) % 32, (-w) % 32
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "edge"
        image = np.pad(image, ((0, ph), (0, pw)), mode=mode)
    return image, h, w


def _minmax(grid):
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        return (grid - lo) / (hi - lo)
    return np.zeros_like(grid)


def branch_heatmap(model, image, branch, path=None):
    """Channel-mean magnitude of a branch output, min-max normalized and
    nearest-upsampled back to image resolution. Optionally written as PGM."""
    if branch not in (1, 2, 3):
        raise ValueError(f"branch must be 1, 2, or 3, got {branch!r}")
    padded, h, w = _prepare_full_image(model, image)
    arr = padded[None]
    if model.config.in_channels > 1:
        arr = np.repeat(arr, model.config.in_channels, axis=0)
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            feats = model.forward_features(Tensor(arr[None], dtype=_param_dtype(model)))
    finally:
        if was_training:
            model.train()
    grid = np.abs(feats["branches"][branch - 1].data[0]).mean(axis=0)
    grid = _minmax(grid)
    factor = padded.shape[0] // grid.shape[0]
    full = np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)[:h, :w]
    if path is not None:
        D.write_pgm(path, full)
    return full


def _param_dtype(model):
    for p in model.parameters():
        return p.data.dtype
    return np.float64


def density_grid(model, image):
    """Predicted density over the cells covering a full (h, w) image."""
    padded, h, w = _prepare_full_image(model, image)
    arr = padded.astype(_param_dtype(model))[None]
    if model.config.in_channels > 1:
        arr = np.repeat(arr, model.config.in_channels, axis=0)
    grid = model.predict_density(arr)
    return grid[:math.ceil(h / 8), :math.ceil(w / 8)]


def export_density(model, image, path_prefix):
    """Write <prefix>.pgm (normalized map) and <prefix>.csv (count + cells).

    The CSV holds one "count,<value>" line followed by the grid, row per
    line; the count is the exact sum of the printed grid's source values.
    Returns (count, grid).
    """
    grid = density_grid(model, image)
    count = float(grid.sum())
    D.write_pgm(f"{path_prefix}.pgm", _minmax(grid))
    with open(f"{path_prefix}.csv", "w") as f:
        f.write(f"count,{count:.6f}\n")
        for row in grid:
            f.write(",".join(f"{v:.9g}" for v in row) + "\n")
    return count, grid
