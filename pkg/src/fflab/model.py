"""Multi-branch density regression network.

A strided backbone exposes feature maps at strides 8, 16, and 32.  Each map
passes through a focus transition module (channel gate, a ladder of dynamic
convolution blocks, spatial gate), the three branches are fused back onto the
stride-8 grid by one of three strategies, and a 1x1 head produces a
non-negative density map.  Input sizes must be divisible by 32 so every stage
divides evenly; the predicted grid is input size / 8.
"""

import dataclasses
import json

import numpy as np

from fflab import tensor as T
from fflab import layers as L


@dataclasses.dataclass
class FFNetConfig:
    in_channels: int = 1
    stem_channels: int = 4
    stem_depth: int = 0
    stage_channels: tuple = (8, 16, 32)
    stage_depths: tuple = (1, 1, 1)
    block: str = "plain"  # plain | depthwise
    use_ftm: bool = True
    ftm_channels: tuple | None = None  # per-branch widths; None halves each stage
    ftm_n_kernels: int = 4
    ftm_reduction: int = 4
    ftm_kernel_size: int = 3
    kernel_attention: str = "sigmoid"  # sigmoid | softmax
    ftm_outer_double: bool = True
    fusion: str = "concat"  # concat | add | stepwise

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_depths = tuple(self.stage_depths)
        if len(self.stage_channels) != 3 or len(self.stage_depths) != 3:
            raise ValueError("exactly three backbone stages are required")
        if not (self.stage_channels[0] < self.stage_channels[1] < self.stage_channels[2]):
            raise ValueError(f"stage widths must increase, got {self.stage_channels}")
        if self.block not in ("plain", "depthwise"):
            raise ValueError(f"unknown block type {self.block!r}")
        if self.fusion not in ("concat", "add", "stepwise"):
            raise ValueError(f"unknown fusion strategy {self.fusion!r}")
        if isinstance(self.ftm_channels, int):
            self.ftm_channels = (self.ftm_channels,) * 3
        elif self.ftm_channels is not None:
            self.ftm_channels = tuple(self.ftm_channels)
            if len(self.ftm_channels) != 3:
                raise ValueError("ftm_channels needs one width per branch")

    def branch_channels(self):
        """Widths of the three branch outputs entering fusion."""
        if not self.use_ftm:
            return self.stage_channels
        if self.ftm_channels is not None:
            return self.ftm_channels
        return tuple(max(c // 2, 1) for c in self.stage_channels)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        for key in ("stage_channels", "stage_depths", "ftm_channels"):
            if isinstance(raw.get(key), list):
                raw[key] = tuple(raw[key])
        return cls(**raw)


def toy_config(**overrides):
    """Small single-channel model that trains in minutes on a CPU."""
    base = dict(in_channels=1, stem_channels=4, stem_depth=0,
                stage_channels=(8, 16, 32), stage_depths=(1, 1, 1),
                block="plain", ftm_channels=(8, 8, 8), fusion="concat")
    base.update(overrides)
    return FFNetConfig(**base)


def tiny_config(**overrides):
    """Minimal full-structure model, small enough for finite differencing."""
    base = dict(in_channels=1, stem_channels=2, stem_depth=0,
                stage_channels=(2, 3, 4), stage_depths=(1, 1, 1),
                block="plain", ftm_channels=(2, 2, 2), ftm_n_kernels=2,
                ftm_reduction=2, fusion="concat")
    base.update(overrides)
    return FFNetConfig(**base)


def structural_config(**overrides):
    """Three-channel model matching the published large-backbone layout."""
    base = dict(in_channels=3, stem_channels=96, stem_depth=3,
                stage_channels=(192, 384, 768), stage_depths=(3, 9, 3),
                block="depthwise", ftm_channels=(96, 96, 96), ftm_n_kernels=1,
                ftm_kernel_size=1, ftm_reduction=16, fusion="concat")
    base.update(overrides)
    return FFNetConfig(**base)


class PlainBlock(L.Module):
    """conv3x3 -> relu -> batchnorm, width preserved."""

    def __init__(self, channels, rng, dtype=None):
        super().__init__()
        self.conv = L.Conv2d(channels, channels, 3, rng, padding=1, dtype=dtype)
        self.bn = L.BatchNorm2d(channels, dtype=dtype)

    def forward(self, x):
        return self.bn(T.relu(self.conv(x)))


class DepthwiseBlock(L.Module):
    """Inverted-bottleneck residual block: depthwise 7x7, channel norm,
    pointwise expand 4x, gelu, pointwise project, learned residual scale."""

    def __init__(self, channels, rng, dtype=None):
        super().__init__()
        dtype = dtype or T.default_dtype()
        self.dw = L.DepthwiseConv2d(channels, 7, rng, padding=3, dtype=dtype)
        self.norm = L.LayerNormChannels(channels, dtype=dtype)
        self.pw1 = L.Conv2d(channels, 4 * channels, 1, rng, dtype=dtype)
        self.pw2 = L.Conv2d(4 * channels, channels, 1, rng, dtype=dtype)
        self.scale = L.Param(np.full((1, channels, 1, 1), 1e-6, dtype=dtype), no_decay=True)

    def forward(self, x):
        y = self.pw2(T.gelu(self.pw1(self.norm(self.dw(x)))))
        return T.add(x, T.mul(y, self.scale))


def _make_block(kind, channels, rng, dtype):
    if kind == "plain":
        return PlainBlock(channels, rng, dtype=dtype)
    return DepthwiseBlock(channels, rng, dtype=dtype)


class PlainDown(L.Module):
    """conv2x2 stride 2 -> relu -> batchnorm."""

    def __init__(self, cin, cout, rng, dtype=None):
        super().__init__()
        self.conv = L.Conv2d(cin, cout, 2, rng, stride=2, dtype=dtype)
        self.bn = L.BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        return self.bn(T.relu(self.conv(x)))


class NormDown(L.Module):
    """Channel norm then conv2x2 stride 2."""

    def __init__(self, cin, cout, rng, dtype=None):
        super().__init__()
        self.norm = L.LayerNormChannels(cin, dtype=dtype)
        self.conv = L.Conv2d(cin, cout, 2, rng, stride=2, dtype=dtype)

    def forward(self, x):
        return self.conv(self.norm(x))


class Backbone(L.Module):
    """Strided feature extractor exporting maps at strides 8, 16, and 32."""

    def __init__(self, config, rng, dtype=None):
        super().__init__()
        c = config
        self.config = c
        self.stem = L.Conv2d(c.in_channels, c.stem_channels, 4, rng, stride=4, dtype=dtype)
        if c.block == "depthwise":
            self.stem_norm = L.LayerNormChannels(c.stem_channels, dtype=dtype)
        else:
            self.stem_norm = None
            self.stem_bn = L.BatchNorm2d(c.stem_channels, dtype=dtype)
        self.stem_blocks = L.ModuleList(
            [_make_block(c.block, c.stem_channels, rng, dtype) for _ in range(c.stem_depth)])
        downs, stages = [], []
        prev = c.stem_channels
        for width, depth in zip(c.stage_channels, c.stage_depths):
            if c.block == "depthwise":
                downs.append(NormDown(prev, width, rng, dtype=dtype))
            else:
                downs.append(PlainDown(prev, width, rng, dtype=dtype))
            stages.append(L.ModuleList(
                [_make_block(c.block, width, rng, dtype) for _ in range(depth)]))
            prev = width
        self.downs = L.ModuleList(downs)
        self.stages = L.ModuleList(stages)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (n, {self.config.in_channels}, h, w) input, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(f"input size must be divisible by 32, got {x.shape[2:]}")
        y = self.stem(x)
        if self.stem_norm is not None:
            y = self.stem_norm(y)
        else:
            y = self.stem_bn(T.relu(y))
        for block in self.stem_blocks:
            y = block(y)
        outs = []
        for down, stage in zip(self.downs, self.stages):
            y = down(y)
            for block in stage:
                y = block(y)
            outs.append(y)
        return tuple(outs)


class DynConvBlock(L.Module):
    """Dynamic convolution followed by relu and batchnorm."""

    def __init__(self, cin, cout, rng, config, dtype=None):
        super().__init__()
        self.conv = L.DynamicConv2d(
            cin, cout, rng, kernel_size=config.ftm_kernel_size,
            n_kernels=config.ftm_n_kernels, reduction=config.ftm_reduction,
            kernel_attention=config.kernel_attention, dtype=dtype)
        self.bn = L.BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        return self.bn(T.relu(self.conv(x)))


class FocusTransition(L.Module):
    """Channel gate, a two-rung residual ladder of dynamic convolution blocks,
    a channel-reducing tail, and a spatial gate.

    With ``ftm_outer_double`` the tail is two blocks deep; otherwise one.
    """

    def __init__(self, cin, cout, rng, config, dtype=None):
        super().__init__()
        self.channel_att = L.ChannelAttention(cin, rng, reduction=config.ftm_reduction,
                                              dtype=dtype)
        self.y1 = DynConvBlock(cin, cin, rng, config, dtype=dtype)
        self.y2 = DynConvBlock(cin, cin, rng, config, dtype=dtype)
        self.y3 = DynConvBlock(cin, cout, rng, config, dtype=dtype)
        self.y4 = DynConvBlock(cout, cout, rng, config, dtype=dtype) if config.ftm_outer_double else None
        self.spatial_att = L.SpatialAttention(rng, dtype=dtype)

    def forward(self, s):
        c = self.channel_att(s)
        a = T.add(self.y1(c), c)
        b = T.add(self.y2(a), a)
        p = self.y3(b)
        if self.y4 is not None:
            p = self.y4(p)
        return self.spatial_att(p)


class ConcatFusion(L.Module):
    """Upsample the deeper branches to the stride-8 grid with transposed
    convolutions and concatenate along channels."""

    def __init__(self, widths, rng, dtype=None):
        super().__init__()
        c1, c2, c3 = widths
        self.up2 = L.ConvTranspose2d(c2, c2, 2, rng, stride=2, dtype=dtype)
        self.up3 = L.ConvTranspose2d(c3, c3, 4, rng, stride=4, dtype=dtype)
        self.out_channels = c1 + c2 + c3
        self.branch_slices = (slice(0, c1), slice(c1, c1 + c2), slice(c1 + c2, c1 + c2 + c3))

    def aligned(self, p1, p2, p3):
        return [p1, self.up2(p2), self.up3(p3)]

    def forward(self, p1, p2, p3):
        return T.concat_channels(self.aligned(p1, p2, p3))


class AddFusion(L.Module):
    """Project every branch to the first branch's width, upsample, and sum."""

    def __init__(self, widths, rng, dtype=None):
        super().__init__()
        c1, c2, c3 = widths
        self.proj2 = L.Conv2d(c2, c1, 1, rng, dtype=dtype)
        self.proj3 = L.Conv2d(c3, c1, 1, rng, dtype=dtype)
        self.up2 = L.ConvTranspose2d(c1, c1, 2, rng, stride=2, dtype=dtype)
        self.up3 = L.ConvTranspose2d(c1, c1, 4, rng, stride=4, dtype=dtype)
        self.out_channels = c1

    def aligned(self, p1, p2, p3):
        return [p1, self.up2(self.proj2(p2)), self.up3(self.proj3(p3))]

    def forward(self, p1, p2, p3):
        a1, a2, a3 = self.aligned(p1, p2, p3)
        return T.add(T.add(a1, a2), a3)


class StepwiseFusion(L.Module):
    """Merge deepest-first: each branch is projected to the next shallower
    width, upsampled by 2, and added, walking back to the stride-8 grid."""

    def __init__(self, widths, rng, dtype=None):
        super().__init__()
        c1, c2, c3 = widths
        self.proj32 = L.Conv2d(c3, c2, 1, rng, dtype=dtype)
        self.up32 = L.ConvTranspose2d(c2, c2, 2, rng, stride=2, dtype=dtype)
        self.proj21 = L.Conv2d(c2, c1, 1, rng, dtype=dtype)
        self.up21 = L.ConvTranspose2d(c1, c1, 2, rng, stride=2, dtype=dtype)
        self.out_channels = c1

    def forward(self, p1, p2, p3):
        t2 = T.add(p2, self.up32(self.proj32(p3)))
        t1 = T.add(p1, self.up21(self.proj21(t2)))
        return t1


_FUSIONS = {"concat": ConcatFusion, "add": AddFusion, "stepwise": StepwiseFusion}


class FFNet(L.Module):
    """Backbone, optional focus transitions, fusion, and a density head."""

    def __init__(self, config, seed=0, dtype=None):
        super().__init__()
        rng = np.random.default_rng(seed)
        dtype = dtype or T.default_dtype()
        self.config = config
        self.backbone = Backbone(config, rng, dtype=dtype)
        widths = config.branch_channels()
        if config.use_ftm:
            self.ftms = L.ModuleList([
                FocusTransition(cin, cout, rng, config, dtype=dtype)
                for cin, cout in zip(config.stage_channels, widths)])
        else:
            self.ftms = None
        self.fusion = _FUSIONS[config.fusion](widths, rng, dtype=dtype)
        self.head = L.Conv2d(self.fusion.out_channels, 1, 1, rng, dtype=dtype)
        # Start the head slightly positive so the output relu passes gradient.
        self.head.bias.data[...] = 0.05

    def forward_features(self, x):
        s1, s2, s3 = self.backbone(x)
        if self.ftms is not None:
            p1, p2, p3 = (self.ftms[0](s1), self.ftms[1](s2), self.ftms[2](s3))
        else:
            p1, p2, p3 = s1, s2, s3
        fused = self.fusion(p1, p2, p3)
        density = T.relu(self.head(fused))
        return {"stages": (s1, s2, s3), "branches": (p1, p2, p3),
                "fused": fused, "density": density}

    def forward(self, x):
        return self.forward_features(x)["density"]

    def predict_density(self, image):
        """Density map for a single (h, w) or (1, h, w) image, without autodiff."""
        arr = np.asarray(image)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(f"expected one image, got shape {arr.shape}")
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                out = self.forward(T.Tensor(arr[None]))
        finally:
            self.train(was_training)
        return out.data[0, 0]


def build_model(config, seed=0, dtype=None):
    return FFNet(config, seed=seed, dtype=dtype)


def count_parameters(model):
    return sum(p.size for p in model.parameters())
