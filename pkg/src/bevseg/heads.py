"""Segmentation heads and the deformable cross-attention fusion layer.

Two heads share one contract: features (N, C_in, input_side, input_side) in,
logits (N, num_classes, output_side, output_side) out, no activation on the
logits.  The U-Net variant resizes first, runs a two-level encoder/decoder
with skip connections, and bottoms out at output_side/4 with 256 channels at
the full-size defaults.  The vanilla variant is the single-scale baseline:
resize, two conv-norm-relu blocks, 1x1 classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bevseg.autodiff import ops
from bevseg.autodiff.modules import BatchNorm2d, Conv2d, ConvBnRelu, ConvTranspose2d, Linear, Module
from bevseg.autodiff.tensor import Tensor
from bevseg.errors import ConfigError

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class HeadConfig:
    variant: str = "unet"  # "unet" | "vanilla"
    in_channels: int = 256
    base_channels: int = 64
    num_classes: int = 7
    input_side: int = 128
    output_side: int = 200
    # (enc1, enc2, bottleneck) widths; None derives (C, 2C, 4C) from base_channels
    channel_schedule: tuple | None = None
    # Default decoder: transposed convs keep their channel count and the
    # bottleneck reaches its width in one conv.  The wider textbook variant
    # (halving upconvs, paired bottleneck convs) is available via these flags.
    upconv_keep_channels: bool = True
    bottleneck_pair: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in ("unet", "vanilla"):
            raise ConfigError(f"unknown head variant {self.variant!r}")
        for name in ("in_channels", "base_channels", "num_classes", "input_side", "output_side"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.channel_schedule is not None:
            if len(self.channel_schedule) != 3:
                raise ConfigError("channel_schedule must list (enc1, enc2, bottleneck) widths")
            if any(c < 1 for c in self.channel_schedule):
                raise ConfigError("channel_schedule widths must be positive")
        if self.output_side < 4:
            raise ConfigError("output_side must allow two pooling levels")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def schedule(self) -> tuple[int, int, int]:
        if self.channel_schedule is not None:
            return tuple(self.channel_schedule)
        c = self.base_channels
        return (c, 2 * c, 4 * c)

    # -- presets ------------------------------------------------------------
    @classmethod
    def paper_unet(cls) -> "HeadConfig":
        return cls(variant="unet", in_channels=256, base_channels=64)

    @classmethod
    def paper_vanilla(cls) -> "HeadConfig":
        return cls(variant="vanilla", in_channels=256, base_channels=256)

    @classmethod
    def toy_unet(cls, in_channels: int = 4, base_channels: int = 16) -> "HeadConfig":
        return cls(variant="unet", in_channels=in_channels, base_channels=base_channels,
                   input_side=32, output_side=50)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["channel_schedule"] = list(self.channel_schedule) if self.channel_schedule else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        d = dict(d)
        if d.get("channel_schedule") is not None:
            d["channel_schedule"] = tuple(d["channel_schedule"])
        return cls(**d)


def _pool_sizes(side: int) -> tuple[int, int]:
    return side // 2, side // 4


class UNetHead(Module):
    """Two-level encoder/decoder with skip connections.

    Layout (paper preset, 128 -> 200):

       resize -> proj 1x1 -> enc1 (two 3x3) -> pool -> enc2 (two 3x3) -> pool
       -> bottleneck -> upconv -> cat(enc2) -> dec1 (two 3x3) -> upconv
       -> cat(enc1) -> dec2 (two 3x3) -> 1x1 classifier

    Odd intermediate extents (e.g. 50 -> 25) are handled by floor-mode
    pooling on the way down and output padding on the way up, so any
    output_side >= 4 works.
    """

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        if cfg.variant != "unet":
            raise ConfigError("UNetHead needs a unet-variant config")
        self.cfg = cfg
        dt = cfg.np_dtype
        c1, c2, cb = cfg.schedule()
        up1_out = cb if cfg.upconv_keep_channels else c2
        up2_out = c2 if cfg.upconv_keep_channels else c1

        self.proj = Conv2d(cfg.in_channels, c1, 1, rng=rng, dtype=dt)
        self.enc1 = [ConvBnRelu(c1, c1, rng=rng, dtype=dt), ConvBnRelu(c1, c1, rng=rng, dtype=dt)]
        self.enc2 = [ConvBnRelu(c1, c2, rng=rng, dtype=dt), ConvBnRelu(c2, c2, rng=rng, dtype=dt)]
        if cfg.bottleneck_pair:
            self.bottleneck = [ConvBnRelu(c2, cb, rng=rng, dtype=dt), ConvBnRelu(cb, cb, rng=rng, dtype=dt)]
        else:
            self.bottleneck = [ConvBnRelu(c2, cb, rng=rng, dtype=dt)]
        self.up1 = ConvTranspose2d(cb, up1_out, 2, stride=2, rng=rng, dtype=dt)
        self.dec1 = [ConvBnRelu(up1_out + c2, c2, rng=rng, dtype=dt), ConvBnRelu(c2, c2, rng=rng, dtype=dt)]
        self.up2 = ConvTranspose2d(c2, up2_out, 2, stride=2, rng=rng, dtype=dt)
        self.dec2 = [ConvBnRelu(up2_out + c1, c1, rng=rng, dtype=dt), ConvBnRelu(c1, c1, rng=rng, dtype=dt)]
        self.final = Conv2d(c1, cfg.num_classes, 1, rng=rng, dtype=dt)

    def forward(self, x, training: bool = False):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ConfigError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        s0 = cfg.output_side
        s1, s2 = _pool_sizes(s0)

        h = ops.bilinear_resize(x, s0, s0)
        h = self.proj(h, training)
        for blk in self.enc1:
            h = blk(h, training)
        skip1 = h                                   # (N, c1, s0, s0)
        h = ops.maxpool2d(h, floor_odd=True)
        for blk in self.enc2:
            h = blk(h, training)
        skip2 = h                                   # (N, c2, s1, s1)
        h = ops.maxpool2d(h, floor_odd=True)         # (N, c2, s2, s2)
        for blk in self.bottleneck:
            h = blk(h, training)

        h = ops.conv_transpose2d(h, self.up1.weight, self.up1.bias, stride=2,
                                 output_padding=s1 - 2 * s2)
        h = ops.concat_channels(h, skip2)
        for blk in self.dec1:
            h = blk(h, training)
        h = ops.conv_transpose2d(h, self.up2.weight, self.up2.bias, stride=2,
                                 output_padding=s0 - 2 * s1)
        h = ops.concat_channels(h, skip1)
        for blk in self.dec2:
            h = blk(h, training)
        return self.final(h, training)

    def describe(self) -> str:
        cfg = self.cfg
        c1, c2, cb = cfg.schedule()
        s0 = cfg.output_side
        s1, s2 = _pool_sizes(s0)
        up1_out = cb if cfg.upconv_keep_channels else c2
        up2_out = c2 if cfg.upconv_keep_channels else c1
        rows = [
            ("resize", cfg.in_channels, cfg.in_channels, f"{cfg.input_side}->{s0}"),
            ("proj 1x1", cfg.in_channels, c1, f"{s0}"),
            ("enc1 3x3 x2", c1, c1, f"{s0}"),
            ("maxpool", c1, c1, f"{s0}->{s1}"),
            ("enc2 3x3 x2", c1, c2, f"{s1}"),
            ("maxpool", c2, c2, f"{s1}->{s2}"),
            (f"bottleneck 3x3 x{len(self.bottleneck)}", c2, cb, f"{s2}"),
            ("upconv 2x2", cb, up1_out, f"{s2}->{s1}"),
            ("dec1 3x3 x2 (cat skip)", up1_out + c2, c2, f"{s1}"),
            ("upconv 2x2", c2, up2_out, f"{s1}->{s0}"),
            ("dec2 3x3 x2 (cat skip)", up2_out + c1, c1, f"{s0}"),
            ("classifier 1x1", c1, cfg.num_classes, f"{s0}"),
        ]
        lines = [f"UNetHead schedule (base {cfg.base_channels}, {self.param_count():,} params):"]
        for name, ci, co, sp in rows:
            lines.append(f"  {name:<26} {ci:>4} -> {co:<4} @ {sp}")
        return "\n".join(lines)


class VanillaHead(Module):
    """Single-scale baseline: resize, two conv-norm-relu blocks, classifier."""

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator):
        if cfg.variant != "vanilla":
            raise ConfigError("VanillaHead needs a vanilla-variant config")
        self.cfg = cfg
        dt = cfg.np_dtype
        w = cfg.base_channels
        self.block1 = ConvBnRelu(cfg.in_channels, w, rng=rng, dtype=dt)
        self.block2 = ConvBnRelu(w, w, rng=rng, dtype=dt)
        self.final = Conv2d(w, cfg.num_classes, 1, rng=rng, dtype=dt)

    def forward(self, x, training: bool = False):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ConfigError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
        h = ops.bilinear_resize(x, cfg.output_side, cfg.output_side)
        h = self.block1(h, training)
        h = self.block2(h, training)
        return self.final(h, training)

    def describe(self) -> str:
        cfg = self.cfg
        w = cfg.base_channels
        lines = [f"VanillaHead schedule (width {w}, {self.param_count():,} params):",
                 f"  resize                     {cfg.in_channels:>4} -> {cfg.in_channels:<4} @ {cfg.input_side}->{cfg.output_side}",
                 f"  conv 3x3 + bn + relu       {cfg.in_channels:>4} -> {w:<4} @ {cfg.output_side}",
                 f"  conv 3x3 + bn + relu       {w:>4} -> {w:<4} @ {cfg.output_side}",
                 f"  classifier 1x1             {w:>4} -> {cfg.num_classes:<4} @ {cfg.output_side}"]
        return "\n".join(lines)


def build_head(cfg: HeadConfig, rng: np.random.Generator | None = None) -> Module:
    rng = rng or np.random.default_rng(0)
    return UNetHead(cfg, rng) if cfg.variant == "unet" else VanillaHead(cfg, rng)


def head_forward(model: Module, features: Tensor, training: bool = False) -> Tensor:
    return model(features, training=training)


def param_count(model: Module) -> int:
    return model.param_count()


def param_breakdown(model: Module) -> list[tuple[str, tuple, int]]:
    return [(name, p.shape, p.size) for name, p in model.named_parameters()]


# ---------------------------------------------------------------------------
# residual fusion block


class ResidualFusionBlock(Module):
    """conv-bn-relu -> conv-bn plus identity skip; no activation after the add.

    Zero-initialized convolutions therefore reduce the block to an exact
    identity, which is the safe starting point when bolting fusion onto an
    already-working pipeline.
    """

    def __init__(self, channels: int, *, rng: np.random.Generator, dtype=np.float32, zero_init: bool = False):
        self.conv1 = Conv2d(channels, channels, 3, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(channels, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(channels, dtype=dtype)
        if zero_init:
            self.conv1.weight.data[:] = 0.0
            self.conv2.weight.data[:] = 0.0

    def forward(self, x, training: bool = False):
        h = ops.relu(self.bn1(self.conv1(x, training), training))
        h = self.bn2(self.conv2(h, training), training)
        return ops.add(h, x)


def residual_fusion_block(features: Tensor, block: ResidualFusionBlock, training: bool = False) -> Tensor:
    return block(features, training=training)


# ---------------------------------------------------------------------------
# multi-modal deformable cross-attention (MDCA)


@dataclass
class MdcaConfig:
    heads: int = 4
    modalities: int = 2
    sample_points: int = 4
    model_dim: int = 64
    # (height, width) of each modality feature map, length == modalities
    feature_extents: tuple = ((128, 128), (128, 128))

    def __post_init__(self):
        if self.heads < 1 or self.modalities < 1 or self.sample_points < 1:
            raise ConfigError("heads, modalities, and sample_points must be >= 1")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if len(self.feature_extents) != self.modalities:
            raise ConfigError("feature_extents must list one (H, W) per modality")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["feature_extents"] = [list(e) for e in self.feature_extents]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MdcaConfig":
        d = dict(d)
        d["feature_extents"] = tuple(tuple(e) for e in d["feature_extents"])
        return cls(**d)


def _selector(total: int, cols: np.ndarray, dtype) -> np.ndarray:
    """0/1 matrix picking ``cols`` (in order) out of a ``total``-wide row."""
    s = np.zeros((total, len(cols)), dtype=dtype)
    s[cols, np.arange(len(cols))] = 1.0
    return s


class MdcaFusion(Module):
    """Deformable cross-attention over multiple modality feature maps.

    For each query, a single linear map produces sampling offsets (in
    normalized [0,1] coordinates, layout modality-major) and another produces
    attention logits (layout head-major, softmaxed over the
    modalities x points samples of each head).  Every sample bilinearly reads
    its modality map at the scaled location, is projected by that
    (head, modality)'s value matrix, attention-weighted, summed, and finally
    output-projected per head (the per-head output maps are fused into one
    matrix acting on the concatenated head results).
    """

    def __init__(self, cfg: MdcaConfig, modality_channels: list[int], *,
                 rng: np.random.Generator, dtype=np.float32):
        if len(modality_channels) != cfg.modalities:
            raise ConfigError("modality_channels must list one channel count per modality")
        self.cfg = cfg
        self.modality_channels = list(modality_channels)
        h, m, k, d = cfg.heads, cfg.modalities, cfg.sample_points, cfg.model_dim
        dh = cfg.head_dim

        # offsets: query -> (m, h, k, 2); start query-independent with a spread
        # of per-sample bias locations, like standard deformable attention
        self.offset_map = Linear(d, m * h * k * 2, rng=rng, dtype=dtype)
        self.offset_map.weight.data[:] = 0.0
        self.offset_map.bias.data[:] = rng.uniform(-0.1, 0.1, m * h * k * 2)
        # attention logits: query -> (h, m, k); zero weights = uniform attention
        self.attn_map = Linear(d, h * m * k, rng=rng, dtype=dtype)
        self.attn_map.weight.data[:] = 0.0
        self.attn_map.bias.data[:] = 0.0
        # per-(head, modality) value projections C_m -> head_dim
        for mi, cm in enumerate(modality_channels):
            w = rng.normal(0.0, np.sqrt(1.0 / cm), (h, cm, dh))
            setattr(self, f"value_proj_{mi}", Tensor(w, requires_grad=True, dtype=dtype))
        self.out_proj = Linear(d, d, rng=rng, dtype=dtype)

        mk = m * k
        idx_attn = np.arange(h * m * k).reshape(h, m, k)
        self._attn_sel = [
            _selector(h * mk, idx_attn[:, mi, :].reshape(-1), dtype) for mi in range(m)]
        idx_off = np.arange(m * h * k * 2).reshape(m, h * k * 2)
        self._off_sel = [_selector(m * h * k * 2, idx_off[mi], dtype) for mi in range(m)]

    def forward(self, x, training: bool = False):
        raise NotImplementedError("use mdca_forward(cfg, queries, features, reference_points, params)")

    def fuse(self, queries: Tensor, modality_features: list, reference_points: np.ndarray) -> Tensor:
        return mdca_forward(self.cfg, queries, modality_features, reference_points, self)


def mdca_forward(cfg: MdcaConfig, queries: Tensor, modality_features: list[Tensor],
                 reference_points: np.ndarray, params: MdcaFusion) -> Tensor:
    """Fuse modality features at deformed sampling locations around each query.

    ``queries`` (Q, d); ``modality_features[m]`` (C_m, H_m, W_m);
    ``reference_points`` (Q, 2) as (x, y) in [0, 1].  Returns (Q, d).
    """
    h, m, k, d = cfg.heads, cfg.modalities, cfg.sample_points, cfg.model_dim
    dh = cfg.head_dim
    if queries.ndim != 2 or queries.shape[1] != d:
        raise ConfigError(f"queries must be (Q, {d}), got {queries.shape}")
    if len(modality_features) != m:
        raise ConfigError(f"expected {m} modality feature maps, got {len(modality_features)}")
    refs = np.asarray(reference_points, dtype=np.float64)
    if refs.ndim != 2 or refs.shape[1] != 2 or refs.shape[0] != queries.shape[0]:
        raise ConfigError("reference_points must be (Q, 2) matching the queries")
    if refs.min() < 0.0 or refs.max() > 1.0:
        raise ConfigError("reference points must lie in [0, 1]^2")
    q = queries.shape[0]

    offsets = params.offset_map(queries)            # (Q, m*h*k*2), modality-major
    logits = params.attn_map(queries)               # (Q, h*m*k), head-major
    attn = ops.softmax(ops.reshape(logits, (q, h, m * k)), axis=-1)
    attn_flat = ops.reshape(attn, (q, h * m * k))

    fused = None
    for mi in range(m):
        feat = modality_features[mi]
        fh, fw = cfg.feature_extents[mi]
        if feat.shape != (params.modality_channels[mi], fh, fw):
            raise ConfigError(f"modality {mi} features {feat.shape} do not match config")
        # sampling points for this modality, ordered (head, query, point)
        off_m = ops.matmul(offsets, Tensor(params._off_sel[mi]))      # (Q, h*k*2)
        off_m = ops.transpose(ops.reshape(off_m, (q, h, k, 2)), (1, 0, 2, 3))
        refs_rep = np.broadcast_to(refs[None, :, None, :], (h, q, k, 2)).reshape(h * q * k, 2)
        pts_norm = ops.reshape(off_m, (h * q * k, 2)) + refs_rep
        scale = np.array([fw, fh], dtype=np.float64)
        pts_pix = ops.mul(pts_norm, scale) - np.array([0.5, 0.5])
        samples = ops.grid_sample(feat, pts_pix)                      # (h*q*k, C_m)
        values = ops.matmul(ops.reshape(samples, (h, q * k, params.modality_channels[mi])),
                            getattr(params, f"value_proj_{mi}"))      # (h, q*k, dh)
        # attention weights for this modality, same (head, query, point) order
        a_m = ops.matmul(attn_flat, Tensor(params._attn_sel[mi]))     # (Q, h*k)
        a_m = ops.transpose(ops.reshape(a_m, (q, h, k)), (1, 0, 2))   # (h, Q, k)
        weighted = ops.mul(values, ops.reshape(a_m, (h, q * k, 1)))
        part = ops.tsum(ops.reshape(weighted, (h * q, k, dh)), axis=1)  # (h*q, dh)
        fused = part if fused is None else fused + part

    fused = ops.transpose(ops.reshape(fused, (h, q, dh)), (1, 0, 2))  # (Q, h, dh)
    return params.out_proj(ops.reshape(fused, (q, d)))


class FusedModel(Module):
    """Small end-to-end fusion pipeline for smoke training.

    A learned query grid attends over the modality feature maps via MDCA;
    the fused features pass through a residual block and then a head.  The
    query grid side must equal the head config's input_side.
    """

    def __init__(self, mdca_cfg: MdcaConfig, head_cfg: HeadConfig, modality_channels: list[int],
                 *, rng: np.random.Generator):
        if head_cfg.in_channels != mdca_cfg.model_dim:
            raise ConfigError("head in_channels must equal the MDCA model_dim")
        self.mdca = MdcaFusion(mdca_cfg, modality_channels, rng=rng, dtype=head_cfg.np_dtype)
        side = head_cfg.input_side
        d = mdca_cfg.model_dim
        self.queries = Tensor(rng.normal(0.0, 0.5, (side * side, d)),
                              requires_grad=True, dtype=head_cfg.np_dtype)
        centers = (np.arange(side) + 0.5) / side
        gy, gx = np.meshgrid(centers, centers, indexing="ij")
        self.reference_points = np.stack([gx.ravel(), gy.ravel()], axis=1)
        self.res_block = ResidualFusionBlock(d, rng=rng, dtype=head_cfg.np_dtype)
        self.head = build_head(head_cfg, rng)
        self._side = side
        self._dim = d

    def forward(self, modality_features, training: bool = False):
        fused = self.mdca.fuse(self.queries, modality_features, self.reference_points)
        grid = ops.reshape(ops.transpose(fused, (1, 0)), (1, self._dim, self._side, self._side))
        grid = self.res_block(grid, training)
        return self.head(grid, training)
