"""LEFormer: parallel CNN and Transformer pyramids fused per stage, plus an all-MLP decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from . import functional as F
from .nn import Builder, Conv2d, DWSeparableConv, Initializer, LayerNorm, Linear, Module, ParamStore, count_params
from .tensor import ShapeError, Tensor, concat


@dataclass(frozen=True)
class StageConfig:
    """Per-stage kernel/stride/padding, width, attention reduction, heads and depth."""

    K: int
    S: int
    P: int
    C: int
    R: int
    N: int
    L: int

    def __post_init__(self):
        if self.C % self.N:
            raise ValueError(f"channels {self.C} not divisible by heads {self.N}")
        if min(self.K, self.S, self.C, self.R, self.N) < 1 or self.P < 0 or self.L < 0:
            raise ValueError(f"invalid stage settings {self}")


DEFAULT_STAGES = (
    StageConfig(K=7, S=4, P=3, C=32, R=8, N=1, L=2),
    StageConfig(K=3, S=2, P=1, C=64, R=4, N=2, L=2),
    StageConfig(K=3, S=2, P=1, C=160, R=2, N=5, L=2),
    StageConfig(K=3, S=2, P=1, C=192, R=1, N=6, L=3),
)


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple = DEFAULT_STAGES
    num_classes: int = 2
    in_channels: int = 3
    ptl_stages: int = 1
    decoder_dim: int = 184
    cbam_reduction: int = 16
    msca_group_width: int = 8
    mlp_ratio: int = 4
    width_multiplier: Fraction = Fraction(1)
    use_ce: bool = True
    use_msca: bool = True
    use_te: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "width_multiplier", Fraction(self.width_multiplier))
        if len(self.stages) != 4:
            raise ValueError("exactly four stages are required")
        if not 0 <= self.ptl_stages <= 4:
            raise ValueError(f"ptl_stages must be in [0, 4], got {self.ptl_stages}")
        if not (self.use_ce or self.use_te):
            raise ValueError("at least one encoder branch must be enabled")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        for name in ("num_classes", "in_channels", "decoder_dim", "cbam_reduction", "msca_group_width", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        return cls(width_multiplier=Fraction(1, 8), **overrides)

    def channels(self) -> tuple:
        """Stage widths after the width multiplier, rounded up to a multiple of the head count."""
        out = []
        for st in self.stages:
            c = max(1, math.ceil(st.C * self.width_multiplier))
            out.append(-(-c // st.N) * st.N)
        return tuple(out)

    def decoder_width(self) -> int:
        return max(1, math.ceil(self.decoder_dim * self.width_multiplier))

    def resolved_stages(self) -> tuple:
        return tuple(replace(st, C=c) for st, c in zip(self.stages, self.channels()))

    def block_kind(self, i: int) -> str:
        """'PTL' or 'ETL' for 0-based stage index ``i``."""
        return "PTL" if i < self.ptl_stages else "ETL"

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def msca_groups(channels: int, group_width: int) -> int:
    return channels // math.gcd(channels, group_width)


def cbam_hidden(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


# ----------------------------------------------------------------------------
# CNN encoder
# ----------------------------------------------------------------------------

class CBAM(Module):
    """Channel attention (shared MLP over avg/max pooled features) then 7x7 spatial attention."""

    def __init__(self, b: Builder, name: str, channels: int, reduction: int):
        if channels < reduction:
            raise ValueError(f"CBAM channels {channels} smaller than reduction ratio {reduction}")
        s = b.scope(name)
        hidden = cbam_hidden(channels, reduction)
        self.fc1 = Linear(s, "mlp/fc1", channels, hidden, bias=False)
        self.fc2 = Linear(s, "mlp/fc2", hidden, channels, bias=False)
        self.spatial = Conv2d(s, "spatial", 2, 1, 7, padding=3)

    def _mlp(self, v: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(v)))

    def channel_attention(self, x: Tensor) -> Tensor:
        bsz, c = x.shape[:2]
        a = self._mlp(x.mean(axis=(2, 3))) + self._mlp(x.max(axis=(2, 3)))
        return F.sigmoid(a).reshape(bsz, c, 1, 1)

    def spatial_attention(self, x: Tensor) -> Tensor:
        pooled = concat([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
        return F.sigmoid(self.spatial(pooled))

    def forward(self, x: Tensor) -> Tensor:
        x = x * self.channel_attention(x)
        return x * self.spatial_attention(x)


class MSCA(Module):
    """Dilated 3x3 branches (rates 1-4) concatenated, reweighted by CBAM, projected back, residual."""

    RATES = (1, 2, 3, 4)

    def __init__(self, b: Builder, name: str, channels: int, cbam_reduction: int, group_width: int):
        s = b.scope(name)
        self.channels = channels
        groups = msca_groups(channels, group_width)
        self.branches = [Conv2d(s, f"branch{d}", channels, channels, 3, padding=d, dilation=d, groups=groups)
                         for d in self.RATES]
        self.cbam = CBAM(s, "cbam", len(self.RATES) * channels, cbam_reduction)
        self.proj = Conv2d(s, "proj", len(self.RATES) * channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"MSCA expects {self.channels} channels, got {x.shape[1]}")
        multi = concat([br(x) for br in self.branches], axis=1)
        return x + self.proj(self.cbam(multi))


class CEStage(Module):
    def __init__(self, b: Builder, name: str, cin: int, st: StageConfig, cfg: ModelConfig):
        s = b.scope(name)
        self.down = DWSeparableConv(s, "dw", cin, st.C, st.K, st.S, st.P)
        self.msca = MSCA(s, "msca", st.C, cfg.cbam_reduction, cfg.msca_group_width) if cfg.use_msca else None

    def forward(self, x: Tensor) -> Tensor:
        x = F.gelu(self.down(x))
        return self.msca(x) if self.msca is not None else x


# ----------------------------------------------------------------------------
# Transformer encoder
# ----------------------------------------------------------------------------

class EfficientSelfAttention(Module):
    """Multi-head attention whose keys/values come from an RxR strided-conv reduced sequence."""

    def __init__(self, b: Builder, name: str, dim: int, heads: int, reduction: int):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        s = b.scope(name)
        self.dim, self.heads, self.reduction = dim, heads, reduction
        self.scale = (dim // heads) ** -0.5
        self.q = Linear(s, "q", dim, dim)
        self.k = Linear(s, "k", dim, dim)
        self.v = Linear(s, "v", dim, dim)
        self.proj = Linear(s, "proj", dim, dim)
        if reduction > 1:
            self.sr = Conv2d(s, "sr", dim, dim, reduction, stride=reduction)
            self.sr_norm = LayerNorm(s, "sr_norm", dim)
        else:
            self.sr = self.sr_norm = None
        self.keep_attention = False
        self.last_attention = None

    def _heads(self, t: Tensor) -> Tensor:
        bsz, n, _ = t.shape
        return t.reshape(bsz, n, self.heads, self.dim // self.heads).permute(0, 2, 1, 3)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        bsz, n, c = x.shape
        if n != h * w:
            raise ShapeError(f"sequence length {n} != {h}x{w}")
        if c != self.dim:
            raise ShapeError(f"attention expects {self.dim} channels, got {c}")
        if h % self.reduction or w % self.reduction:
            raise ShapeError(f"spatial size {h}x{w} not divisible by reduction ratio {self.reduction}")
        q = self._heads(self.q(x))
        kv_src = x
        if self.sr is not None:
            kv_src = self.sr_norm(F.map_to_seq(self.sr(F.seq_to_map(x, h, w))))
        k = self._heads(self.k(kv_src))
        v = self._heads(self.v(kv_src))
        attn = F.softmax((q * self.scale) @ k.transpose(2, 3), axis=-1)
        if self.keep_attention:
            self.last_attention = attn.data
        out = (attn @ v).permute(0, 2, 1, 3).reshape(bsz, n, c)
        return self.proj(out)


class MixFFN(Module):
    """Position-wise expand, depthwise 3x3 conv, GELU, project back; ``forward`` adds the input."""

    def __init__(self, b: Builder, name: str, dim: int, mlp_ratio: int):
        s = b.scope(name)
        hidden = dim * mlp_ratio
        self.fc1 = Linear(s, "fc1", dim, hidden)
        self.dw = Conv2d(s, "dw", hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = Linear(s, "fc2", hidden, dim)

    def body(self, x: Tensor, h: int, w: int) -> Tensor:
        if x.shape[1] != h * w:
            raise ShapeError(f"sequence length {x.shape[1]} != {h}x{w}")
        y = self.dw(F.seq_to_map(self.fc1(x), h, w))
        return self.fc2(F.gelu(F.map_to_seq(y)))

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        return x + self.body(x, h, w)


class PoolMixer(Module):
    """Token mixer pool(x) - x with a 3x3 stride-1 average that ignores padded taps."""

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        m = F.seq_to_map(x, h, w)
        return F.map_to_seq(F.pool2d("avg", m, 3, 1, 1, count_include_pad=False) - m)


class ETLBlock(Module):
    def __init__(self, b: Builder, name: str, st: StageConfig, mlp_ratio: int):
        s = b.scope(name)
        self.norm1 = LayerNorm(s, "norm1", st.C)
        self.attn = EfficientSelfAttention(s, "attn", st.C, st.N, st.R)
        self.norm2 = LayerNorm(s, "norm2", st.C)
        self.ffn = MixFFN(s, "ffn", st.C, mlp_ratio)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.ffn.body(self.norm2(x), h, w)


class PTLBlock(Module):
    def __init__(self, b: Builder, name: str, st: StageConfig, mlp_ratio: int):
        s = b.scope(name)
        self.norm1 = LayerNorm(s, "norm1", st.C)
        self.mixer = PoolMixer()
        self.norm2 = LayerNorm(s, "norm2", st.C)
        self.ffn = MixFFN(s, "ffn", st.C, mlp_ratio)

    def forward(self, x: Tensor, h: int, w: int) -> Tensor:
        x = x + self.mixer(self.norm1(x), h, w)
        return x + self.ffn.body(self.norm2(x), h, w)


class TEStage(Module):
    """Overlapped patch merging (strided conv + LayerNorm), L blocks, final LayerNorm."""

    def __init__(self, b: Builder, name: str, cin: int, st: StageConfig, block_kind: str, mlp_ratio: int):
        if block_kind not in ("ETL", "PTL"):
            raise ValueError(f"unknown block kind {block_kind!r}")
        s = b.scope(name)
        self.block_kind = block_kind
        self.patch_embed = Conv2d(s, "patch_embed", cin, st.C, st.K, st.S, st.P)
        self.embed_norm = LayerNorm(s, "embed_norm", st.C)
        cls = ETLBlock if block_kind == "ETL" else PTLBlock
        self.blocks = [cls(s, f"block{j}", st, mlp_ratio) for j in range(st.L)]
        self.norm = LayerNorm(s, "norm", st.C)

    def forward(self, x: Tensor):
        """Map in, ``(sequence, h, w)`` out."""
        y = self.patch_embed(x)
        h, w = y.shape[2:]
        seq = self.embed_norm(F.map_to_seq(y))
        for blk in self.blocks:
            seq = blk(seq, h, w)
        return self.norm(seq), h, w


# ----------------------------------------------------------------------------
# fusion and decoding
# ----------------------------------------------------------------------------

class CrossEncoderFusion(Module):
    """Concatenate [TE map, CE map] and fuse with a pointwise conv + GELU."""

    def __init__(self, b: Builder, name: str, channels: int):
        self.channels = channels
        self.fuse = Conv2d(b.scope(name), "fuse", 2 * channels, channels, 1)

    def forward(self, ce_map: Tensor, te_seq: Tensor) -> Tensor:
        bsz, c, h, w = ce_map.shape
        if c != self.channels or te_seq.shape != (bsz, h * w, c):
            raise ShapeError(f"CEF stage mismatch: CE map {ce_map.shape}, TE sequence {te_seq.shape}")
        te_map = F.seq_to_map(te_seq, h, w)
        return F.gelu(self.fuse(concat([te_map, ce_map], axis=1)))


class Decoder(Module):
    """Per-stage 1x1 projection, upsample to stride 4, concat, 1x1 fuse + GELU, 1x1 classifier."""

    def __init__(self, b: Builder, name: str, in_channels, dim: int, num_classes: int):
        s = b.scope(name)
        self.in_channels = tuple(in_channels)
        self.proj = [Conv2d(s, f"proj{i + 1}", c, dim, 1) for i, c in enumerate(self.in_channels)]
        self.fuse = Conv2d(s, "fuse", len(self.in_channels) * dim, dim, 1)
        self.classifier = Conv2d(s, "classifier", dim, num_classes, 1)

    def forward(self, feats, out_size) -> Tensor:
        if len(feats) != len(self.proj):
            raise ShapeError(f"decoder expects {len(self.proj)} stage maps, got {len(feats)}")
        base = feats[0].shape[2:]
        ups = []
        for i, (f, p) in enumerate(zip(feats, self.proj)):
            if f.shape[1] != self.in_channels[i] or f.shape[0] != feats[0].shape[0]:
                raise ShapeError(f"decoder stage {i + 1} got shape {f.shape}")
            ups.append(F.upsample_bilinear(p(f), base))
        y = F.gelu(self.fuse(concat(ups, axis=1)))
        return F.upsample_bilinear(self.classifier(y), out_size)


class LEFormer(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg = cfg if cfg is not None else ModelConfig()
        self.params = ParamStore()
        root = Builder(self.params, Initializer(seed), dtype)
        stages = cfg.resolved_stages()
        self.stages = stages
        chans = [st.C for st in stages]
        self.ce = []
        self.te = []
        cin = cfg.in_channels
        for i, st in enumerate(stages):
            if cfg.use_ce:
                self.ce.append(CEStage(root.scope("ce"), f"stage{i + 1}", cin, st, cfg))
            if cfg.use_te:
                self.te.append(TEStage(root.scope("te"), f"stage{i + 1}", cin, st, cfg.block_kind(i), cfg.mlp_ratio))
            cin = st.C
        self.cef = ([CrossEncoderFusion(root.scope("cef"), f"stage{i + 1}", c) for i, c in enumerate(chans)]
                    if cfg.use_ce and cfg.use_te else [])
        self.decoder = Decoder(root, "decoder", chans, cfg.decoder_width(), cfg.num_classes)

    @property
    def num_params(self) -> int:
        return count_params(self.params)

    def _check_input(self, image: Tensor) -> None:
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (B, {self.cfg.in_channels}, H, W) image, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input size {h}x{w} is not divisible by 32")

    def encode(self, image: Tensor) -> dict:
        """Per-stage outputs: ``ce`` maps, ``te`` maps and the ``fused`` maps fed to the decoder."""
        self._check_input(image)
        ce_maps, te_maps, te_seqs = [], [], []
        x = image
        for stage in self.ce:
            x = stage(x)
            ce_maps.append(x)
        x = image
        for stage in self.te:
            seq, h, w = stage(x)
            x = F.seq_to_map(seq, h, w)
            te_seqs.append(seq)
            te_maps.append(x)
        if self.cef:
            fused = [f(c, t) for f, c, t in zip(self.cef, ce_maps, te_seqs)]
        else:
            fused = ce_maps or te_maps
        return {"ce": ce_maps, "te": te_maps, "fused": fused}

    def forward(self, image: Tensor) -> Tensor:
        """Image batch (B, 3, H, W) -> class logits (B, num_classes, H, W)."""
        feats = self.encode(image)
        return self.decoder(feats["fused"], image.shape[2:])
