"""The full network: toy backbone, pyramid encoder, context-query decoder,
spatial branch with boundary and direction heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import numerics as nx
from .attention import (
    Encodings,
    PyramidFeatures,
    SampleTrace,
    SparseAttentionParams,
    add_scale_encoding,
    grid_reference_points,
    pyramid_attention,
)
from .numerics import Module, Tensor, parameter


@dataclass
class EPTConfig:
    d_model: int = 256
    n_heads: int = 8
    d_head: int = 32
    n_points: int = 16
    n_levels: int = 3
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_dim: int = 2048
    dropout: float = 0.1
    direction_bins: int = 8
    strides: Tuple[int, ...] = (8, 16, 32)
    num_classes: int = 4
    stem_channels: Tuple[int, ...] = (32, 64)
    backbone_channels: Tuple[int, ...] = (64, 128, 256)
    spatial_channels: Tuple[int, ...] = (64, 128, 256)
    head_channels: int = 256

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.stem_channels = tuple(int(c) for c in self.stem_channels)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.spatial_channels = tuple(int(c) for c in self.spatial_channels)
        self.validate()

    def validate(self) -> None:
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(f"d_model {self.d_model} != n_heads * d_head ({self.n_heads}*{self.d_head})")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 for the 2-D sine encoding")
        if self.strides != (8, 16, 32):
            raise ValueError("the toy backbone emits strides (8, 16, 32)")
        if not 1 <= self.n_levels <= len(self.strides):
            raise ValueError(f"n_levels must be in [1, {len(self.strides)}]")
        if len(self.stem_channels) != 2 or len(self.backbone_channels) != 3 or len(self.spatial_channels) != 3:
            raise ValueError("expected 2 stem, 3 backbone and 3 spatial channel widths")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.num_classes < 1 or self.direction_bins < 1:
            raise ValueError("num_classes and direction_bins must be positive")

    @property
    def output_stride(self) -> int:
        return self.strides[0]

    def to_dict(self) -> dict:
        return asdict(self)


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _xavier(rng, fan_in, fan_out, shape):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# -- building blocks -------------------------------------------------------------

class Conv(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, bias=True, init="he"):
        self.stride, self.padding = stride, k // 2
        shape = (c_out, c_in, k, k)
        w = _he(rng, shape) if init == "he" else _xavier(rng, c_in * k * k, c_out, shape)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvBlock(Module):
    """Conv -> channel normalization -> ReLU.

    Layer norm over channels stands in for batch norm (batch sizes here are 1-4).
    """

    def __init__(self, c_in, c_out, k, rng, stride=1):
        self.conv = Conv(c_in, c_out, k, rng, stride=stride)
        self.gain = parameter(np.ones(c_out))
        self.shift = parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.relu(nx.channel_layer_norm(self.conv(x), self.gain, self.shift))


class Linear(Module):
    def __init__(self, d_in, d_out, rng):
        self.weight = parameter(_xavier(rng, d_in, d_out, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.matmul(x, self.weight) + self.bias


class Norm(Module):
    def __init__(self, d):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, d_model, ff_dim, dropout, rng):
        self.fc1 = Linear(d_model, ff_dim, rng)
        self.fc2 = Linear(ff_dim, d_model, rng)
        self.rate = dropout

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        h = nx.dropout(nx.relu(self.fc1(x)), self.rate, rng, self.training)
        return nx.dropout(self.fc2(h), self.rate, rng, self.training)


def tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    return tokens.transpose(1, 0).reshape(tokens.shape[1], h, w)


def map_to_tokens(fmap: Tensor) -> Tensor:
    c, h, w = fmap.shape
    return fmap.reshape(c, h * w).transpose(1, 0)


# -- backbone -------------------------------------------------------------------------

class ToyBackbone(Module):
    """Five stride-2 conv stages; the last three feed the pyramid at strides 8/16/32."""

    def __init__(self, cfg: EPTConfig, rng: np.random.Generator):
        s0, s1 = cfg.stem_channels
        c8, c16, c32 = cfg.backbone_channels
        self.stages = [
            ConvBlock(3, s0, 3, rng, stride=2),
            ConvBlock(s0, s1, 3, rng, stride=2),
            ConvBlock(s1, c8, 3, rng, stride=2),
            ConvBlock(c8, c16, 3, rng, stride=2),
            ConvBlock(c16, c32, 3, rng, stride=2),
        ]
        self.n_levels = cfg.n_levels
        self.strides = cfg.strides[:cfg.n_levels]
        widths = cfg.backbone_channels
        self.projections = [Conv(widths[i], cfg.d_model, 1, rng, init="xavier") for i in range(cfg.n_levels)]

    def __call__(self, image: Tensor) -> PyramidFeatures:
        _, h, w = image.shape
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} must be a multiple of 32")
        x = image
        feats = []
        last_stage = 2 + self.n_levels
        for i, stage in enumerate(self.stages[:last_stage]):
            x = stage(x)
            if i >= 2:
                feats.append(x)
        maps, shapes = [], []
        for proj, f in zip(self.projections, feats):
            p = proj(f)
            maps.append(map_to_tokens(p))
            shapes.append(p.shape[1:])
        return PyramidFeatures(maps, shapes, list(self.strides))


# -- transformer ------------------------------------------------------------------------

class EncoderLayer(Module):
    def __init__(self, cfg: EPTConfig, rng):
        self.attn = SparseAttentionParams(cfg.d_model, cfg.n_heads, cfg.d_head, cfg.n_points, cfg.n_levels, rng)
        self.norm1 = Norm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, cfg.dropout, rng)
        self.norm2 = Norm(cfg.d_model)
        self.rate = cfg.dropout

    def __call__(self, pyramid: PyramidFeatures, enc: Encodings, rng=None, trace=False):
        x = pyramid.tokens()
        queries = add_scale_encoding(pyramid, enc).tokens()
        res = pyramid_attention(queries, pyramid, pyramid.reference_points(), self.attn, trace=trace)
        res, tr = res if trace else (res, None)
        x = self.norm1(x + nx.dropout(res, self.rate, rng, self.training))
        x = self.norm2(x + self.ff(x, rng))
        return pyramid.split(x), tr


class DecoderLayer(Module):
    def __init__(self, cfg: EPTConfig, rng):
        self.self_attn = SparseAttentionParams(cfg.d_model, cfg.n_heads, cfg.d_head, cfg.n_points, 1, rng)
        self.norm1 = Norm(cfg.d_model)
        self.cross_attn = SparseAttentionParams(cfg.d_model, cfg.n_heads, cfg.d_head, cfg.n_points,
                                                cfg.n_levels, rng)
        self.norm2 = Norm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, cfg.dropout, rng)
        self.norm3 = Norm(cfg.d_model)
        self.rate = cfg.dropout

    def __call__(self, x: Tensor, grid: Tuple[int, int], memory: PyramidFeatures, enc: Encodings,
                 rng=None, trace=False):
        h, w = grid
        pos = enc.positional(h, w)
        ref = grid_reference_points(h, w)
        own = PyramidFeatures([x], [(h, w)])
        res = pyramid_attention(x + pos, own, ref, self.self_attn)
        x = self.norm1(x + nx.dropout(res, self.rate, rng, self.training))
        res = pyramid_attention(x + pos, memory, ref, self.cross_attn, trace=trace)
        res, tr = res if trace else (res, None)
        x = self.norm2(x + nx.dropout(res, self.rate, rng, self.training))
        x = self.norm3(x + self.ff(x, rng))
        return x, tr


class Encoder(Module):
    def __init__(self, cfg, rng):
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.encoder_layers)]

    def __call__(self, pyramid: PyramidFeatures, enc: Encodings, rng=None) -> Tensor:
        for layer in self.layers:
            pyramid, _ = layer(pyramid, enc, rng)
        return pyramid.tokens()


class Decoder(Module):
    def __init__(self, cfg, rng):
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.decoder_layers)]

    def __call__(self, queries: Tensor, grid, memory: PyramidFeatures, enc: Encodings, rng=None,
                 trace=False):
        if queries.shape[0] != grid[0] * grid[1]:
            raise ValueError(f"{queries.shape[0]} context queries for a {grid[0]}x{grid[1]} grid")
        traces = []
        for layer in self.layers:
            queries, tr = layer(queries, grid, memory, enc, rng, trace)
            traces.append(tr)
        return (queries, traces) if trace else queries


# -- spatial branch ---------------------------------------------------------------------------

class Head(Module):
    """1x1 conv block then a 1x1 classifier, upsampled to input resolution."""

    def __init__(self, c_in, hidden, c_out, rng):
        self.block = ConvBlock(c_in, hidden, 1, rng)
        self.classifier = Conv(hidden, c_out, 1, rng, init="xavier")

    def __call__(self, x: Tensor, factor: int) -> Tensor:
        return nx.upsample_bilinear(self.classifier(self.block(x)), factor)


class SpatialBranch(Module):
    def __init__(self, cfg: EPTConfig, rng):
        c1, c2, c3 = cfg.spatial_channels
        self.blocks = [
            ConvBlock(3, c1, 3, rng, stride=2),
            ConvBlock(c1, c2, 3, rng, stride=2),
            ConvBlock(c2, c3, 3, rng, stride=2),
        ]
        self.query_proj = Conv(c2, cfg.d_model, 1, rng, init="xavier")
        self.boundary_head = Head(c3, cfg.head_channels, 1, rng)
        self.direction_head = Head(c3, cfg.head_channels, cfg.direction_bins, rng)
        self.stride = cfg.output_stride

    def __call__(self, image: Tensor):
        _, h, w = image.shape
        if h % self.stride or w % self.stride:
            raise ValueError(f"image size {h}x{w} must be a multiple of {self.stride}")
        f1 = self.blocks[0](image)
        f2 = self.blocks[1](f1)
        f3 = self.blocks[2](f2)
        # intermediate (stride-4) feature pooled onto the stride-8 grid
        queries = map_to_tokens(nx.avg_pool2d(self.query_proj(f2), 2))
        return queries, self.boundary_head(f3, self.stride), self.direction_head(f3, self.stride)


# -- full model ------------------------------------------------------------------------------

@dataclass
class ModelOutput:
    seg_logits: Tensor
    boundary_logits: Tensor
    direction_logits: Tensor
    traces: List[SampleTrace] = field(default_factory=list)


class UNEPT(Module):
    def __init__(self, cfg: EPTConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone = ToyBackbone(cfg, rng)
        self.encodings = Encodings(cfg.n_levels, cfg.d_model, rng)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.spatial = SpatialBranch(cfg, rng)
        self.classifier = Conv(cfg.d_model, cfg.num_classes, 1, rng, init="xavier")

    def backbone_parameter_names(self) -> List[str]:
        return [n for n in self.parameters() if n.startswith("backbone.")]

    def __call__(self, image, rng: Optional[np.random.Generator] = None, trace: bool = False) -> ModelOutput:
        image = nx.as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"expected a 3 x H x W image, got {image.shape}")
        _, h, w = image.shape
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} must be a multiple of 32")
        if self.training and self.cfg.dropout > 0 and rng is None:
            raise ValueError("training-mode forward with dropout needs an rng")
        stride = self.cfg.output_stride
        grid = (h // stride, w // stride)

        pyramid = self.backbone(image)
        memory = pyramid.split(self.encoder(pyramid, self.encodings, rng))
        queries, boundary_logits, direction_logits = self.spatial(image)
        decoded = self.decoder(queries, grid, memory, self.encodings, rng, trace)
        decoded, traces = decoded if trace else (decoded, [])
        coarse = self.classifier(tokens_to_map(decoded, *grid))
        seg_logits = nx.upsample_bilinear(coarse, stride)
        return ModelOutput(seg_logits, boundary_logits, direction_logits, traces)
