"""Dense and sparse-sampling multi-head attention over pyramid features.

Conventions used throughout:

* tokens are rows: a map of shape H x W with d_model channels is stored as an
  (H*W) x d_model tensor in row-major pixel order;
* every coordinate pair is (y, x), row first;
* normalized reference points live in [0, 1]^2 and a normalized point ``r``
  maps to pixel ``r * (H, W) - 0.5`` on a given scale, so pixel centres
  round-trip exactly.

The dense path divides logits by sqrt(d_model) (``d_model`` and ``d_m`` are the
same width here). The sampled paths never rescale their logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .numerics import Module, Tensor, parameter


def _xavier(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# -- parameters ----------------------------------------------------------------

class DenseAttentionParams(Module):
    def __init__(self, d_model: int, n_heads: int, d_head: int, rng: np.random.Generator):
        self.d_model, self.n_heads, self.d_head = d_model, n_heads, d_head
        shape = (n_heads, d_model, d_head)
        self.w_q = parameter(_xavier(rng, shape, d_model, d_head))
        self.w_k = parameter(_xavier(rng, shape, d_model, d_head))
        self.w_v = parameter(_xavier(rng, shape, d_model, d_head))
        self.w_o = parameter(_xavier(rng, (n_heads * d_head, d_model), n_heads * d_head, d_model))


def ring_offsets(n_heads: int, n_levels: int, n_points: int) -> np.ndarray:
    """Initial sampling offsets, shape (M, L, N, 2).

    Points sit on rings of radius 1, 2, ... around the reference, eight
    directions per ring; each head's rings are rotated by a fraction of the
    angular step so heads start from distinct locations.
    """
    per_ring = min(n_points, 8)
    out = np.zeros((n_heads, n_levels, n_points, 2))
    for m in range(n_heads):
        twist = 2 * math.pi * m / (per_ring * n_heads)
        for n in range(n_points):
            angle = 2 * math.pi * (n % per_ring) / per_ring + twist
            radius = n // per_ring + 1
            out[m, :, n, 0] = -radius * math.sin(angle)
            out[m, :, n, 1] = radius * math.cos(angle)
    return out


class SparseAttentionParams(Module):
    """Per-head query/value projections plus the weight and offset projections.

    ``u_wts[m]`` maps a projected query to N*L logits and ``u_pos[m]`` to
    2*N*L offsets laid out as (level, point, (dy, dx)). ``pos_bias`` is the
    additive offset bias that holds the ring initialization.
    """

    def __init__(self, d_model: int, n_heads: int, d_head: int, n_points: int, n_levels: int,
                 rng: np.random.Generator):
        self.d_model, self.n_heads, self.d_head = d_model, n_heads, d_head
        self.n_points, self.n_levels = n_points, n_levels
        nl = n_points * n_levels
        self.w_q = parameter(_xavier(rng, (n_heads, d_model, d_head), d_model, d_head))
        self.w_v = parameter(_xavier(rng, (n_heads, d_model, d_head), d_model, d_head))
        # u_pos starts at zero so samples start on the ring; u_wts does not, or
        # nothing upstream of the query projection would see a gradient at step 0
        self.u_wts = parameter(_xavier(rng, (n_heads, d_head, nl), d_head, nl))
        self.u_pos = parameter(np.zeros((n_heads, d_head, 2 * nl)))
        self.pos_bias = parameter(ring_offsets(n_heads, n_levels, n_points).reshape(n_heads, 2 * nl))
        self.w_o = parameter(_xavier(rng, (n_heads * d_head, d_model), n_heads * d_head, d_model))


# -- pyramid containers --------------------------------------------------------

@dataclass
class PyramidFeatures:
    """Per-scale token maps, finest first."""

    maps: List[Tensor]
    shapes: List[Tuple[int, int]]
    strides: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.maps) != len(self.shapes):
            raise ValueError("one shape per map required")
        for t, (h, w) in zip(self.maps, self.shapes):
            if t.shape[0] != h * w:
                raise ValueError(f"map with {t.shape[0]} tokens does not match shape {h}x{w}")

    @property
    def n_levels(self) -> int:
        return len(self.maps)

    @property
    def total_length(self) -> int:
        return sum(h * w for h, w in self.shapes)

    @property
    def starts(self) -> np.ndarray:
        sizes = [h * w for h, w in self.shapes]
        return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)

    def tokens(self) -> Tensor:
        return self.maps[0] if len(self.maps) == 1 else nx.concat(self.maps, axis=0)

    def split(self, tokens: Tensor) -> "PyramidFeatures":
        """Cut a concatenated L_ms x d sequence back into per-scale maps."""
        maps, start = [], 0
        for h, w in self.shapes:
            maps.append(tokens[start:start + h * w])
            start += h * w
        return PyramidFeatures(maps, list(self.shapes), list(self.strides))

    def reference_points(self) -> np.ndarray:
        """Normalized pixel-centre coordinates of every token, L_ms x 2."""
        return np.concatenate([grid_reference_points(h, w) for h, w in self.shapes])


def grid_reference_points(h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([ys.ravel(), xs.ravel()], axis=1)


# -- encodings ------------------------------------------------------------------

def sine_positional_encoding(h: int, w: int, d_model: int) -> Tensor:
    """Fixed 2-D sine/cosine encoding, (h*w) x d_model.

    The first half of the channels encodes the row index and the second half
    the column index; within each half channels alternate sin, cos with
    frequencies 10000^(-2i / (d_model/2)).
    """
    if d_model % 4:
        raise ValueError(f"d_model must be divisible by 4, got {d_model}")
    half = d_model // 2
    freqs = 10000.0 ** (-np.arange(0, half, 2) / half)
    ys, xs = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    enc = np.zeros((h * w, d_model))
    for offset, pos in ((0, ys.ravel()), (half, xs.ravel())):
        angles = pos[:, None] * freqs[None, :]
        enc[:, offset:offset + half:2] = np.sin(angles)
        enc[:, offset + 1:offset + half:2] = np.cos(angles)
    return Tensor(enc)


class Encodings(Module):
    """Learnable per-scale embedding plus the fixed positional grid."""

    def __init__(self, n_levels: int, d_model: int, rng: Optional[np.random.Generator] = None):
        self.d_model = d_model
        init = np.zeros((n_levels, d_model)) if rng is None else rng.normal(0, 0.02, (n_levels, d_model))
        self.scale_embedding = parameter(init)
        self._cache = {}

    def positional(self, h: int, w: int) -> Tensor:
        key = (h, w)
        if key not in self._cache:
            self._cache[key] = sine_positional_encoding(h, w, self.d_model)
        return self._cache[key]


def add_scale_encoding(pyramid: PyramidFeatures, enc: Encodings) -> PyramidFeatures:
    """Query-side tokens: each scale gains its positional grid and its scale row."""
    if enc.scale_embedding.shape[0] != pyramid.n_levels:
        raise ValueError(f"scale embedding has {enc.scale_embedding.shape[0]} rows, "
                         f"pyramid has {pyramid.n_levels} levels")
    maps = []
    for level, (t, (h, w)) in enumerate(zip(pyramid.maps, pyramid.shapes)):
        row = enc.scale_embedding[level:level + 1]
        maps.append(t + enc.positional(h, w) + row)
    return PyramidFeatures(maps, list(pyramid.shapes), list(pyramid.strides))


# -- dense attention --------------------------------------------------------------

def dense_mha(x: Tensor, params: DenseAttentionParams, chunk: Optional[int] = None) -> Tensor:
    """Full softmax(QK^T / sqrt(d_model)) V attention, heads concatenated and projected.

    ``chunk`` processes query rows in blocks to bound the live n x n buffer;
    the arithmetic is unchanged.
    """
    n = x.shape[0]
    if n < 1:
        raise ValueError("empty sequence")
    scale = 1.0 / math.sqrt(params.d_model)
    # K^T built as a product so it is contiguous; a transposed view would be
    # copied again by every block's matmul
    kt = nx.matmul(params.w_k.transpose(0, 2, 1), x.T)     # M, d_k, n
    v = nx.matmul(x, params.w_v)                           # M, n, d_v
    blocks = []
    step = chunk or n
    for start in range(0, n, step):
        xb = x[start:start + step] if step < n else x
        q = nx.matmul(xb, params.w_q)
        attn = nx.softmax(nx.matmul(q, kt) * scale, axis=-1)
        blocks.append(nx.matmul(attn, v))
    heads = blocks[0] if len(blocks) == 1 else nx.concat(blocks, axis=1)
    m, _, dv = heads.shape
    return nx.matmul(heads.transpose(1, 0, 2).reshape(n, m * dv), params.w_o)


# -- sampled attention -------------------------------------------------------------

@dataclass
class SampleTrace:
    """Where each query looked: pixel coords (M, n_q, L, N, 2) and weights (M, n_q, L, N)."""

    coords: np.ndarray
    weights: np.ndarray
    shapes: List[Tuple[int, int]]


def _sampled_attention(queries: Tensor, values: Tensor, shapes: Sequence[Tuple[int, int]],
                       ref_pixels: np.ndarray, params: SparseAttentionParams,
                       trace: bool = False, chunk: Optional[int] = None):
    """Shared core of the single-scale and pyramid forms.

    ``values`` is the concatenated L_ms x d_model sequence, ``ref_pixels`` is
    n_q x L x 2 reference coordinates already expressed in each scale's pixels.
    ``chunk`` processes query rows in blocks against one shared value table.
    """
    n_q = queries.shape[0]
    m, dv = params.n_heads, params.d_head
    if len(shapes) != params.n_levels:
        raise ValueError(f"params expect {params.n_levels} levels, got {len(shapes)}")
    total = values.shape[0]
    if total != sum(h * w for h, w in shapes):
        raise ValueError("value sequence length does not match the scale shapes")

    table = nx.matmul(values, params.w_v).reshape(m * total, dv)
    step = chunk or n_q
    outs, coords, weights = [], [], []
    for start in range(0, n_q, step):
        qb = queries[start:start + step] if step < n_q else queries
        out, c, w = _sample_block(qb, table, total, shapes, ref_pixels[start:start + step], params)
        outs.append(out)
        if trace:
            coords.append(c)
            weights.append(w)
    out = outs[0] if len(outs) == 1 else nx.concat(outs, axis=0)
    if trace:
        return out, SampleTrace(np.concatenate(coords, axis=1),
                                np.concatenate(weights, axis=1).reshape(m, n_q, params.n_levels, params.n_points),
                                list(shapes))
    return out


def _sample_block(queries: Tensor, table: Tensor, total: int, shapes, ref_pixels: np.ndarray,
                  params: SparseAttentionParams):
    n_q = queries.shape[0]
    m, dv = params.n_heads, params.d_head
    n_levels, n_points = params.n_levels, params.n_points
    q = nx.matmul(queries, params.w_q)                          # M, n_q, d_k
    weights = nx.softmax(nx.matmul(q, params.u_wts), axis=-1)   # M, n_q, L*N
    offsets = nx.matmul(q, params.u_pos) + params.pos_bias.reshape(m, 1, -1)
    offsets = offsets.reshape(m, n_q, n_levels, n_points, 2)
    coords = offsets + Tensor(ref_pixels[None, :, :, None, :])

    sizes = np.array([h * w for h, w in shapes])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    heights = np.array([h for h, _ in shapes])
    widths = np.array([w for _, w in shapes])
    per_sample = (m, n_q, n_levels, n_points)
    head_idx = np.arange(m).reshape(m, 1, 1, 1)
    level_idx = np.arange(n_levels).reshape(1, 1, n_levels, 1)
    base = np.broadcast_to(head_idx * total + starts[level_idx], per_sample).ravel()
    hs = np.broadcast_to(heights[level_idx], per_sample).ravel()
    ws = np.broadcast_to(widths[level_idx], per_sample).ravel()
    sampled = nx.sample_table(table, coords.reshape(-1, 2), base, hs, ws)
    sampled = sampled.reshape(m, n_q, n_levels * n_points, dv)

    mixed = nx.matmul(weights.reshape(m, n_q, 1, n_levels * n_points), sampled)  # M, n_q, 1, dv
    out = nx.matmul(mixed.reshape(m, n_q, dv).transpose(1, 0, 2).reshape(n_q, m * dv), params.w_o)
    return out, coords.data, weights.data


def sparse_attention(query_tokens: Tensor, value_map: Tensor, ref_coords, params: SparseAttentionParams,
                     trace: bool = False):
    """Each query mixes N bilinear samples of ``value_map`` (d_model x H x W)
    taken at its pixel reference ``ref_coords`` plus learned offsets."""
    if params.n_levels != 1:
        raise ValueError("sparse_attention takes single-scale parameters")
    d, h, w = value_map.shape
    values = value_map.reshape(d, h * w).transpose(1, 0)
    ref = np.asarray(ref_coords.data if isinstance(ref_coords, Tensor) else ref_coords, dtype=float)
    return _sampled_attention(query_tokens, values, [(h, w)], ref[:, None, :], params, trace)


def level_pixel_coords(ref_normalized: np.ndarray, shapes: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Map n_q x 2 normalized references onto each scale's pixel grid -> n_q x L x 2."""
    ref = np.asarray(ref_normalized, dtype=float)
    scale = np.array(shapes, dtype=float)       # L x 2 as (H, W)
    return ref[:, None, :] * scale[None, :, :] - 0.5


def pyramid_attention(query_tokens: Tensor, pyramid: PyramidFeatures, ref_coords_normalized,
                      params: SparseAttentionParams, trace: bool = False, chunk: Optional[int] = None):
    """Each query mixes N samples from every one of the L scales; one softmax
    spans all N*L logits. Offsets are in the pixel units of their own scale."""
    if pyramid.n_levels < 1:
        raise ValueError("pyramid has no levels")
    ref = level_pixel_coords(ref_coords_normalized, pyramid.shapes)
    return _sampled_attention(query_tokens, pyramid.tokens(), pyramid.shapes, ref, params, trace, chunk)


# -- cost model ----------------------------------------------------------------

def dense_buffer_bytes(n: int, n_heads: int, d_head: int) -> int:
    """Live bytes of the float64 buffers dense attention needs: logits and
    softmax weights (M x n x n) plus per-head Q, K, V."""
    return 8 * (2 * n_heads * n * n + 3 * n_heads * n * d_head)


def sparse_buffer_bytes(n_q: int, n_heads: int, d_head: int, n_points: int, n_levels: int) -> int:
    """Live bytes of the sampled path: logits and weights (M*n_q*NL each),
    offsets/coords (2 x M*n_q*NL*2), sampled values (M*n_q*NL*d_v) and the
    four-corner interpolation entries (4 x M*n_q*NL for weight and index)."""
    samples = n_heads * n_q * n_points * n_levels
    return 8 * (2 * samples + 4 * samples + samples * d_head + 8 * samples + n_heads * n_q * d_head)
