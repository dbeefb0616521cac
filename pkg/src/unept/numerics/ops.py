"""Differentiable kernels used by the network: products, normalizations,
convolution and grid sampling."""
from __future__ import annotations

from typing import Optional

import numpy as np
import scipy.sparse as sp

from .tensor import DTYPE, Tensor, as_tensor, record, unbroadcast


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return record(ad @ bd, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ValueError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm shape mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(xhat * gd + bias.data, (x, gain, bias), backward)


def channel_layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm across the channel axis of a C x H x W map."""
    return layer_norm(x.transpose(1, 2, 0), gain, bias, eps).transpose(2, 0, 1)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record(x.data * keep, (x,), lambda g: (g * keep,))


# -- convolution -------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in x H x W map with a C_out x C_in x k x k kernel."""
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in or kh != kw:
        raise ValueError(f"conv2d shape mismatch: x {x.shape}, kernel {kernel.shape}")
    k = kh
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"conv2d output extent {h_out}x{w_out} is not positive")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if k == 1:
        cols = xp[:, ::stride, ::stride][:, :h_out, :w_out].reshape(c_in, -1)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, ::stride, ::stride][:, :h_out, :w_out]  # C, Ho, Wo, k, k
        cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, h_out * w_out)
    kmat = kernel.data.reshape(c_out, -1)
    out = (kmat @ cols).reshape(c_out, h_out, w_out)
    parents = (x, kernel)
    if bias is not None:
        out = out + bias.data[:, None, None]
        parents = (x, kernel, bias)
    pshape = xp.shape

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape)
        dcols = (kmat.T @ g2).reshape(c_in, k, k, h_out, w_out)
        gxp = np.zeros(pshape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += dcols[:, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (g.sum(axis=(1, 2)),)
        return grads

    return record(out, parents, backward)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    return x.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


# -- grid sampling -----------------------------------------------------------

def _corner_terms(coords: np.ndarray, heights, widths):
    """Clamped corner indices and fractional parts for bilinear sampling.

    Returns (y0, x0, y1, x1, fy, fx, inside_y, inside_x); ``inside_*`` marks
    coordinates strictly inside the clamp range, where the sample location
    has a nonzero derivative.
    """
    hmax = np.asarray(heights, dtype=DTYPE) - 1.0
    wmax = np.asarray(widths, dtype=DTYPE) - 1.0
    y = np.clip(coords[:, 0], 0.0, hmax)
    x = np.clip(coords[:, 1], 0.0, wmax)
    y0 = np.floor(y)
    x0 = np.floor(x)
    fy = y - y0
    fx = x - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y1 = np.minimum(y0 + 1, np.asarray(heights) - 1)
    x1 = np.minimum(x0 + 1, np.asarray(widths) - 1)
    inside_y = (coords[:, 0] >= 0.0) & (coords[:, 0] <= hmax)
    inside_x = (coords[:, 1] >= 0.0) & (coords[:, 1] <= wmax)
    return y0, x0, y1, x1, fy, fx, inside_y, inside_x


def sample_table(table: Tensor, coords: Tensor, base, heights, widths) -> Tensor:
    """Bilinear lookup into row-major maps packed as rows of ``table``.

    ``table`` is T x C; sample ``s`` reads the map of size
    ``heights[s] x widths[s]`` whose pixel (0, 0) is row ``base[s]``, at
    continuous location ``coords[s] = (y, x)`` clamped to the map border.
    Differentiable in both the table and the coordinates.
    """
    cd = coords.data
    n = cd.shape[0]
    base = np.broadcast_to(np.asarray(base, dtype=np.int64), (n,))
    widths_i = np.broadcast_to(np.asarray(widths, dtype=np.int64), (n,))
    y0, x0, y1, x1, fy, fx, iny, inx = _corner_terms(cd, heights, widths)
    rows = np.concatenate([base + y0 * widths_i + x0, base + y0 * widths_i + x1,
                           base + y1 * widths_i + x0, base + y1 * widths_i + x1])
    wts = np.concatenate([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    samples = np.tile(np.arange(n), 4)
    interp = sp.csr_matrix((wts, (samples, rows)), shape=(n, table.shape[0]))
    td = table.data
    out = interp @ td

    def backward(g):
        g_table = interp.T @ g if table.requires_grad else None
        g_coords = None
        if coords.requires_grad:
            # adjoint projected onto each corner value: g . v_corner, shape 4 x n
            gv00, gv01, gv10, gv11 = np.einsum("ksc,sc->ks", td[rows.reshape(4, n)], g)
            gy = (1 - fx) * (gv10 - gv00) + fx * (gv11 - gv01)
            gx = (1 - fy) * (gv01 - gv00) + fy * (gv11 - gv10)
            g_coords = np.stack([gy * iny, gx * inx], axis=1)
        return g_table, g_coords

    return record(out, (table, coords), backward)


def bilinear_sample(fmap: Tensor, coords) -> Tensor:
    """Sample a C x H x W map at P continuous (y, x) pixel coordinates -> P x C."""
    c, h, w = fmap.shape
    coords = as_tensor(coords)
    table = fmap.reshape(c, h * w).transpose(1, 0)
    return sample_table(table, coords, 0, h, w)


def nearest_sample(labels: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Gather integer labels at the lattice point nearest to each (y, x).

    Ties round half up; locations outside the map clamp to the border.
    """
    h, w = labels.shape
    coords = np.asarray(coords, dtype=DTYPE)
    yi = np.clip(np.floor(coords[:, 0] + 0.5).astype(np.int64), 0, h - 1)
    xi = np.clip(np.floor(coords[:, 1] + 0.5).astype(np.int64), 0, w - 1)
    return labels[yi, xi]


def interpolation_matrix(n_in: int, factor: int) -> np.ndarray:
    """Rows map each output sample to its two clamped input neighbours
    (half-pixel centers: output i sits at input (i + 0.5) / factor - 0.5)."""
    n_out = n_in * factor
    pos = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    mat = np.zeros((n_out, n_in), dtype=DTYPE)
    np.add.at(mat, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(mat, (np.arange(n_out), i1), frac)
    return mat


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    if factor == 1:
        return x
    _, h, w = x.shape
    ry = interpolation_matrix(h, factor)
    rx = interpolation_matrix(w, factor)
    out = ry @ x.data @ rx.T
    return record(out, (x,), lambda g: (ry.T @ g @ rx,))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits,
    ``max(x, 0) - x * t + log(1 + exp(-|x|))``."""
    x = logits.data
    t = np.asarray(targets, dtype=DTYPE)
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record(out, (logits,), lambda g: (g * (sig - t),))
