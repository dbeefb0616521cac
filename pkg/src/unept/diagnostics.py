"""Finite-difference gradient suites and the dense-vs-sampled attention
benchmark."""
from __future__ import annotations

import functools
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import numerics as nx
from .attention import (
    DenseAttentionParams,
    PyramidFeatures,
    SparseAttentionParams,
    dense_buffer_bytes,
    dense_mha,
    pyramid_attention,
    sparse_buffer_bytes,
)
from .boundary import make_boundary_targets, refine_logits
from .data import SceneSpec, generate_scene
from .model import UNEPT, EPTConfig
from .numerics import GradReport, Tensor
from .training import segmentation_loss

GRAD_TOL = 1e-4
MAX_GRADCHECK_SIDE = 32
MODULES = ("attention", "boundary", "model")

# small enough for thousands of forward passes, but every component present
GRADCHECK_CONFIG = dict(d_model=32, n_heads=4, d_head=8, n_points=4, n_levels=3, encoder_layers=2,
                        decoder_layers=2, ff_dim=64, dropout=0.0, num_classes=3, stem_channels=(8, 16),
                        backbone_channels=(16, 16, 32), spatial_channels=(16, 16, 32), head_channels=16)


def jitter(params: Dict[str, Tensor], rng: np.random.Generator, scale: float = 0.05) -> None:
    """Move parameters off the initialization, where sampling locations sit
    exactly on lattice points and the bilinear kernel has kinks."""
    for p in params.values():
        p.data += rng.normal(0.0, scale, size=p.shape)


def _attention_suite(rng: np.random.Generator) -> List[GradReport]:
    d, m, dh = 16, 4, 4
    shapes = [(4, 4), (2, 2), (1, 1)]
    sparse = SparseAttentionParams(d, m, dh, n_points=3, n_levels=3, rng=rng)
    dense = DenseAttentionParams(d, m, dh, rng)
    jitter(sparse.parameters(), rng, 0.2)
    maps = [Tensor(rng.standard_normal((h * w, d)), requires_grad=True) for h, w in shapes]
    pyramid = PyramidFeatures(maps, shapes)
    queries = Tensor(rng.standard_normal((5, d)), requires_grad=True)
    ref = rng.uniform(0.05, 0.95, size=(5, 2))
    target_s = rng.standard_normal((5, d))
    target_d = rng.standard_normal((6, d))
    x = Tensor(rng.standard_normal((6, d)), requires_grad=True)

    def sparse_loss():
        out = pyramid_attention(queries, pyramid, ref, sparse)
        return ((out - target_s) * (out - target_s)).sum()

    def dense_loss():
        out = dense_mha(x, dense)
        return ((out - target_d) * (out - target_d)).sum()

    params = {f"sparse.{k}": v for k, v in sparse.parameters().items()}
    params["sparse.queries"] = queries
    params.update({f"sparse.level{i}": t for i, t in enumerate(maps)})
    reports = nx.check_parameters(sparse_loss, params, rng=rng)
    dparams = {f"dense.{k}": v for k, v in dense.parameters().items()}
    dparams["dense.input"] = x
    reports += nx.check_parameters(dense_loss, dparams, rng=rng)
    return [GradReport(f"attention.{r.name}", r.size, r.max_rel_err, r.checks, r.worst) for r in reports]


def _boundary_suite(rng: np.random.Generator) -> List[GradReport]:
    labels = np.zeros((8, 8), dtype=np.int64)
    labels[2:6, 3:7] = 1
    labels[5:, :2] = 2
    targets = make_boundary_targets(labels)
    seg = Tensor(rng.standard_normal((3, 8, 8)), requires_grad=True)
    bnd = Tensor(rng.standard_normal((1, 8, 8)), requires_grad=True)
    dirs = Tensor(rng.standard_normal((8, 8, 8)), requires_grad=True)

    def loss():
        refined = refine_logits(seg, nx.sigmoid(bnd).reshape(8, 8), dirs)
        return segmentation_loss(seg, refined, bnd, dirs, labels, targets)[0]

    reports = nx.check_parameters(loss, {"seg_logits": seg, "boundary_logits": bnd,
                                         "direction_logits": dirs}, rng=rng)
    return [GradReport(f"boundary.{r.name}", r.size, r.max_rel_err, r.checks, r.worst) for r in reports]


def _model_suite(rng: np.random.Generator, size: int = 32) -> List[GradReport]:
    cfg = EPTConfig(**GRADCHECK_CONFIG)
    model = UNEPT(cfg, seed=int(rng.integers(2 ** 31)))
    params = model.parameters()
    jitter(params, rng)
    spec = SceneSpec(size=size, num_classes=cfg.num_classes, min_shapes=2, max_shapes=3,
                     min_extent=8, max_extent=20, seed=int(rng.integers(2 ** 31)))
    sample = generate_scene(spec, 0)
    targets = make_boundary_targets(sample.labels)
    model.train()

    def loss():
        out = model(sample.image)
        prob = nx.sigmoid(out.boundary_logits).reshape(size, size)
        refined = refine_logits(out.seg_logits, prob, out.direction_logits)
        return segmentation_loss(out.seg_logits, refined, out.boundary_logits, out.direction_logits,
                                 sample.labels, targets)[0]

    reports = nx.check_parameters(loss, params, n_directions=2, n_coords=2, rng=rng)
    return [GradReport(f"model.{r.name}", r.size, r.max_rel_err, r.checks, r.worst) for r in reports]


SUITES: Dict[str, Callable[[np.random.Generator], List[GradReport]]] = {
    "attention": _attention_suite,
    "boundary": _boundary_suite,
    "model": _model_suite,
}


def run_gradcheck(module: str = "all", seed: int = 0) -> List[GradReport]:
    names = MODULES if module == "all" else (module,)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown gradcheck module {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    reports: List[GradReport] = []
    for name in names:
        reports += SUITES[name](rng)
    return reports


def format_gradcheck(reports: Sequence[GradReport], tol: float = GRAD_TOL) -> str:
    width = max(len(r.name) for r in reports)
    lines = [f"{'group':<{width}}  {'size':>7}  {'checks':>6}  max_rel_err  status"]
    for r in reports:
        status = "ok" if r.passed(tol) else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.size:>7}  {r.checks:>6}  {r.max_rel_err:11.3e}  {status}")
    failed = sum(not r.passed(tol) for r in reports)
    lines.append(f"{len(reports)} groups, {failed} failed (tolerance {tol:g})")
    return "\n".join(lines)


# -- benchmark ----------------------------------------------------------------------

BENCH_HEADER = "n,dense_ms,sparse_ms,dense_bytes,sparse_bytes"


@dataclass
class BenchRow:
    n: int
    dense_ms: float
    sparse_ms: float
    dense_bytes: int
    sparse_bytes: int

    def csv(self) -> str:
        return f"{self.n},{self.dense_ms:.3f},{self.sparse_ms:.3f},{self.dense_bytes},{self.sparse_bytes}"


def finest_shape(n: int, levels: int) -> tuple:
    """Most nearly square h x w = n whose sides survive ``levels - 1`` halvings."""
    unit = 2 ** (levels - 1)
    best = None
    for h in range(unit, int(math.isqrt(n)) + 1, unit):
        if n % h == 0 and (n // h) % unit == 0:
            best = (h, n // h)
    if best is None:
        raise ValueError(f"cannot lay {n} tokens out as a map divisible by {unit}")
    return best


def _elapsed_ms(fn: Callable[[], object]) -> float:
    t = time.perf_counter()
    fn()
    return (time.perf_counter() - t) * 1e3


def bench_attention(sizes: Sequence[int], d_model: int = 256, n_heads: int = 8, d_head: int = 32,
                    n_points: int = 16, n_levels: int = 3, repeats: int = 5, block: int = 2 ** 21,
                    seed: int = 0, dense: bool = True) -> List[BenchRow]:
    """Time dense attention over n tokens against pyramid attention whose n
    queries come from an n-token finest map (coarser levels at 1/2, 1/4).

    Both paths run in query blocks whose largest buffer holds about ``block``
    floats (M x rows x n scores, or M x rows x L*N x d_v samples). Buffers
    then stay below the size where the allocator maps fresh pages for every
    call, which otherwise adds page-fault time that grows faster than n^2.
    Repeats go round-robin over the sizes, so slow drift in machine speed hits
    every size alike, and each round allocates its inputs afresh. Each size
    reports the median of its samples; the best time was swayed by rare fast
    runs. The cheap sampled path is timed three times per round.
    """
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    if repeats < 1 or block < 1:
        raise ValueError("repeats and block must be positive")
    rng = np.random.default_rng(seed)
    dense_p = DenseAttentionParams(d_model, n_heads, d_head, rng)
    sparse_p = SparseAttentionParams(d_model, n_heads, d_head, n_points, n_levels, rng)
    jitter({"u_wts": sparse_p.u_wts, "u_pos": sparse_p.u_pos}, rng, 0.1)

    def setup(n):
        # same values every round, fresh memory: the samples span layouts
        data = np.random.default_rng([seed, n])
        h, w = finest_shape(n, n_levels)
        shapes = [(h >> i, w >> i) for i in range(n_levels)]
        maps = [Tensor(data.standard_normal((a * b, d_model))) for a, b in shapes]
        pyramid = PyramidFeatures(maps, shapes)
        ref = np.concatenate([((np.arange(h) + 0.5) / h).repeat(w)[:, None],
                              np.tile((np.arange(w) + 0.5) / w, h)[:, None]], axis=1)
        sparse_fn = functools.partial(pyramid_attention, maps[0], pyramid, ref, sparse_p,
                                      chunk=max(1, block // (n_heads * n_levels * n_points * d_head)))
        dense_fn = functools.partial(dense_mha, maps[0], dense_p, chunk=max(1, block // (n_heads * n)))
        return sparse_fn, dense_fn if dense else None

    samples = [([], []) for _ in sizes]
    with nx.no_grad():
        for n in sizes:
            # untimed pass: the first call pays for faulting fresh pages in
            for fn in setup(n):
                if fn is not None:
                    fn()
        for _ in range(repeats):
            for i, n in enumerate(sizes):
                sparse_fn, dense_fn = setup(n)
                for _ in range(3):
                    samples[i][0].append(_elapsed_ms(sparse_fn))
                if dense_fn is not None:
                    samples[i][1].append(_elapsed_ms(dense_fn))
                del sparse_fn, dense_fn
    return [BenchRow(n, float(np.median(d)) if dense else math.nan, float(np.median(sp)),
                     dense_buffer_bytes(n, n_heads, d_head),
                     sparse_buffer_bytes(n, n_heads, d_head, n_points, n_levels))
            for n, (sp, d) in zip(sizes, samples)]
