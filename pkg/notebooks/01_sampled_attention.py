# %% [markdown]
# # Sampled attention versus dense attention
#
# Dense attention compares every token with every other token. The sampled
# variant lets each query read a handful of bilinear samples around its own
# position on every scale of a feature pyramid. This walk-through builds both
# on small random inputs and looks at what each query touches.

# %%
import numpy as np

from unept import numerics as nx
from unept.attention import (
    DenseAttentionParams,
    PyramidFeatures,
    SparseAttentionParams,
    dense_buffer_bytes,
    dense_mha,
    pyramid_attention,
    ring_offsets,
    sparse_buffer_bytes,
)

rng = np.random.default_rng(0)

# %% [markdown]
# At initialization the offsets ignore the query and sit on rings around the
# reference point, one ring per group of eight points, rotated per head.

# %%
rings = ring_offsets(n_heads=2, n_levels=1, n_points=16)
print(rings.shape)
print(np.round(rings[0, 0, :8], 2))

# %% [markdown]
# A three-level pyramid over a 16 x 16 map. Queries are the finest-level
# tokens; their references are their own normalized pixel centres.

# %%
d = 32
shapes = [(16, 16), (8, 8), (4, 4)]
maps = [nx.Tensor(rng.standard_normal((h * w, d))) for h, w in shapes]
pyramid = PyramidFeatures(maps, shapes)
params = SparseAttentionParams(d, n_heads=4, d_head=8, n_points=4, n_levels=3, rng=rng)
queries = maps[0]
ref = pyramid.reference_points()[:256]
out, trace = pyramid_attention(queries, pyramid, ref, params, trace=True)
print(out.shape, trace.coords.shape)

# %%
q = 100
print("query", q, "at", ref[q] * 16 - 0.5)
for level, (h, w) in enumerate(shapes):
    pts = trace.coords[0, q, level]
    print(f"level {level} ({h}x{w}) head 0 samples:", np.round(pts, 2).tolist())
print("weights sum to", trace.weights[:, q].sum(axis=(1, 2)))

# %% [markdown]
# The dense path on the same tokens, and the analytic buffer estimates that
# explain why only one of them scales.

# %%
dense = DenseAttentionParams(d, 4, 8, rng)
print(dense_mha(queries, dense).shape)
for n in (1024, 4096, 16384):
    print(n, dense_buffer_bytes(n, 8, 32) / 2**20, "MiB dense",
          sparse_buffer_bytes(n, 8, 32, 16, 3) / 2**20, "MiB sparse")
