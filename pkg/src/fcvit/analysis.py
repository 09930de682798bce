"""Attention statistics: log10 weight histograms and query/head consistency.

The reference self-attention here is the bare form (no sqrt(d) scaling, no
positional encoding). With ``w_q = 0`` every row is uniform and the output
collapses to ``w_v @ mean(x)``, the average-pooled global context.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .tensor import ShapeError, Tensor, matmul, no_grad, softmax

HIST_BINS = 60
HIST_RANGE = (-6.0, 0.0)


@dataclass
class ReferenceAttentionParams:
    w_q: Tensor  # (d, d)
    w_k: Tensor
    w_v: Tensor
    heads: int = 1

    def __post_init__(self):
        d = self.w_q.shape[0]
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape != (d, d):
                raise ShapeError("attention projections must all be (d, d)")
        if d % self.heads:
            raise ShapeError(f"{self.heads} heads do not divide width {d}")


@dataclass
class Histogram:
    """Binned log10 attention weights.

    ``density`` is the fraction of entries per bin; ``mass`` is the fraction
    of total attention weight per bin, so zero weights contribute no mass.
    """

    edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray
    mass: np.ndarray

    def bin_of(self, log10_value: float) -> int:
        return int(np.clip(np.searchsorted(self.edges, log10_value, side="right") - 1, 0, len(self.counts) - 1))


@dataclass
class AttentionStats:
    histogram: Histogram
    query_consistency: float
    head_consistency: float

    def to_dict(self) -> dict:
        h = self.histogram
        return {
            "bins": HIST_BINS,
            "range": list(HIST_RANGE),
            "edges": h.edges.tolist(),
            "counts": h.counts.tolist(),
            "density": h.density.tolist(),
            "mass": h.mass.tolist(),
            "query_consistency": self.query_consistency,
            "head_consistency": self.head_consistency,
        }


def reference_self_attention(x: Tensor, p: ReferenceAttentionParams) -> tuple[Tensor, Tensor]:
    """Multi-head softmax attention over tokens.

    Args:
        x: (N, d, n) tokens as columns.

    Returns:
        ``(y, attn)`` with ``y`` of shape (N, d, n) and row-stochastic
        ``attn`` of shape (N, heads, n, n), rows indexing queries.
    """
    if x.ndim != 3 or x.shape[1] != p.w_q.shape[0]:
        raise ShapeError(f"input {x.shape} does not match width {p.w_q.shape[0]}")
    n_batch, d, n = x.shape
    h, dh = p.heads, d // p.heads
    q = matmul(p.w_q, x).reshape(n_batch, h, dh, n)
    k = matmul(p.w_k, x).reshape(n_batch, h, dh, n)
    v = matmul(p.w_v, x).reshape(n_batch, h, dh, n)
    attn = softmax(matmul(q.transpose(0, 1, 3, 2), k), axis=-1)   # (N, h, n_q, n_k)
    y = matmul(v, attn.transpose(0, 1, 3, 2))                      # (N, h, dh, n_q)
    return y.reshape(n_batch, d, n), attn


def _as_heads(attn) -> np.ndarray:
    a = np.asarray(getattr(attn, "data", attn), dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ShapeError(f"attention must be (heads, n, n), got {a.shape}")
    return a


def attention_log_histogram(attn) -> Histogram:
    """60-bin histogram of log10 weights on [-6, 0]; weights below 1e-6 land in the lowest bin.

    All entries are pooled, so any stack of attention rows is accepted.
    """
    a = np.asarray(getattr(attn, "data", attn), dtype=np.float64)
    if (a < 0).any():
        raise ValueError("attention weights must be non-negative")
    with np.errstate(divide="ignore"):
        logs = np.log10(a.ravel())
    logs = np.clip(logs, *HIST_RANGE)
    counts, edges = np.histogram(logs, bins=HIST_BINS, range=HIST_RANGE)
    weight, _ = np.histogram(logs, bins=edges, weights=a.ravel())
    return Histogram(edges, counts, counts / counts.sum(), weight / weight.sum())


def _mean_pairwise_cosine(rows: np.ndarray) -> float:
    norms = np.linalg.norm(rows, axis=1)
    if (norms == 0).any():
        raise ValueError("cannot take the cosine of a zero-norm row")
    unit = rows / norms[:, None]

    def cosine(i: int, j: int) -> float:
        # identical rows are exactly parallel; do not let rounding say otherwise
        if np.array_equal(rows[i], rows[j]):
            return 1.0
        return float(np.clip(unit[i] @ unit[j], -1.0, 1.0))

    return float(np.mean([cosine(i, j) for i, j in combinations(range(len(rows)), 2)]))


def query_consistency(attn) -> float:
    """Mean pairwise cosine between the rows of each head, averaged over heads.

    1.0 means every query attends identically (query-irrelevant).
    """
    a = _as_heads(attn)
    if a.shape[1] < 2:
        raise ValueError("need at least two queries")
    return float(np.mean([_mean_pairwise_cosine(head) for head in a]))


def head_consistency(maps) -> float:
    """Mean pairwise cosine between flattened per-head (or per-group) maps."""
    m = np.asarray(getattr(maps, "data", maps), dtype=np.float64)
    if len(m) < 2:
        return 1.0
    return _mean_pairwise_cosine(m.reshape(len(m), -1))


def attention_stats(attn) -> AttentionStats:
    a = _as_heads(attn)
    return AttentionStats(attention_log_histogram(a), query_consistency(a), head_consistency(a))


def export_similarity_maps(params, image, block_index: int, repetition: int = -1) -> tuple[np.ndarray, float]:
    """Normalised token-global similarity of every group at one block.

    Args:
        params: a :class:`~fcvit.model.ModelParams`.
        image: (3, H, W) or (1, 3, H, W) input.
        block_index: global block index, counting across stages.
        repetition: which token-mixer repetition to read (default: last).

    Returns:
        ``(maps, head_consistency)`` with ``maps`` of shape (g, H_b, W_b). The score is
        NaN when some map is identically zero, as happens on a 1x1 map with zero shift.
    """
    from .model import forward_features

    n_blocks = len(params.blocks)
    if not 0 <= block_index < n_blocks:
        raise IndexError(f"block_index {block_index} outside [0, {n_blocks})")
    x = np.asarray(getattr(image, "data", image))
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"expected a single image, got {x.shape}")
    dtype = params.head_weight.dtype
    trace: list = []
    with no_grad():
        forward_features(params, Tensor(x.astype(dtype)), trace)
    contexts = dict(trace)[block_index]
    if not contexts:
        raise ValueError("model has no global-context path to export")
    sim = contexts[repetition].sim.data[0]
    if not np.abs(sim.reshape(len(sim), -1)).max(axis=1).all():
        return sim, float("nan")
    return sim, head_consistency(sim)
