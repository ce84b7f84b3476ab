"""
Segment-to-document attention and cross-modal fusion.

All functions accept an optional ``groups`` vector assigning each row to a
document. Documents of a mini-batch are stacked row-wise and a block mask
keeps attention and pooling inside each document, so a batched call is
numerically the per-document computation done in one pass. Without
``groups`` the whole matrix is one document.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffMatrix
from .errors import ConfigurationError, DimensionError

# Added to logits outside a document's block; exp() of it underflows to 0.
_MASKED = -1.0e30


@dataclass
class AttentionParams:
    """Projections for one attention block.

    ``w_q``/``w_k``/``w_v`` hold one d x d_h matrix per head. ``w_o`` and
    ``q_pool`` are optional: cross-modal blocks use neither.
    """

    w_q: list[DiffMatrix]
    w_k: list[DiffMatrix]
    w_v: list[DiffMatrix]
    w_o: DiffMatrix | None = None
    q_pool: DiffMatrix | None = None

    @property
    def heads(self) -> int:
        return len(self.w_q)

    @property
    def dim(self) -> int:
        return self.w_q[0].shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, heads: int = 1, output: bool = True,
             pool: bool = True, prefix: str = "attn") -> "AttentionParams":
        if heads < 1 or dim % heads:
            raise ConfigurationError(f"heads={heads} must divide the model dimension {dim}")
        d_h = dim // heads
        scale = 1.0 / math.sqrt(dim)

        def mats(tag):
            return [ad.param(rng.normal(0.0, scale, (dim, d_h)), f"{prefix}.{tag}{h}") for h in range(heads)]

        w_q, w_k, w_v = mats("w_q"), mats("w_k"), mats("w_v")
        w_o = ad.param(rng.normal(0.0, scale, (dim, dim)), f"{prefix}.w_o") if output else None
        q_pool = ad.param(rng.normal(0.0, scale, (dim, 1)), f"{prefix}.q_pool") if pool else None
        return cls(w_q, w_k, w_v, w_o, q_pool)

    def parameters(self) -> list[DiffMatrix]:
        out = [*self.w_q, *self.w_k, *self.w_v]
        if self.w_o is not None:
            out.append(self.w_o)
        if self.q_pool is not None:
            out.append(self.q_pool)
        return out


def _groups(groups, n: int) -> np.ndarray:
    if groups is None:
        return np.zeros(n, dtype=np.int64)
    g = np.asarray(groups, dtype=np.int64)
    if g.shape != (n,):
        raise DimensionError(f"groups has shape {g.shape}, expected ({n},)")
    return g


def block_mask(row_groups, col_groups) -> DiffMatrix | None:
    """Additive mask: 0 where row and column share a document, else -1e30.

    Returns None when every pair shares a document.
    """
    rg = np.asarray(row_groups)
    cg = np.asarray(col_groups)
    same = rg[:, None] == cg[None, :]
    if same.all():
        return None
    return ad.const(np.where(same, 0.0, _MASKED))


def _masked_softmax(logits: DiffMatrix, mask: DiffMatrix | None) -> DiffMatrix:
    if mask is not None:
        logits = ad.add(logits, mask)
    return ad.softmax_rows(logits)


def project_to_common(segments, w_in: DiffMatrix) -> DiffMatrix:
    """Map L x d_m segment embeddings to the shared width: ``S @ W_in``."""
    segments = ad.as_diff(segments)
    if segments.shape[1] != w_in.shape[0]:
        raise DimensionError(
            f"segment width {segments.shape[1]} does not match projection {w_in.shape}"
        )
    return ad.matmul(segments, w_in)


def self_attention(seg: DiffMatrix, params: AttentionParams, groups=None) -> DiffMatrix:
    """Multi-head scaled dot-product self-attention, L x d -> L x d."""
    n, d = seg.shape
    if d != params.dim:
        raise DimensionError(f"self_attention: input width {d}, params expect {params.dim}")
    if params.w_o is None:
        raise ConfigurationError("self_attention needs an output projection")
    g = _groups(groups, n)
    mask = block_mask(g, g)
    d_h = params.w_q[0].shape[1]
    heads = []
    for w_q, w_k, w_v in zip(params.w_q, params.w_k, params.w_v):
        q = ad.matmul(seg, w_q)
        k = ad.matmul(seg, w_k)
        v = ad.matmul(seg, w_v)
        logits = ad.mul_scalar(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_h))
        heads.append(ad.matmul(_masked_softmax(logits, mask), v))
    merged = heads[0] if len(heads) == 1 else ad.concat_cols(*heads)
    return ad.matmul(merged, params.w_o)


def attention_pool(seg: DiffMatrix, q_pool: DiffMatrix, groups=None) -> DiffMatrix:
    """Softmax-weighted average of rows, one output row per document.

    Scores are ``S @ q_pool / sqrt(d)``; the result is G x d for G groups.
    """
    n, d = seg.shape
    if q_pool.shape != (d, 1):
        raise DimensionError(f"attention_pool: q_pool {q_pool.shape}, expected ({d}, 1)")
    g = _groups(groups, n)
    n_docs = int(g.max()) + 1
    if g.min() < 0 or np.bincount(g, minlength=n_docs).min() == 0:
        raise DimensionError("attention_pool: group ids must cover 0..G-1 with no gaps")
    scores = ad.transpose(ad.mul_scalar(ad.matmul(seg, q_pool), 1.0 / math.sqrt(d)))  # 1 x n
    if n_docs > 1:
        scores = ad.matmul(ad.ones(n_docs, 1), scores)
    weights = _masked_softmax(scores, block_mask(np.arange(n_docs), g))
    return ad.matmul(weights, seg)


def cross_modal_attention(src: DiffMatrix, tgt: DiffMatrix, params: AttentionParams,
                          src_groups=None, tgt_groups=None) -> DiffMatrix:
    """Queries from ``src``, keys and values from ``tgt``; scaled by sqrt(d).

    Uses the first head's matrices, which must be d x d.
    """
    d = src.shape[1]
    if tgt.shape[1] != d:
        raise DimensionError(f"cross_modal_attention: widths {src.shape} vs {tgt.shape}")
    w_q, w_k, w_v = params.w_q[0], params.w_k[0], params.w_v[0]
    if w_q.shape[0] != d:
        raise DimensionError(f"cross_modal_attention: params expect width {w_q.shape[0]}, got {d}")
    q = ad.matmul(src, w_q)
    k = ad.matmul(tgt, w_k)
    v = ad.matmul(tgt, w_v)
    logits = ad.mul_scalar(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
    mask = block_mask(_groups(src_groups, src.shape[0]), _groups(tgt_groups, tgt.shape[0]))
    return ad.matmul(_masked_softmax(logits, mask), v)


def modality_document_embedding(seg: DiffMatrix, params: AttentionParams, groups=None) -> DiffMatrix:
    return attention_pool(self_attention(seg, params, groups), params.q_pool, groups)


def joint_document_embedding(a2t: DiffMatrix, t2a: DiffMatrix, params: AttentionParams,
                             groups=None) -> DiffMatrix:
    """Row-stack both cross-attended sequences, self-attend, then pool."""
    if a2t.shape != t2a.shape:
        raise DimensionError(f"joint_document_embedding: {a2t.shape} vs {t2a.shape}")
    g = _groups(groups, a2t.shape[0])
    stacked = ad.concat_rows(a2t, t2a)
    both = np.concatenate([g, g])
    return attention_pool(self_attention(stacked, params, both), params.q_pool, both)
