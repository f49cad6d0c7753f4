"""Pre-norm transformer layer shared by both encoder stages.

The same layer function serves plain self-attention (keys/values from the
query sequence) and grouped attention (keys/values from a separately
assembled sequence); when the two sequences coincide, the grouped form is
bit-for-bit the plain one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# token role codes
ROLE_HUMAN, ROLE_SPARSE, ROLE_PART, ROLE_DENSE, ROLE_VISUAL = 0, 1, 2, 3, 4
ROLE_NAMES = ("human", "sparse", "part", "dense", "visual")


@dataclass
class AttentionRecord:
    """One layer's attention weights plus role metadata for its axes."""

    layer: int
    group: int | None
    weights: np.ndarray        # (heads, n_q, n_k)
    query_roles: np.ndarray    # (n_q,) role codes
    key_roles: np.ndarray      # (n_k,) role codes
    visual_grid: np.ndarray    # original grid index of each visual key column

    def visual_key_columns(self) -> np.ndarray:
        return np.flatnonzero(self.key_roles == ROLE_VISUAL)

    def keypoint_query_rows(self) -> np.ndarray:
        return np.flatnonzero(self.query_roles != ROLE_VISUAL)


def multi_head_attention(params, prefix: str, q_in: Tensor, kv_in: Tensor,
                         heads: int) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over already-normalized inputs.

    Returns the projected output (n_q, d) and the attention weights
    (heads, n_q, n_k) as a plain array for pruning / inspection.
    """
    n_q, d = q_in.shape
    n_k = kv_in.shape[0]
    hd = d // heads
    q = ad.matmul(q_in, params[f"{prefix}wq"]) + params[f"{prefix}bq"]
    k = ad.matmul(kv_in, params[f"{prefix}wk"]) + params[f"{prefix}bk"]
    v = ad.matmul(kv_in, params[f"{prefix}wv"]) + params[f"{prefix}bv"]
    qh = ad.permute(ad.reshape(q, (n_q, heads, hd)), (1, 0, 2))   # (h, n_q, hd)
    kt = ad.permute(ad.reshape(k, (n_k, heads, hd)), (1, 2, 0))   # (h, hd, n_k)
    vh = ad.permute(ad.reshape(v, (n_k, heads, hd)), (1, 0, 2))   # (h, n_k, hd)
    scores = ad.scale(ad.matmul(qh, kt), 1.0 / np.sqrt(hd))
    attn = ad.softmax_rows(scores)                                 # (h, n_q, n_k)
    ctx = ad.matmul(attn, vh)                                      # (h, n_q, hd)
    merged = ad.reshape(ad.permute(ctx, (1, 0, 2)), (n_q, d))
    out = ad.matmul(merged, params[f"{prefix}wo"]) + params[f"{prefix}bo"]
    return out, attn.data


def transformer_layer(params, prefix: str, x: Tensor, kv: Tensor | None,
                      heads: int) -> tuple[Tensor, np.ndarray]:
    """One pre-norm block: x += attn(LN(x), LN(kv)); x += FFN(LN(x)).

    `kv=None` is plain self-attention and reuses the normalized queries as
    keys/values.
    """
    ln_q = ad.layernorm(x, params[f"{prefix}ln1.g"], params[f"{prefix}ln1.b"])
    ln_kv = ln_q if kv is None else ad.layernorm(kv, params[f"{prefix}ln1.g"], params[f"{prefix}ln1.b"])
    attn_out, weights = multi_head_attention(params, prefix, ln_q, ln_kv, heads)
    x = x + attn_out
    h = ad.layernorm(x, params[f"{prefix}ln2.g"], params[f"{prefix}ln2.b"])
    f = ad.gelu(ad.matmul(h, params[f"{prefix}ffn1.w"]) + params[f"{prefix}ffn1.b"])
    f = ad.matmul(f, params[f"{prefix}ffn2.w"]) + params[f"{prefix}ffn2.b"]
    return x + f, weights
