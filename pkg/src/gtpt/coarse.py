"""Coarse encoder: plain transformer layers over [role tokens | visual tokens].

Depending on the introduction mode, the sequence starts with a single human
token (expanded into keypoint/part tokens mid-encoder), the sparse keypoint
and part tokens, or every keypoint token at once. Stage-1 pruning fires right
after the expansion layer, scored from that layer's attention with the
keypoint-side tokens as queries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import (ROLE_DENSE, ROLE_HUMAN, ROLE_PART, ROLE_SPARSE,
                        ROLE_VISUAL, AttentionRecord, transformer_layer)
from .pruning import PruneEngine
from .schema import KeypointSchema, ModelConfig


class StateError(RuntimeError):
    pass


@dataclass
class TokenState:
    """Live token sequence at some depth of the coarse encoder."""

    tokens: Tensor                       # (N, d)
    roles: np.ndarray                    # (N,) role codes
    retained: np.ndarray                 # original grid index of each visual token
    records: list[AttentionRecord] = field(default_factory=list)
    h2k_done: bool = False

    def check(self) -> None:
        n_visual = int((self.roles == ROLE_VISUAL).sum())
        if self.tokens.shape[0] != self.roles.size:
            raise StateError(f"{self.tokens.shape[0]} tokens vs {self.roles.size} roles")
        if n_visual != self.retained.size:
            raise StateError(f"{n_visual} visual tokens vs {self.retained.size} retained indices")
        if self.retained.size and not np.all(np.diff(self.retained) > 0):
            raise StateError("retained indices must be strictly increasing")
        # roles partition the sequence: non-visual first, visual tail
        if n_visual and not np.all(self.roles[-n_visual:] == ROLE_VISUAL):
            raise StateError("visual tokens must form the tail of the sequence")


def initial_state(params, cfg: ModelConfig, schema: KeypointSchema,
                  visual: Tensor) -> TokenState:
    n_vis = visual.shape[0]
    retained = np.arange(n_vis)
    mode = cfg.introduction_mode
    if mode == "human-sparse-dense":
        rows = [params["human_token"]]
        roles = [ROLE_HUMAN]
    elif mode == "sparse-dense":
        rows = [params["sparse_embed"]]
        roles = [ROLE_SPARSE] * schema.n_sparse
        if schema.n_parts:
            rows.append(params["part_embed"])
            roles += [ROLE_PART] * schema.n_parts
    else:  # dense: every keypoint token from layer 1, no part tokens
        rows = [params["sparse_embed"]]
        roles = [ROLE_SPARSE] * schema.n_sparse
        if schema.n_dense:
            rows.append(params["dense_embed"])
            roles += [ROLE_DENSE] * schema.n_dense
    rows.append(visual)
    roles += [ROLE_VISUAL] * n_vis
    state = TokenState(tokens=ad.concat(rows), roles=np.array(roles), retained=retained)
    state.check()
    return state


def human_to_keypoints(state: TokenState, params, schema: KeypointSchema) -> TokenState:
    """Expand the single human token into sparse keypoint (+ part) tokens."""
    if state.h2k_done:
        raise StateError("human token already expanded")
    human_rows = np.flatnonzero(state.roles == ROLE_HUMAN)
    if human_rows.size != 1:
        raise StateError(f"expected exactly one human token, found {human_rows.size}")
    human = ad.gather_rows(state.tokens, human_rows)            # (1, d)
    rest = ad.gather_rows(state.tokens, np.flatnonzero(state.roles != ROLE_HUMAN))
    sparse = human + params["sparse_embed"]                      # broadcast over rows
    rows = [sparse]
    roles = [ROLE_SPARSE] * schema.n_sparse
    if schema.n_parts:
        rows.append(human + params["part_embed"])
        roles += [ROLE_PART] * schema.n_parts
    rows.append(rest)
    roles += list(state.roles[state.roles != ROLE_HUMAN])
    out = TokenState(tokens=ad.concat(rows), roles=np.array(roles),
                     retained=state.retained, records=state.records, h2k_done=True)
    out.check()
    return out


def _stage1_prune(state: TokenState, pruner: PruneEngine) -> TokenState:
    rec = state.records[-1]
    q_rows = rec.keypoint_query_rows()
    v_cols = rec.visual_key_columns()
    attn = rec.weights[:, q_rows][:, :, v_cols]
    dec = pruner.stage(1, None, attn, n_dense=0, current=state.retained)
    if dec is None:
        return state
    non_vis = np.flatnonzero(state.roles != ROLE_VISUAL)
    vis = np.flatnonzero(state.roles == ROLE_VISUAL)
    keep = np.concatenate([non_vis, vis[dec.retained]])
    out = TokenState(
        tokens=ad.gather_rows(state.tokens, keep),
        roles=state.roles[keep],
        retained=state.retained[dec.retained],
        records=state.records,
        h2k_done=state.h2k_done,
    )
    out.check()
    return out


def run_coarse(params, cfg: ModelConfig, schema: KeypointSchema,
               visual: Tensor, pruner: PruneEngine) -> TokenState:
    """Run all coarse layers; expansion and stage-1 pruning at h2k_index."""
    state = initial_state(params, cfg, schema, visual)
    for layer in range(cfg.coarse_layers):
        out, weights = transformer_layer(params, f"coarse.{layer}.", state.tokens, None, cfg.heads)
        state = TokenState(tokens=out, roles=state.roles, retained=state.retained,
                           records=state.records, h2k_done=state.h2k_done)
        state.records.append(AttentionRecord(
            layer=layer, group=None, weights=weights,
            query_roles=state.roles.copy(), key_roles=state.roles.copy(),
            visual_grid=state.retained.copy()))
        if layer + 1 == cfg.h2k_index:
            state = _stage1_prune(state, pruner)
            if cfg.introduction_mode == "human-sparse-dense":
                state = human_to_keypoints(state, params, schema)
        state.check()
    return state
