"""Coarse-to-fine transition: dense-token creation, grouping, per-group masks.

Dense keypoint tokens are born here (owning part token + a learnable
embedding), every keypoint is routed to its anatomical group, and each group
receives its own sigmoid-masked copy of the visual tokens. Stage-2 pruning
fires per group, scored from the last coarse layer's attention with the
group's keypoint-side tokens as queries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import (ROLE_DENSE, ROLE_PART, ROLE_SPARSE, ROLE_VISUAL,
                        AttentionRecord)
from .coarse import StateError, TokenState
from .pruning import PruneEngine
from .schema import KeypointSchema, ModelConfig, group_counts


@dataclass
class GroupTokens:
    """One group's live tokens inside the fine encoder."""

    group_id: int
    sparse_idx: np.ndarray          # schema sparse indices owned by this group
    dense_idx: np.ndarray           # schema dense indices (local) owned by this group
    dense: Tensor | None            # (n_dense_j, d)
    visual: Tensor                  # (n_visual_j, d)
    retained: np.ndarray            # original grid index per visual row
    mask: np.ndarray | None = None  # the sigmoid mask this group applied, for inspection

    @property
    def n_dense(self) -> int:
        return 0 if self.dense is None else self.dense.shape[0]

    @property
    def n_visual(self) -> int:
        return self.visual.shape[0]


@dataclass
class GroupState:
    """Shared sparse tokens plus the per-group token sets."""

    sparse: Tensor                  # (n_sparse, d), shared across groups
    groups: list[GroupTokens]
    records: list[AttentionRecord] = field(default_factory=list)


def make_dense(params, schema: KeypointSchema, parts: Tensor) -> Tensor:
    """Dense keypoint tokens: owning part token plus learnable embedding."""
    if schema.n_dense == 0:
        raise StateError("no dense keypoints exist in this mode")
    if parts.shape[0] != schema.n_parts:
        raise StateError(f"expected {schema.n_parts} part tokens, got {parts.shape[0]}")
    owners = ad.gather_rows(parts, np.asarray(schema.dense_owner, dtype=np.intp))
    return owners + params["dense_embed"]


def mask_visual(params, cfg: ModelConfig, visual: Tensor) -> tuple[list[Tensor], list[np.ndarray]]:
    """Per-group masked visual tokens via a small MLP with sigmoid output.

    Returns ([X_v * M_0, X_v * M_1, X_v * M_2], [M_0, M_1, M_2 values]).
    With masking disabled the masks are identically 1.
    """
    n_groups = 3 if cfg.grouping else 1
    if not cfg.masking:
        return [visual] * n_groups, [np.ones(visual.shape, dtype=visual.dtype)] * n_groups
    n_v, d = visual.shape
    hidden = ad.gelu(ad.matmul(visual, params["mask_mlp.0.w"]) + params["mask_mlp.0.b"])
    out = ad.matmul(hidden, params["mask_mlp.1.w"]) + params["mask_mlp.1.b"]  # (n_v, 3d)
    stacked = ad.permute(ad.reshape(out, (n_v, 3, d)), (1, 0, 2))             # (3, n_v, d)
    masked, masks = [], []
    for part in ad.split(stacked, [1, 1, 1]):
        m = ad.sigmoid(ad.reshape(part, (n_v, d)))
        masked.append(ad.mul(visual, m))
        masks.append(m.data)
    return masked, masks


def _record_query_rows(rec: AttentionRecord, schema: KeypointSchema, members: dict) -> np.ndarray:
    """Rows of a coarse attention record that belong to one group's tokens."""
    rows = []
    sparse_pos = np.flatnonzero(rec.query_roles == ROLE_SPARSE)
    if sparse_pos.size:
        rows.append(sparse_pos[members["sparse"]])
    part_pos = np.flatnonzero(rec.query_roles == ROLE_PART)
    if part_pos.size and members["parts"]:
        rows.append(part_pos[members["parts"]])
    dense_pos = np.flatnonzero(rec.query_roles == ROLE_DENSE)
    if dense_pos.size and members["dense"]:
        rows.append(dense_pos[members["dense"]])
    if rows:
        return np.concatenate(rows)
    # record predates the human-token expansion: fall back to every keypoint row
    return rec.keypoint_query_rows()


def _record_visual_columns(rec: AttentionRecord, retained: np.ndarray) -> np.ndarray:
    """Columns of the record covering the currently retained visual tokens."""
    cols = rec.visual_key_columns()
    col_of_grid = dict(zip(rec.visual_grid.tolist(), cols.tolist()))
    return np.array([col_of_grid[g] for g in retained.tolist()], dtype=np.intp)


def build_group_state(params, cfg: ModelConfig, schema: KeypointSchema,
                      state: TokenState, pruner: PruneEngine) -> GroupState:
    """Assemble the fine encoder's input from the coarse encoder's output."""
    roles = state.roles
    sparse_rows = np.flatnonzero(roles == ROLE_SPARSE)
    if sparse_rows.size != schema.n_sparse:
        raise StateError(f"expected {schema.n_sparse} sparse tokens, found {sparse_rows.size}")
    sparse = ad.gather_rows(state.tokens, sparse_rows)

    dense = None
    if schema.n_dense:
        if cfg.introduction_mode == "dense":
            dense = ad.gather_rows(state.tokens, np.flatnonzero(roles == ROLE_DENSE))
        else:
            parts = ad.gather_rows(state.tokens, np.flatnonzero(roles == ROLE_PART))
            dense = make_dense(params, schema, parts)

    visual = ad.gather_rows(state.tokens, np.flatnonzero(roles == ROLE_VISUAL))
    masked, masks = mask_visual(params, cfg, visual)

    members = group_counts(schema, cfg.grouping)
    covered = [i for m in members for i in m["sparse"]]
    if sorted(covered) != list(range(schema.n_sparse)):
        raise StateError("groups do not partition the sparse keypoints")

    rec = state.records[-1] if state.records else None
    groups: list[GroupTokens] = []
    for m in members:
        g = m["group"]
        dense_idx = np.asarray(m["dense"], dtype=np.intp)
        dense_g = ad.gather_rows(dense, dense_idx) if dense is not None and dense_idx.size else None
        visual_g = masked[g if cfg.grouping else 0]
        mask_g = masks[g if cfg.grouping else 0]
        retained_g = state.retained
        if pruner.enabled and rec is not None:
            q_rows = _record_query_rows(rec, schema, m)
            cols = _record_visual_columns(rec, state.retained)
            attn = rec.weights[:, q_rows][:, :, cols]
            dec = pruner.stage(2, g, attn, n_dense=dense_idx.size, current=state.retained)
            if dec is not None:
                visual_g = ad.gather_rows(visual_g, dec.retained)
                retained_g = dec.grid_indices
        groups.append(GroupTokens(
            group_id=g,
            sparse_idx=np.asarray(m["sparse"], dtype=np.intp),
            dense_idx=dense_idx,
            dense=dense_g,
            visual=visual_g,
            retained=retained_g,
            mask=mask_g,
        ))
    return GroupState(sparse=sparse, groups=groups)
