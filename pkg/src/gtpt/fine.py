"""Fine encoder: per-group transformer layers with shared sparse tokens.

Each group attends over its own tokens; with grouped attention enabled the
key/value sequence prepends the full shared sparse-token matrix so groups
still exchange global context. After every layer the shared matrix is
reassembled from each group's updated rows. Stage-3 pruning fires per group
mid-encoder.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .attention import (ROLE_DENSE, ROLE_SPARSE, ROLE_VISUAL, AttentionRecord,
                        transformer_layer)
from .coarse import StateError
from .pruning import PruneEngine, retained_count
from .schema import KeypointSchema, ModelConfig
from .transition import GroupState, GroupTokens


def fine_layer(params, cfg: ModelConfig, gs: GroupState, layer: int) -> GroupState:
    """One group-transformer layer over every group, plus sparse writeback."""
    prefix = f"fine.{layer}."
    shared = gs.sparse
    new_groups: list[GroupTokens] = []
    sparse_outs = []
    for g in gs.groups:
        sizes = [int(g.sparse_idx.size)]
        rows = [ad.gather_rows(shared, g.sparse_idx)]
        q_roles = [ROLE_SPARSE] * sizes[0]
        if g.dense is not None:
            rows.append(g.dense)
            sizes.append(g.n_dense)
            q_roles += [ROLE_DENSE] * g.n_dense
        rows.append(g.visual)
        sizes.append(g.n_visual)
        q_roles += [ROLE_VISUAL] * g.n_visual
        x = ad.concat(rows)
        if cfg.mhga:
            kv_rows = [shared]
            k_roles = [ROLE_SPARSE] * shared.shape[0]
            if g.dense is not None:
                kv_rows.append(g.dense)
                k_roles += [ROLE_DENSE] * g.n_dense
            kv_rows.append(g.visual)
            k_roles += [ROLE_VISUAL] * g.n_visual
            kv = ad.concat(kv_rows)
        else:
            kv = None
            k_roles = q_roles
        out, weights = transformer_layer(params, prefix, x, kv, cfg.heads)
        gs.records.append(AttentionRecord(
            layer=layer, group=g.group_id, weights=weights,
            query_roles=np.array(q_roles), key_roles=np.array(k_roles),
            visual_grid=g.retained.copy()))
        pieces = ad.split(out, sizes)
        sparse_outs.append(pieces[0])
        dense_out = pieces[1] if g.dense is not None else None
        visual_out = pieces[-1]
        new_groups.append(GroupTokens(
            group_id=g.group_id, sparse_idx=g.sparse_idx, dense_idx=g.dense_idx,
            dense=dense_out, visual=visual_out, retained=g.retained, mask=g.mask))
    # reassemble the shared sparse matrix from each group's updated rows
    perm = np.concatenate([g.sparse_idx for g in gs.groups])
    new_sparse = ad.gather_rows(ad.concat(sparse_outs), np.argsort(perm))
    return GroupState(sparse=new_sparse, groups=new_groups, records=gs.records)


def _stage3_prune(cfg: ModelConfig, gs: GroupState, layer: int, pruner: PruneEngine) -> GroupState:
    new_groups = []
    for g in gs.groups:
        rec = next(r for r in reversed(gs.records)
                   if r.layer == layer and r.group == g.group_id)
        q_rows = rec.keypoint_query_rows()
        cols = rec.visual_key_columns()
        attn = rec.weights[:, q_rows][:, :, cols]
        dec = pruner.stage(3, g.group_id, attn, n_dense=g.n_dense, current=g.retained)
        if dec is None:
            new_groups.append(g)
            continue
        new_groups.append(GroupTokens(
            group_id=g.group_id, sparse_idx=g.sparse_idx, dense_idx=g.dense_idx,
            dense=g.dense, visual=ad.gather_rows(g.visual, dec.retained),
            retained=dec.grid_indices, mask=g.mask))
    return GroupState(sparse=gs.sparse, groups=new_groups, records=gs.records)


def check_budgets(cfg: ModelConfig, gs: GroupState, after_stage3: bool) -> None:
    """Per-group token budget bookkeeping (skipped for clamped groups)."""
    if not after_stage3:
        return
    budget = math.floor((1.0 - cfg.alpha3) * cfg.n_vis + 1e-9)
    for g in gs.groups:
        if g.n_visual == 1 and budget - g.n_dense < 1:
            continue  # dense-heavy group clamped to its single-token floor
        if g.n_dense + g.n_visual > budget + int(g.sparse_idx.size):
            raise StateError(
                f"group {g.group_id} exceeds token budget: "
                f"{g.n_dense}+{g.n_visual} > {budget}+{g.sparse_idx.size}")


def run_fine(params, cfg: ModelConfig, schema: KeypointSchema,
             gs: GroupState, pruner: PruneEngine) -> GroupState:
    """Run all fine layers; stage-3 pruning fires after fine_prune_index."""
    stage3_done = False
    for layer in range(cfg.fine_layers):
        gs = fine_layer(params, cfg, gs, layer)
        if layer + 1 == cfg.fine_prune_index and pruner.enabled:
            gs = _stage3_prune(cfg, gs, layer, pruner)
            stage3_done = True
        check_budgets(cfg, gs, stage3_done)
    return gs
