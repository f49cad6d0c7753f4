"""Full model: parameter layout, initialization, and the end-to-end forward.

`parameter_layout` is the single source of truth for what exists and in what
order; initialization, checkpointing, curriculum transfer and the analytic
parameter counter all derive from it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .coarse import TokenState, run_coarse
from .fine import run_fine
from .pruning import PruneDecision, PruneEngine
from .schema import KeypointSchema, ModelConfig
from .simcc import HeatmapPair, decode, head_forward
from .tokenizer import VisualTokens, tokenize
from .transition import GroupState, build_group_state

STEM_KERNEL_TAPS = 9  # 3x3 stem kernels


def parameter_layout(cfg: ModelConfig, schema: KeypointSchema) -> list[tuple[str, tuple, str]]:
    """(name, shape, init kind) for every learnable tensor, in stable order."""
    d = cfg.embed_dim
    layout: list[tuple[str, tuple, str]] = []
    c_in = 1
    for i, c_out in enumerate(cfg.stem_channels):
        layout.append((f"stem.{i}.w", (STEM_KERNEL_TAPS * c_in, c_out), "weight"))
        layout.append((f"stem.{i}.b", (c_out,), "bias"))
        c_in = c_out
    layout.append(("patch.w", (cfg.stem_out_channels * cfg.patch_h * cfg.patch_w, d), "weight"))
    layout.append(("patch.b", (d,), "bias"))
    layout.append(("pos_embed", (cfg.n_vis, d), "embed"))
    layout.append(("human_token", (1, d), "embed"))
    layout.append(("sparse_embed", (schema.n_sparse, d), "embed"))
    if schema.n_parts:
        layout.append(("part_embed", (schema.n_parts, d), "embed"))
    if schema.n_dense:
        layout.append(("dense_embed", (schema.n_dense, d), "embed"))

    def block(prefix: str):
        layout.extend([
            (f"{prefix}ln1.g", (d,), "gain"),
            (f"{prefix}ln1.b", (d,), "bias"),
            (f"{prefix}wq", (d, d), "weight"),
            (f"{prefix}bq", (d,), "bias"),
            (f"{prefix}wk", (d, d), "weight"),
            (f"{prefix}bk", (d,), "bias"),
            (f"{prefix}wv", (d, d), "weight"),
            (f"{prefix}bv", (d,), "bias"),
            (f"{prefix}wo", (d, d), "weight"),
            (f"{prefix}bo", (d,), "bias"),
            (f"{prefix}ln2.g", (d,), "gain"),
            (f"{prefix}ln2.b", (d,), "bias"),
            (f"{prefix}ffn1.w", (d, 4 * d), "weight"),
            (f"{prefix}ffn1.b", (4 * d,), "bias"),
            (f"{prefix}ffn2.w", (4 * d, d), "weight"),
            (f"{prefix}ffn2.b", (d,), "bias"),
        ])

    for i in range(cfg.coarse_layers):
        block(f"coarse.{i}.")
    for i in range(cfg.fine_layers):
        block(f"fine.{i}.")
    if cfg.masking:
        layout.extend([
            ("mask_mlp.0.w", (d, d), "weight"),
            ("mask_mlp.0.b", (d,), "bias"),
            ("mask_mlp.1.w", (d, 3 * d), "weight"),
            ("mask_mlp.1.b", (3 * d,), "bias"),
        ])
    layout.extend([
        ("final_ln.g", (d,), "gain"),
        ("final_ln.b", (d,), "bias"),
        ("head_x.w", (d, cfg.x_bins), "weight"),
        ("head_x.b", (cfg.x_bins,), "bias"),
        ("head_y.w", (d, cfg.y_bins), "weight"),
        ("head_y.b", (cfg.y_bins,), "bias"),
    ])
    return layout


def init_params(cfg: ModelConfig, schema: KeypointSchema, dtype=np.float32) -> ParamStore:
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    for name, shape, kind in parameter_layout(cfg, schema):
        if kind in ("weight", "embed"):
            store.create(name, ad.normal_init(rng, shape, std=0.02, dtype=dtype))
        elif kind == "bias":
            store.create(name, np.zeros(shape, dtype=dtype))
        elif kind == "gain":
            store.create(name, np.ones(shape, dtype=dtype))
        else:
            raise ValueError(f"unknown init kind {kind!r}")
    return store


@dataclass
class ForwardResult:
    pair: HeatmapPair
    keypoint_tokens: Tensor
    visual: VisualTokens
    coarse: TokenState
    groups: GroupState
    decisions: list[PruneDecision]
    pruned: bool

    def coords(self) -> np.ndarray:
        return decode(self.pair)


class PoseModel:
    """Config + schema + parameters, with the composed forward pass."""

    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None,
                 dtype=np.float32):
        self.cfg = cfg
        self.schema = cfg.build_schema()
        self.dtype = dtype
        self.params = params if params is not None else init_params(cfg, self.schema, dtype)

    def forward(self, image: np.ndarray, prune: bool | None = None) -> ForwardResult:
        cfg = self.cfg
        enabled = cfg.pruning if prune is None else (prune and cfg.pruning)
        pruner = PruneEngine(cfg, enabled=enabled)
        visual = tokenize(self.params, cfg, image, dtype=self.dtype)
        state = run_coarse(self.params, cfg, self.schema, visual.tokens, pruner)
        gs = build_group_state(self.params, cfg, self.schema, state, pruner)
        gs = run_fine(self.params, cfg, self.schema, gs, pruner)
        kp = self._collect_keypoints(gs)
        pair = head_forward(self.params, cfg, kp, self.schema.n_total)
        return ForwardResult(pair=pair, keypoint_tokens=kp, visual=visual,
                             coarse=state, groups=gs, decisions=pruner.decisions,
                             pruned=enabled)

    def _collect_keypoints(self, gs: GroupState) -> Tensor:
        """Keypoint tokens in canonical schema order: sparse block, then dense."""
        if self.schema.n_dense == 0:
            return gs.sparse
        dense_parts = [g.dense for g in gs.groups if g.dense is not None]
        dense_perm = np.concatenate([g.dense_idx for g in gs.groups if g.dense is not None])
        dense = ad.gather_rows(ad.concat(dense_parts), np.argsort(dense_perm))
        return ad.concat([gs.sparse, dense])

    def predict(self, image: np.ndarray, prune: bool | None = None) -> np.ndarray:
        return self.forward(image, prune=prune).coords()
