"""Analytic parameter and FLOPs accounting, cross-checked by instrumentation.

Conventions: one matmul multiply-accumulate = 2 FLOPs; softmax, layernorm and
the pointwise nonlinearities cost 5 FLOPs per element; residual adds, bias
adds and embedding adds are not counted. The matmul portion is exact by
construction: `mac_oracle` runs the real forward with a counting hook on
every matmul, and the analytic count must equal twice that number.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import count_macs
from .model import PoseModel, parameter_layout
from .pruning import retained_count
from .schema import KeypointSchema, ModelConfig, group_counts

NORM_FLOPS_PER_ELEM = 5


@dataclass
class CostRow:
    module: str
    detail: str
    params: int
    matmul_flops: int
    norm_flops: int

    @property
    def total_flops(self) -> int:
        return self.matmul_flops + self.norm_flops


@dataclass
class CostReport:
    pruned: bool
    rows: list[CostRow]
    params_total: int
    matmul_flops: int
    norm_flops: int
    total_flops: int
    total_flops_pruned: int
    total_flops_unpruned: int
    reduction_pct: float
    clamped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pruned": self.pruned,
            "params_total": self.params_total,
            "matmul_flops": self.matmul_flops,
            "norm_flops": self.norm_flops,
            "total_flops": self.total_flops,
            "total_flops_pruned": self.total_flops_pruned,
            "total_flops_unpruned": self.total_flops_unpruned,
            "reduction_pct": self.reduction_pct,
            "clamped": self.clamped,
            "rows": [{
                "module": r.module, "detail": r.detail, "params": r.params,
                "matmul_flops": r.matmul_flops, "norm_flops": r.norm_flops,
                "total_flops": r.total_flops,
            } for r in self.rows],
        }

    def table(self) -> str:
        headers = ("module", "detail", "params", "matmul_flops", "norm_flops", "total")
        cells = [[r.module, r.detail, str(r.params), str(r.matmul_flops),
                  str(r.norm_flops), str(r.total_flops)] for r in self.rows]
        cells.append(["total", "pruned" if self.pruned else "unpruned",
                      str(self.params_total), str(self.matmul_flops),
                      str(self.norm_flops), str(self.total_flops)])
        widths = [max(len(h), *(len(row[i]) for row in cells)) for i, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
        lines.append("  ".join("-" * w for w in widths))
        for row in cells:
            lines.append("  ".join(
                row[i].ljust(widths[i]) if i < 2 else row[i].rjust(widths[i])
                for i in range(len(headers))))
        lines.append(
            f"pruned/unpruned: {self.total_flops_pruned}/{self.total_flops_unpruned} "
            f"(reduction {self.reduction_pct:.1f}%)")
        if self.clamped:
            lines.append("clamped stages: " + ", ".join(self.clamped))
        return "\n".join(lines)


def count_params(cfg: ModelConfig, schema: KeypointSchema | None = None) -> int:
    """Exact learnable-scalar count (must equal the live store's size)."""
    schema = schema or cfg.build_schema()
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_layout(cfg, schema))


def _visual_schedule(cfg: ModelConfig, schema: KeypointSchema, pruned: bool):
    """Visual-token counts per stage, mirroring the prune engine exactly."""
    members = group_counts(schema, cfg.grouping)
    v0 = cfg.n_vis
    clamped: list[str] = []

    def stage(alpha, n_dense, remaining, label):
        budget = retained_count(alpha, cfg.n_vis, n_dense)
        kept = min(budget, remaining)
        if (budget == 1 and math.floor((1 - alpha) * cfg.n_vis + 1e-9) - n_dense < 1) or kept < budget:
            clamped.append(label)
        return kept

    stage1_fires = pruned and cfg.coarse_layers >= 1
    v1 = stage(cfg.alpha1, 0, v0, "stage1") if stage1_fires else v0
    stage2_fires = pruned and cfg.coarse_layers >= 1
    v2 = {}
    v3 = {}
    for m in members:
        g = m["group"]
        nd = len(m["dense"])
        v2[g] = stage(cfg.alpha2, nd, v1, f"stage2/g{g}") if stage2_fires else v1
        stage3_fires = pruned and cfg.fine_layers >= cfg.fine_prune_index >= 1
        v3[g] = stage(cfg.alpha3, nd, v2[g], f"stage3/g{g}") if stage3_fires else v2[g]
    return members, v0, v1, v2, v3, clamped


def _layer_cost(n_q: int, n_k: int | None, d: int, heads: int) -> tuple[int, int]:
    """(matmul MACs, norm elements) for one pre-norm transformer layer."""
    shared_kv = n_k is None
    nk = n_q if shared_kv else n_k
    macs = n_q * d * d            # wq
    macs += 2 * nk * d * d        # wk, wv
    macs += 2 * n_q * nk * d      # scores + context, summed over heads
    macs += n_q * d * d           # wo
    macs += 8 * n_q * d * d       # ffn
    norm_elems = n_q * d if shared_kv else (n_q + nk) * d   # ln1
    norm_elems += heads * n_q * nk                           # softmax
    norm_elems += n_q * d                                    # ln2
    norm_elems += n_q * 4 * d                                # gelu
    return macs, norm_elems


def _param_sums(cfg: ModelConfig, schema: KeypointSchema) -> dict:
    sums: dict[str, int] = {}
    for name, shape, _ in parameter_layout(cfg, schema):
        key = name.split(".")[0]
        if name.startswith(("coarse.", "fine.")):
            key = ".".join(name.split(".")[:2])
        sums[key] = sums.get(key, 0) + int(np.prod(shape))
    return sums


def _flop_rows(cfg: ModelConfig, schema: KeypointSchema, pruned: bool):
    d = cfg.embed_dim
    rows: list[CostRow] = []
    psums = _param_sums(cfg, schema)
    members, v0, v1, v2, v3, clamped = _visual_schedule(cfg, schema, pruned)

    # tokenizer: conv stem + patch embedding
    h, w = cfg.image_height, cfg.image_width
    c_in = 1
    for i, c_out in enumerate(cfg.stem_channels):
        h, w = h // 2, w // 2
        macs = h * w * 9 * c_in * c_out
        rows.append(CostRow("stem", f"conv{i} {c_in}->{c_out} @{h}x{w}",
                            psums.get(f"stem", 0) if i == 0 else 0,
                            2 * macs, NORM_FLOPS_PER_ELEM * h * w * c_out))
        c_in = c_out
    patch_in = cfg.stem_out_channels * cfg.patch_h * cfg.patch_w
    rows.append(CostRow("tokenizer", f"patch embed {cfg.n_vis}x{patch_in}->{d}",
                        psums.get("patch", 0) + psums.get("pos_embed", 0),
                        2 * cfg.n_vis * patch_in * d, 0))

    # embeddings row (parameters only)
    embed_params = (psums.get("human_token", 0) + psums.get("sparse_embed", 0)
                    + psums.get("part_embed", 0) + psums.get("dense_embed", 0))
    rows.append(CostRow("embeddings", "keypoint/part/human tokens", embed_params, 0, 0))

    # coarse encoder
    if cfg.introduction_mode == "human-sparse-dense":
        r_before, r_after = 1, schema.n_sparse + schema.n_parts
    elif cfg.introduction_mode == "sparse-dense":
        r_before = r_after = schema.n_sparse + schema.n_parts
    else:
        r_before = r_after = schema.n_sparse + schema.n_dense
    for layer in range(cfg.coarse_layers):
        if layer + 1 <= cfg.h2k_index:
            n = r_before + v0
        else:
            n = r_after + v1
        macs, norm = _layer_cost(n, None, d, cfg.heads)
        rows.append(CostRow(f"coarse.{layer}", f"{n} tokens",
                            psums.get(f"coarse.{layer}", 0), 2 * macs,
                            NORM_FLOPS_PER_ELEM * norm))

    # transition: group masks
    if cfg.masking:
        macs = v1 * d * d + v1 * d * 3 * d
        norm = v1 * d + v1 * 3 * d  # gelu + sigmoid
        rows.append(CostRow("transition", f"mask mlp over {v1} tokens",
                            psums.get("mask_mlp", 0), 2 * macs,
                            NORM_FLOPS_PER_ELEM * norm))

    # fine encoder
    for layer in range(cfg.fine_layers):
        macs = 0
        norm = 0
        counts = []
        for m in members:
            g = m["group"]
            nv = v2[g] if layer + 1 <= cfg.fine_prune_index or cfg.fine_prune_index == 0 else v3[g]
            nd = len(m["dense"])
            nq = len(m["sparse"]) + nd + nv
            nk = (schema.n_sparse + nd + nv) if cfg.mhga else None
            m_macs, m_norm = _layer_cost(nq, nk, d, cfg.heads)
            macs += m_macs
            norm += m_norm
            counts.append(f"g{g}:{nq}q/{nk if nk is not None else nq}k")
        rows.append(CostRow(f"fine.{layer}", " ".join(counts),
                            psums.get(f"fine.{layer}", 0), 2 * macs,
                            NORM_FLOPS_PER_ELEM * norm))

    # head
    k_total = schema.n_total
    macs = k_total * d * (cfg.x_bins + cfg.y_bins)
    norm = k_total * d  # final layernorm
    head_params = (psums.get("final_ln", 0) + psums.get("head_x", 0)
                   + psums.get("head_y", 0))
    rows.append(CostRow("head", f"{k_total} keypoints -> {cfg.x_bins}+{cfg.y_bins} bins",
                        head_params, 2 * macs, NORM_FLOPS_PER_ELEM * norm))
    return rows, clamped


def count_flops(cfg: ModelConfig, schema: KeypointSchema | None = None,
                pruned: bool = True) -> CostReport:
    """Analytic cost report for one execution variant (pruned or not)."""
    schema = schema or cfg.build_schema()
    rows, clamped = _flop_rows(cfg, schema, pruned)
    rows_p, _ = _flop_rows(cfg, schema, True)
    rows_u, _ = _flop_rows(cfg, schema, False)
    total_p = sum(r.total_flops for r in rows_p)
    total_u = sum(r.total_flops for r in rows_u)
    return CostReport(
        pruned=pruned,
        rows=rows,
        params_total=count_params(cfg, schema),
        matmul_flops=sum(r.matmul_flops for r in rows),
        norm_flops=sum(r.norm_flops for r in rows),
        total_flops=sum(r.total_flops for r in rows),
        total_flops_pruned=total_p,
        total_flops_unpruned=total_u,
        reduction_pct=100.0 * (1.0 - total_p / total_u) if total_u else 0.0,
        clamped=clamped,
    )


def mac_oracle(cfg: ModelConfig, schema: KeypointSchema | None = None,
               pruned: bool = True) -> int:
    """Instrumented MAC count from actually running the forward pass."""
    model = PoseModel(cfg)
    rng = np.random.default_rng(cfg.seed)
    image = rng.random((cfg.image_height, cfg.image_width)).astype(np.float32)
    with count_macs() as box:
        model.forward(image, prune=pruned)
    return box[0]
