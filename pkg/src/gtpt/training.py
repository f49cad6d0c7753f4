"""Losses, the two-pass shared-parameter training step, Adam, curriculum.

Each training step runs the model twice with the same parameters, once with
pruning and once without, supervises both outputs, and distills the unpruned
pass into the pruned one (teacher side detached). The composite objective is
the plain sum of the three terms; with the distillation switch off only the
pruned supervised term remains.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .model import PoseModel, init_params, parameter_layout
from .schema import ModelConfig
from .simcc import HeatmapPair, encode_target


class TrainingError(RuntimeError):
    pass


@dataclass
class LossBundle:
    """Per-step loss components. l_gp is their sum, exactly as reported."""

    l_pruned: float
    l_unpruned: float
    l_g2l: float
    l_gp: float
    per_keypoint: np.ndarray      # pruned-pass loss per keypoint (nan when invisible)
    n_visible: int

    def to_log(self, step: int, lr: float) -> dict:
        return {
            "step": step,
            "L_pruned": self.l_pruned,
            "L_unpruned": self.l_unpruned,
            "L_G2L": self.l_g2l,
            "L_GP": self.l_gp,
            "lr": lr,
        }


def _kl_rows(logits: Tensor, targets: np.ndarray, row_weights: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Weighted sum over rows of KL(target || softmax(logits)).

    Targets are constants. Returns the scalar graph node plus the per-row KL
    values for reporting.
    """
    logsm = ad.log_softmax_rows(logits)
    t = targets.astype(logits.dtype.type, copy=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        tlogt = np.where(t > 0, t * np.log(t), 0.0).sum(axis=1)
    cross = -(t * logsm.data).sum(axis=1)
    per_row = tlogt + cross
    w = row_weights.astype(logits.dtype.type)
    weighted = ad.mul(logsm, ad.constant(t * w[:, None], dtype=logits.dtype))
    node = ad.sum_all(weighted) * -1.0 + float((tlogt * w).sum())
    return node, per_row


def cls_loss(pair: HeatmapPair, targets_x: np.ndarray, targets_y: np.ndarray,
             visibility: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Mean KL(target || prediction) over visible keypoints and both axes.

    Returns (scalar loss node, per-keypoint breakdown with nan for invisible
    keypoints). Zero visible keypoints yield a zero loss with a warning.
    """
    if targets_x.shape != pair.logits_x.shape or targets_y.shape != pair.logits_y.shape:
        raise ad.ShapeError(
            f"target shapes {targets_x.shape}/{targets_y.shape} vs logits "
            f"{pair.logits_x.shape}/{pair.logits_y.shape}")
    vis = np.asarray(visibility, dtype=bool)
    n_vis = int(vis.sum())
    if n_vis == 0:
        warnings.warn("no visible keypoints in sample; loss is 0")
        zero = ad.constant(np.zeros((), dtype=pair.logits_x.dtype))
        return zero, np.full(vis.size, np.nan)
    w = vis.astype(np.float64) / (2.0 * n_vis)
    lx, kx = _kl_rows(pair.logits_x, targets_x, w)
    ly, ky = _kl_rows(pair.logits_y, targets_y, w)
    per_kp = np.where(vis, (kx + ky) / 2.0, np.nan)
    return lx + ly, per_kp


def g2l_loss(pruned: HeatmapPair, unpruned: HeatmapPair) -> Tensor:
    """Distill the unpruned pass into the pruned one.

    Mean KL(detach(softmax(unpruned)) || softmax(pruned)) over keypoints and
    both axes; no gradient reaches the unpruned branch through this term.
    """
    if pruned.logits_x.shape != unpruned.logits_x.shape or pruned.logits_y.shape != unpruned.logits_y.shape:
        raise ad.ShapeError(
            f"heatmap shapes differ: {pruned.logits_x.shape} vs {unpruned.logits_x.shape}")
    k = pruned.logits_x.shape[0]
    total = None
    for p_logits, u_logits in ((pruned.logits_x, unpruned.logits_x),
                               (pruned.logits_y, unpruned.logits_y)):
        teacher_logits = ad.stopgrad(u_logits)
        teacher_p = ad.softmax_rows(teacher_logits)
        teacher_logp = ad.log_softmax_rows(teacher_logits)
        student_logp = ad.log_softmax_rows(p_logits)
        diff = ad.mul(teacher_p, teacher_logp - student_logp)
        term = ad.sum_all(diff)
        total = term if total is None else total + term
    return total * (1.0 / (2.0 * k))


class Adam:
    """Adam with L2-style weight decay folded into the gradient."""

    def __init__(self, store: ParamStore, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999),
                 weight_decay: float = 1e-4, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self._v = {n: np.zeros_like(t.data) for n, t in store.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.store.items():
            g = self.store.grad(name).astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * update).astype(p.data.dtype)


def lr_at(cfg: ModelConfig, step: int) -> float:
    """Step-decay schedule: x0.1 at 2/3 of the budget and again at 26/30."""
    budget = max(cfg.train_steps, 1)
    lr = cfg.lr
    if step >= (2 * budget) // 3:
        lr *= 0.1
    if step >= (26 * budget) // 30:
        lr *= 0.1
    return lr


def train_step(model: PoseModel, batch: list, opt: Adam) -> LossBundle:
    """One optimizer update from a batch of samples.

    Runs the pruned and (if the composite loss is enabled) unpruned forward
    passes with the same parameters, one backward, one Adam step.
    """
    cfg = model.cfg
    total = None
    sum_p = sum_u = sum_g = 0.0
    per_kp_acc = np.zeros(model.schema.n_total)
    per_kp_cnt = np.zeros(model.schema.n_total)
    n_visible = 0
    w_p, w_u, w_g = cfg.gp_weights
    for sample in batch:
        tx, ty, vis = encode_target(sample.coords, sample.visibility, cfg,
                                    dtype=model.dtype)
        n_visible += int(vis.sum())
        res_p = model.forward(sample.image, prune=True)
        l_p, per_kp = cls_loss(res_p.pair, tx, ty, vis)
        finite = np.isfinite(per_kp)
        per_kp_acc[finite] += per_kp[finite]
        per_kp_cnt[finite] += 1
        sum_p += float(l_p.data)
        if cfg.gp_loss:
            res_u = model.forward(sample.image, prune=False)
            l_u, _ = cls_loss(res_u.pair, tx, ty, vis)
            l_g = g2l_loss(res_p.pair, res_u.pair)
            sum_u += float(l_u.data)
            sum_g += float(l_g.data)
            sample_loss = l_p * w_p + l_u * w_u + l_g * w_g
        else:
            sample_loss = l_p * w_p
        total = sample_loss if total is None else total + sample_loss
    loss = total * (1.0 / len(batch))
    if not np.isfinite(loss.data):
        raise TrainingError(
            f"non-finite loss: pruned={sum_p} unpruned={sum_u} g2l={sum_g}; step aborted")
    model.params.zero_grad()
    ad.backward(loss)
    opt.step()
    model.params.zero_grad()
    l_pruned = sum_p / len(batch)
    l_unpruned = sum_u / len(batch)
    l_g2l = sum_g / len(batch)
    with np.errstate(invalid="ignore"):
        per_kp_mean = np.where(per_kp_cnt > 0, per_kp_acc / np.maximum(per_kp_cnt, 1), np.nan)
    return LossBundle(
        l_pruned=l_pruned, l_unpruned=l_unpruned, l_g2l=l_g2l,
        l_gp=l_pruned + l_unpruned + l_g2l,
        per_keypoint=per_kp_mean, n_visible=n_visible)


def batch_indices(rng: np.random.Generator, n: int, batch_size: int, steps: int):
    """Deterministic shuffled-epoch batch order."""
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos:pos + batch_size]
        pos += batch_size


def train_loop(model: PoseModel, samples: list, steps: int | None = None,
               log_fn=None, ckpt_fn=None) -> list[LossBundle]:
    """Run the desk-scale schedule; returns the per-step bundles."""
    cfg = model.cfg
    steps = cfg.train_steps if steps is None else steps
    opt = Adam(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 0x5EED)
    bundles = []
    batcher = batch_indices(rng, len(samples), min(cfg.batch_size, len(samples)), steps)
    for step, idx in enumerate(batcher):
        opt.lr = lr_at(cfg, step)
        bundle = train_step(model, [samples[i] for i in idx], opt)
        bundles.append(bundle)
        if log_fn is not None:
            log_fn(bundle.to_log(step, opt.lr))
        if ckpt_fn is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            ckpt_fn(step)
    if ckpt_fn is not None:
        ckpt_fn(steps - 1)
    return bundles


def curriculum_transfer(stage1, cfg_wholebody: ModelConfig,
                        dtype=np.float32) -> tuple[ParamStore, list[str]]:
    """Initialize a whole-body store from a body-stage checkpoint.

    Shared names are copied bitwise. Names absent from stage 1 (the part and
    dense embeddings) and geometry-resized tensors (position embedding, head
    rows) are freshly initialized. Any other mismatch is an error. `stage1`
    may be a ParamStore or a plain name->array mapping.
    """
    arrays = stage1.state_dict() if isinstance(stage1, ParamStore) else dict(stage1)
    schema = cfg_wholebody.build_schema()
    fresh = init_params(cfg_wholebody, schema, dtype=dtype)
    resizable = {"pos_embed", "head_x.w", "head_x.b", "head_y.w", "head_y.b"}
    new_names: list[str] = []
    for name, t in fresh.items():
        if name not in arrays:
            new_names.append(name)
            continue
        src = arrays[name]
        if src.shape == t.data.shape:
            t.data = src.astype(dtype).copy()
        elif name in resizable:
            new_names.append(name)
        else:
            raise TrainingError(
                f"{name}: stage-1 shape {src.shape} conflicts with stage-2 {t.data.shape}")
    dropped = [n for n in arrays if n not in fresh]
    if dropped:
        raise TrainingError(f"stage-1 parameters with no stage-2 home: {dropped}")
    return fresh, new_names
