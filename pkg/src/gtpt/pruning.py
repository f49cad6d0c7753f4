"""Visual-token pruning: importance scores, retained counts, selection.

Importance of a visual token is a softmax pooling of its attention weights
across every (head, keypoint-query) pair: weights that stand out in *any*
head dominate the pooled score, so tokens that matter to a single subspace
survive. The retained count is a fixed budget derived from the original
visual-token count, discounted by however many dense keypoint tokens the
group already carries, so all groups end up with near-equal token counts.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .schema import ModelConfig


class PruneError(ValueError):
    pass


def softmax_pool(attn: np.ndarray) -> np.ndarray:
    """Pool an attention stack (heads, n_queries, n_visual) into scores.

    Per visual token v the pooled score is sum_ik W[i,k,v] * A[i,k,v] with
    W = softmax over all (head, query) pairs of that token's column.
    """
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise PruneError(f"expected (heads, queries, visual) attention, got shape {attn.shape}")
    if a.shape[2] == 0:
        raise PruneError("no visual tokens to score")
    e = np.exp(a)
    return (e * a).sum(axis=(0, 1)) / e.sum(axis=(0, 1))


def retained_count(alpha: float, n_vis: int, n_dense: int) -> int:
    """Number of visual tokens a pruning stage keeps.

    `n_vis` is the ORIGINAL visual-token count (not what currently remains);
    `n_dense` is the group's dense-token count (0 at stage 1). The floor is
    evaluated with a 1e-9 nudge so rational rates like 0.8 behave like exact
    arithmetic. Groups so dense-heavy that the budget goes non-positive keep
    a single visual token.
    """
    if not 0.0 <= alpha < 1.0:
        raise PruneError(f"pruning rate must lie in [0, 1), got {alpha}")
    if n_vis < 1:
        raise PruneError(f"original visual count must be >= 1, got {n_vis}")
    return max(1, math.floor((1.0 - alpha) * n_vis + 1e-9) - n_dense)


def select(scores: np.ndarray, n_keep: int) -> np.ndarray:
    """Indices of the n_keep largest scores, ascending, ties to lower index."""
    scores = np.asarray(scores)
    if n_keep > scores.size:
        warnings.warn(f"select: asked for {n_keep} of {scores.size} tokens, clamping")
        n_keep = scores.size
    order = np.argsort(-scores, kind="stable")  # stable: equal scores keep index order
    return np.sort(order[:n_keep])


@dataclass
class PruneDecision:
    """Record of one pruning event."""

    stage: int
    group: int | None
    scores: np.ndarray           # over the visual tokens current at this stage
    retained: np.ndarray         # ascending indices into `scores`
    alpha: float
    n_hat: int
    n_dense: int
    grid_indices: np.ndarray     # retained indices mapped to the original patch grid
    clamped: bool

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "group": self.group,
            "scores": [float(s) for s in self.scores],
            "retained": [int(i) for i in self.retained],
            "alpha": self.alpha,
            "n_hat": self.n_hat,
            "n_dense": self.n_dense,
            "grid_indices": [int(i) for i in self.grid_indices],
            "clamped": self.clamped,
        }


class PruneEngine:
    """Stage hooks shared by both encoders; collects every decision made."""

    def __init__(self, cfg: ModelConfig, enabled: bool | None = None):
        self.cfg = cfg
        self.enabled = cfg.pruning if enabled is None else bool(enabled)
        self.decisions: list[PruneDecision] = []

    def stage(self, stage: int, group: int | None, attn: np.ndarray,
              n_dense: int, current: np.ndarray) -> PruneDecision | None:
        """Run one pruning stage; None when pruning is disabled.

        `attn` is (heads, group queries, current visual); `current` maps the
        stage's visual tokens back to original patch-grid indices.
        """
        if not self.enabled:
            return None
        alpha = self.cfg.alphas[stage - 1]
        current = np.asarray(current)
        budget = retained_count(alpha, self.cfg.n_vis, n_dense)
        clamped = budget == 1 and (math.floor((1.0 - alpha) * self.cfg.n_vis + 1e-9) - n_dense) < 1
        n_hat = min(budget, current.size)
        scores = softmax_pool(attn)
        kept = select(scores, n_hat)
        dec = PruneDecision(
            stage=stage, group=group, scores=scores, retained=kept,
            alpha=alpha, n_hat=n_hat, n_dense=n_dense,
            grid_indices=current[kept], clamped=clamped or n_hat < budget,
        )
        self.decisions.append(dec)
        return dec
