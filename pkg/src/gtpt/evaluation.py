"""Dataset-level evaluation: PCK at several thresholds, plus per-group PCK."""
from __future__ import annotations

import numpy as np

from .schema import GROUP_NAMES, KeypointSchema
from .synthdata import Sample


def keypoint_hits(pred: np.ndarray, gt: np.ndarray, visibility: np.ndarray,
                  threshold: float) -> np.ndarray | None:
    """Per-keypoint correctness against threshold x visible-bbox diagonal."""
    vis = np.asarray(visibility, dtype=bool)
    if not vis.any():
        return None
    gt = np.asarray(gt, dtype=np.float64)
    span = gt[vis].max(axis=0) - gt[vis].min(axis=0)
    diag = max(float(np.hypot(*span)), 1.0)
    err = np.linalg.norm(np.asarray(pred, dtype=np.float64) - gt, axis=1)
    return err <= threshold * diag


def evaluate_model(model, samples: list[Sample], schema: KeypointSchema,
                   prune: bool | None = None,
                   thresholds: tuple[float, ...] = (0.1, 0.2),
                   group_threshold: float = 0.2) -> dict:
    """Mean PCK over samples (model only needs a `.predict(image, prune=)`)."""
    group_of = np.asarray(schema.group_of)
    totals = {t: [] for t in thresholds}
    group_scores: dict[int, list[float]] = {g: [] for g in range(3)}
    for s in samples:
        pred = model.predict(s.image, prune=prune)
        vis = np.asarray(s.visibility, dtype=bool)
        if not vis.any():
            continue
        for t in thresholds:
            hits = keypoint_hits(pred, s.coords, vis, t)
            totals[t].append(float(hits[vis].mean()))
        hits = keypoint_hits(pred, s.coords, vis, group_threshold)
        for g in range(3):
            sel = vis & (group_of == g)
            if sel.any():
                group_scores[g].append(float(hits[sel].mean()))
    return {
        "samples": len(samples),
        "pck": {f"{t:g}": float(np.mean(v)) if v else None for t, v in totals.items()},
        "per_group": {GROUP_NAMES[g]: float(np.mean(v)) if v else None
                      for g, v in group_scores.items()},
    }
