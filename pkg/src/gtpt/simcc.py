"""Coordinate classification head: per-axis 1D heatmaps, decode, targets.

Every keypoint token passes through one shared pair of linear classifiers,
one over discretized horizontal bins and one over vertical bins (bin count =
split factor x image dimension). Decoding is argmax-bin / split; training
targets are normalized discrete Gaussians centered on the scaled coordinate.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .schema import ModelConfig


@dataclass
class HeatmapPair:
    logits_x: Tensor           # (K, split * image_w)
    logits_y: Tensor           # (K, split * image_h)
    split: int
    image_hw: tuple[int, int]


def head_forward(params, cfg: ModelConfig, keypoint_tokens: Tensor, n_keypoints: int) -> HeatmapPair:
    """Shared linear classifiers over final-normalized keypoint tokens."""
    if keypoint_tokens.shape[0] != n_keypoints:
        raise ad.ShapeError(
            f"expected {n_keypoints} keypoint tokens, got {keypoint_tokens.shape[0]}")
    normed = ad.layernorm(keypoint_tokens, params["final_ln.g"], params["final_ln.b"])
    lx = ad.matmul(normed, params["head_x.w"]) + params["head_x.b"]
    ly = ad.matmul(normed, params["head_y.w"]) + params["head_y.b"]
    return HeatmapPair(logits_x=lx, logits_y=ly, split=cfg.simcc_split,
                       image_hw=(cfg.image_height, cfg.image_width))


def decode(pair: HeatmapPair) -> np.ndarray:
    """Per keypoint (x, y) in pixels: argmax bin / split, ties to lower bin."""
    bx = np.argmax(pair.logits_x.data, axis=1)
    by = np.argmax(pair.logits_y.data, axis=1)
    return np.stack([bx / pair.split, by / pair.split], axis=1).astype(np.float64)


def encode_target(coords: np.ndarray, visibility: np.ndarray, cfg: ModelConfig,
                  dtype=np.float32) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Discrete Gaussian targets per axis; out-of-bounds points go invisible.

    Returns (targets_x (K, x_bins), targets_y (K, y_bins), effective visibility).
    """
    coords = np.asarray(coords, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool).copy()
    k = coords.shape[0]
    in_bounds = (
        (coords[:, 0] >= 0) & (coords[:, 0] < cfg.image_width)
        & (coords[:, 1] >= 0) & (coords[:, 1] < cfg.image_height)
    )
    vis &= in_bounds
    tx = np.zeros((k, cfg.x_bins), dtype=dtype)
    ty = np.zeros((k, cfg.y_bins), dtype=dtype)
    bins_x = np.arange(cfg.x_bins, dtype=np.float64)
    bins_y = np.arange(cfg.y_bins, dtype=np.float64)
    s2 = 2.0 * cfg.target_sigma**2
    for i in range(k):
        if not vis[i]:
            continue
        gx = np.exp(-((bins_x - cfg.simcc_split * coords[i, 0]) ** 2) / s2)
        gy = np.exp(-((bins_y - cfg.simcc_split * coords[i, 1]) ** 2) / s2)
        tx[i] = (gx / gx.sum()).astype(dtype)
        ty[i] = (gy / gy.sum()).astype(dtype)
    return tx, ty, vis
