"""Image -> visual tokens: conv stem, patch flattening, linear embedding.

Feature maps are kept as flat (pixels, channels) matrices so every compute
step is a gather + matmul; convolutions are expressed the same way (im2col
with a sentinel zero row standing in for padding), which keeps the analytic
compute model and the matmul instrumentation in lockstep with execution.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .schema import ModelConfig

STEM_KERNEL = 3
STEM_STRIDE = 2
STEM_PAD = 1


@lru_cache(maxsize=None)
def conv_indices(h: int, w: int) -> np.ndarray:
    """im2col gather indices for a 3x3 stride-2 pad-1 conv on an h x w map.

    Out-of-bounds taps map to index h*w, a sentinel zero row appended to the
    flattened input.
    """
    oh, ow = h // STEM_STRIDE, w // STEM_STRIDE
    idx = np.empty((oh * ow, STEM_KERNEL * STEM_KERNEL), dtype=np.intp)
    sentinel = h * w
    n = 0
    for oy in range(oh):
        for ox in range(ow):
            cy = oy * STEM_STRIDE - STEM_PAD
            cx = ox * STEM_STRIDE - STEM_PAD
            k = 0
            for dy in range(STEM_KERNEL):
                for dx in range(STEM_KERNEL):
                    y, x = cy + dy, cx + dx
                    idx[n, k] = y * w + x if 0 <= y < h and 0 <= x < w else sentinel
                    k += 1
            n += 1
    return idx.reshape(-1)


@lru_cache(maxsize=None)
def patch_indices(h: int, w: int, ph: int, pw: int) -> np.ndarray:
    """Row-major gather indices flattening non-overlapping ph x pw patches."""
    rows, cols = h // ph, w // pw
    idx = np.empty((rows * cols, ph * pw), dtype=np.intp)
    n = 0
    for r in range(rows):
        for c in range(cols):
            k = 0
            for dy in range(ph):
                for dx in range(pw):
                    idx[n, k] = (r * ph + dy) * w + (c * pw + dx)
                    k += 1
            n += 1
    return idx.reshape(-1)


@dataclass
class VisualTokens:
    tokens: Tensor             # (n_vis, d)
    grid: tuple[int, int]      # patch grid (rows, cols)

    def patch_of(self, token_index: int) -> tuple[int, int]:
        return divmod(token_index, self.grid[1])


def image_to_flat(image: np.ndarray, dtype=np.float32) -> Tensor:
    """(h, w) or (h, w, 1) image in [0,1] -> constant (h*w, 1) tensor."""
    arr = np.asarray(image, dtype=dtype)
    if arr.ndim == 3:
        if arr.shape[2] != 1:
            raise ad.ShapeError(f"expected single-channel image, got shape {arr.shape}")
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ad.ShapeError(f"expected (h, w) image, got shape {arr.shape}")
    return ad.constant(arr.reshape(-1, 1), dtype=dtype)


def stem(params, cfg: ModelConfig, image: np.ndarray, dtype=np.float32) -> tuple[Tensor, int, int]:
    """Run the conv stem; returns (flat feature map (H*W, C), H, W)."""
    ih, iw = np.asarray(image).shape[:2]
    if ih % cfg.downsample or iw % cfg.downsample:
        raise ad.ShapeError(f"image {ih}x{iw} not divisible by stem downsample {cfg.downsample}")
    x = image_to_flat(image, dtype=dtype)
    h, w = ih, iw
    for i, _ in enumerate(cfg.stem_channels):
        zero = ad.constant(np.zeros((1, x.shape[1])), dtype=dtype)
        padded = ad.concat([x, zero])
        cols = ad.gather_rows(padded, conv_indices(h, w))
        h, w = h // STEM_STRIDE, w // STEM_STRIDE
        cols = ad.reshape(cols, (h * w, STEM_KERNEL * STEM_KERNEL * x.shape[1]))
        x = ad.gelu(ad.matmul(cols, params[f"stem.{i}.w"]) + params[f"stem.{i}.b"])
    return x, h, w


def patchify_embed(params, cfg: ModelConfig, fmap: Tensor, h: int, w: int) -> VisualTokens:
    """Flatten patches, project to the embedding dim, add position embeddings."""
    if h % cfg.patch_h or w % cfg.patch_w:
        raise ad.ShapeError(f"feature map {h}x{w} not divisible by patch {cfg.patch_h}x{cfg.patch_w}")
    rows, cols = h // cfg.patch_h, w // cfg.patch_w
    c = fmap.shape[1]
    flat = ad.gather_rows(fmap, patch_indices(h, w, cfg.patch_h, cfg.patch_w))
    flat = ad.reshape(flat, (rows * cols, cfg.patch_h * cfg.patch_w * c))
    emb = ad.matmul(flat, params["patch.w"]) + params["patch.b"]
    tokens = emb + params["pos_embed"]
    return VisualTokens(tokens=tokens, grid=(rows, cols))


def tokenize(params, cfg: ModelConfig, image: np.ndarray, dtype=np.float32) -> VisualTokens:
    fmap, h, w = stem(params, cfg, image, dtype=dtype)
    return patchify_embed(params, cfg, fmap, h, w)
