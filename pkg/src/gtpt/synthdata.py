"""Deterministic synthetic articulated-skeleton dataset.

Samples are 2D stick figures: a kinematic chain (pelvis -> hips/shoulders ->
limbs -> head) posed by seeded angle/length jitter, rendered as soft line
segments plus Gaussian joint blobs. Whole-body mode decorates the face, hands
and feet with dense point clusters. Every sample is addressed by its own seed
so generation is reproducible and embarrassingly parallel.
"""
from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .schema import KeypointSchema

DATASET_MAGIC = b"GSYN"
DATASET_VERSION = 1

# joint connectivity for rendering, by sparse index
SKELETON_EDGES = (
    (0, 1), (0, 2), (1, 3), (2, 4),          # head
    (5, 6), (5, 7), (7, 9), (6, 8), (8, 10),  # shoulders/arms
    (5, 11), (6, 12), (11, 12),               # torso
    (11, 13), (13, 15), (12, 14), (14, 16),   # legs
)


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class SkeletonGeometry:
    """Pose-sampling ranges; lengths are fractions of image height."""

    root_x: tuple[float, float] = (0.42, 0.58)   # fraction of width
    root_y: tuple[float, float] = (0.42, 0.52)   # fraction of height
    torso: float = 0.20
    neck: float = 0.05
    head: float = 0.07
    shoulder_w: float = 0.16
    hip_w: float = 0.10
    eye_dx: float = 0.022
    eye_dy: float = 0.018
    ear_dx: float = 0.045
    upper_arm: float = 0.12
    lower_arm: float = 0.11
    thigh: float = 0.14
    shin: float = 0.13
    length_jitter: float = 0.12      # relative length noise
    torso_tilt: float = 0.20         # radians
    arm_swing: float = 0.7
    leg_swing: float = 0.35
    occlusion_prob: float = 0.03
    blob_sigma: float = 1.1          # pixels
    line_sigma: float = 0.7
    line_gain: float = 0.5
    noise: float = 0.02
    face_radius: float = 0.045
    hand_radius: float = 0.035
    foot_radius: float = 0.028


@dataclass
class Sample:
    image: np.ndarray       # (h, w) float32 in [0, 1]
    coords: np.ndarray      # (K, 2) float32 pixel (x, y)
    visibility: np.ndarray  # (K,) bool
    seed: int


def _rot(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def sample_skeleton(seed: int, schema: KeypointSchema, geom: SkeletonGeometry,
                    h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample keypoint coordinates + visibility for one figure.

    Zero jitter, zero swing ranges and zero occlusion give the canonical
    T-pose: arms horizontal at shoulder height, legs straight down.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0D1]))
    s = float(h)

    def length(base):
        return base * s * (1.0 + geom.length_jitter * rng.uniform(-1, 1))

    def swing(rad):
        return rng.uniform(-rad, rad)

    root = np.array([rng.uniform(*geom.root_x) * w, rng.uniform(*geom.root_y) * h])
    up = _rot(swing(geom.torso_tilt)) @ np.array([0.0, -1.0])
    side = np.array([-up[1], up[0]])          # unit vector to the figure's left in image space
    neck_base = root + up * length(geom.torso)
    nose = neck_base + up * length(geom.neck + geom.head)

    pts = np.zeros((schema.n_sparse, 2))
    pts[0] = nose
    pts[1] = nose + side * geom.eye_dx * s + up * geom.eye_dy * s   # left eye
    pts[2] = nose - side * geom.eye_dx * s + up * geom.eye_dy * s   # right eye
    pts[3] = nose + side * geom.ear_dx * s                                   # left ear
    pts[4] = nose - side * geom.ear_dx * s                                   # right ear
    l_sh = neck_base + side * (geom.shoulder_w / 2) * s
    r_sh = neck_base - side * (geom.shoulder_w / 2) * s
    pts[5], pts[6] = l_sh, r_sh
    # T-pose arm directions: straight out along +/- side
    for sh_idx, el_idx, wr_idx, sign in ((5, 7, 9, 1.0), (6, 8, 10, -1.0)):
        base_dir = side * sign
        upper = _rot(swing(geom.arm_swing)) @ base_dir
        pts[el_idx] = pts[sh_idx] + upper * length(geom.upper_arm)
        lower = _rot(swing(geom.arm_swing)) @ upper
        pts[wr_idx] = pts[el_idx] + lower * length(geom.lower_arm)
    l_hip = root + side * (geom.hip_w / 2) * s
    r_hip = root - side * (geom.hip_w / 2) * s
    pts[11], pts[12] = l_hip, r_hip
    down = -up
    for hip_idx, kn_idx, an_idx in ((11, 13, 15), (12, 14, 16)):
        thigh = _rot(swing(geom.leg_swing)) @ down
        pts[kn_idx] = pts[hip_idx] + thigh * length(geom.thigh)
        shin = _rot(swing(geom.leg_swing)) @ thigh
        pts[an_idx] = pts[kn_idx] + shin * length(geom.shin)

    coords = [pts]
    if schema.n_dense:
        anchors = {"face": nose, "left_hand": pts[9], "right_hand": pts[10],
                   "left_foot": pts[15], "right_foot": pts[16]}
        radii = {"face": geom.face_radius, "left_hand": geom.hand_radius,
                 "right_hand": geom.hand_radius, "left_foot": geom.foot_radius,
                 "right_foot": geom.foot_radius}
        dense = np.zeros((schema.n_dense, 2))
        for part_idx, part in enumerate(schema.part_names):
            idxs = [i for i, o in enumerate(schema.dense_owner) if o == part_idx]
            r = radii[part] * s
            for k, i in enumerate(idxs):
                ang = 2 * math.pi * k / len(idxs)
                jitter = rng.uniform(-0.25, 0.25, size=2) * r
                dense[i] = anchors[part] + r * np.array([math.cos(ang), math.sin(ang)]) + jitter
        coords.append(dense)
    coords = np.concatenate(coords).astype(np.float32)

    occluded = rng.random(schema.n_total) < geom.occlusion_prob
    in_bounds = ((coords[:, 0] >= 0) & (coords[:, 0] <= w - 1)
                 & (coords[:, 1] >= 0) & (coords[:, 1] <= h - 1))
    vis = in_bounds & ~occluded
    return coords, vis


def render(coords: np.ndarray, visibility: np.ndarray, h: int, w: int,
           geom: SkeletonGeometry = SkeletonGeometry(),
           noise_rng: np.random.Generator | None = None) -> np.ndarray:
    """Soft-rendered stick figure: line segments + joint blobs, clipped to [0,1]."""
    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.stack([xs, ys], axis=-1).astype(np.float64)  # (h, w, 2) as (x, y)
    img = np.zeros((h, w), dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    n_sparse = min(17, coords.shape[0])
    for a, b in SKELETON_EDGES:
        if a >= n_sparse or b >= n_sparse or not (vis[a] and vis[b]):
            continue
        p, q = coords[a].astype(np.float64), coords[b].astype(np.float64)
        seg = q - p
        seg_len2 = float(seg @ seg)
        if seg_len2 < 1e-12:
            continue
        t = np.clip(((grid - p) @ seg) / seg_len2, 0.0, 1.0)
        closest = p + t[..., None] * seg
        d2 = ((grid - closest) ** 2).sum(axis=-1)
        img += geom.line_gain * np.exp(-d2 / (2 * geom.line_sigma**2))
    for i in range(coords.shape[0]):
        if not vis[i]:
            continue
        d2 = ((grid - coords[i].astype(np.float64)) ** 2).sum(axis=-1)
        img += np.exp(-d2 / (2 * geom.blob_sigma**2))
    if noise_rng is not None and geom.noise > 0:
        img += geom.noise * noise_rng.random((h, w))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_sample(seed: int, schema: KeypointSchema, h: int, w: int,
                geom: SkeletonGeometry = SkeletonGeometry(),
                max_retries: int = 20) -> Sample:
    for attempt in range(max_retries):
        coords, vis = sample_skeleton(seed + attempt * 1_000_003, schema, geom, h, w)
        if vis.any():
            noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A6E]))
            image = render(coords, vis, h, w, geom, noise_rng)
            return Sample(image=image, coords=coords, visibility=vis, seed=seed)
    raise DataError(f"all joints invisible after {max_retries} resamples (seed {seed})")


def generate_dataset(seed: int, count: int, schema: KeypointSchema, h: int, w: int,
                     geom: SkeletonGeometry = SkeletonGeometry()) -> list[Sample]:
    """Seed-addressed samples; GTPT_THREADS > 1 parallelizes generation."""
    seeds = [seed + i for i in range(count)]
    workers = int(os.environ.get("GTPT_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda s: make_sample(s, schema, h, w, geom), seeds))
    return [make_sample(s, schema, h, w, geom) for s in seeds]


# ---------------------------------------------------------------------------
# dataset file format: little-endian, magic GSYN


def save_dataset(path: str, samples: list[Sample]) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(samples)))
        for s in samples:
            h, w = s.image.shape
            k = s.coords.shape[0]
            fh.write(struct.pack("<HH", h, w))
            fh.write(s.image.astype("<f4").tobytes())
            fh.write(struct.pack("<H", k))
            fh.write(s.coords.astype("<f4").tobytes())
            fh.write(np.asarray(s.visibility, dtype=np.uint8).tobytes())
            fh.write(struct.pack("<Q", s.seed))


def load_dataset(path: str) -> list[Sample]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DATASET_MAGIC:
        raise DataError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != DATASET_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    off = 12
    samples = []
    for _ in range(count):
        h, w = struct.unpack_from("<HH", data, off)
        off += 4
        image = np.frombuffer(data, dtype="<f4", count=h * w, offset=off).reshape(h, w).copy()
        off += 4 * h * w
        (k,) = struct.unpack_from("<H", data, off)
        off += 2
        coords = np.frombuffer(data, dtype="<f4", count=2 * k, offset=off).reshape(k, 2).copy()
        off += 8 * k
        vis = np.frombuffer(data, dtype=np.uint8, count=k, offset=off).astype(bool)
        off += k
        (seed,) = struct.unpack_from("<Q", data, off)
        off += 8
        samples.append(Sample(image=image, coords=coords, visibility=vis, seed=seed))
    return samples


# ---------------------------------------------------------------------------
# metric


def pck(pred: np.ndarray, gt: np.ndarray, visibility: np.ndarray,
        threshold: float = 0.2) -> float | None:
    """Fraction of visible keypoints within threshold x bbox diagonal.

    The diagonal comes from the visible ground-truth points (floored at one
    pixel). None when nothing is visible.
    """
    vis = np.asarray(visibility, dtype=bool)
    if not vis.any():
        return None
    gt_v = np.asarray(gt, dtype=np.float64)[vis]
    pred_v = np.asarray(pred, dtype=np.float64)[vis]
    span = gt_v.max(axis=0) - gt_v.min(axis=0)
    diag = max(float(np.hypot(*span)), 1.0)
    err = np.linalg.norm(pred_v - gt_v, axis=1)
    return float((err <= threshold * diag).mean())
