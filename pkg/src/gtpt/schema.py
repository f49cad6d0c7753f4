"""Keypoint vocabularies, the three-group partition, and model configuration.

Keypoints come in two kinds: the 17 body joints ("sparse") and the extra
face/hand/foot points ("dense") that whole-body mode adds. Five part tokens
(face, both hands, both feet) stand in for the dense points until the network
is deep enough to expand them. Every keypoint and part belongs to exactly one
of three groups: head (0), upper body (1), lower body (2).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

GROUP_HEAD, GROUP_UPPER, GROUP_LOWER = 0, 1, 2
GROUP_NAMES = ("head", "upper", "lower")

BODY_JOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip", "left_knee", "right_knee",
    "left_ankle", "right_ankle",
)

# anatomical group of each body joint, in BODY_JOINTS order
_BODY_GROUPS = (0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2)

PART_NAMES = ("face", "left_hand", "right_hand", "left_foot", "right_foot")
_PART_GROUPS = (0, 1, 1, 2, 2)

# standard whole-body dense counts per region
FULL_FACE_POINTS = 68
FULL_HAND_POINTS = 21
FULL_FOOT_POINTS = 3


class SchemaError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field."""


@dataclass(frozen=True)
class KeypointSchema:
    """Immutable description of one dataset mode's keypoint layout."""

    mode: str
    sparse_names: tuple[str, ...]
    dense_names: tuple[str, ...]
    part_names: tuple[str, ...]
    group_of: tuple[int, ...]      # per keypoint index (sparse first, then dense)
    part_group: tuple[int, ...]    # per part index
    dense_owner: tuple[int, ...]   # per dense index -> owning part index

    @property
    def n_sparse(self) -> int:
        return len(self.sparse_names)

    @property
    def n_dense(self) -> int:
        return len(self.dense_names)

    @property
    def n_parts(self) -> int:
        return len(self.part_names)

    @property
    def n_total(self) -> int:
        return self.n_sparse + self.n_dense

    @property
    def keypoint_names(self) -> tuple[str, ...]:
        return self.sparse_names + self.dense_names

    def sparse_group(self, g: int) -> list[int]:
        """Sparse keypoint indices belonging to group g."""
        return [i for i in range(self.n_sparse) if self.group_of[i] == g]

    def dense_group(self, g: int) -> list[int]:
        """Dense keypoint indices (local, 0-based) belonging to group g."""
        return [i for i in range(self.n_dense) if self.group_of[self.n_sparse + i] == g]

    def part_group_members(self, g: int) -> list[int]:
        return [i for i in range(self.n_parts) if self.part_group[i] == g]

    def validate(self) -> None:
        if self.mode not in ("body", "wholebody"):
            raise SchemaError(f"unknown mode {self.mode!r}")
        if len(self.group_of) != self.n_total:
            raise SchemaError("group_of must cover every keypoint")
        if set(self.group_of) - {0, 1, 2}:
            raise SchemaError("group ids must lie in {0,1,2}")
        if self.mode == "body" and (self.n_dense or self.n_parts):
            raise SchemaError("body mode has no dense keypoints or part tokens")
        if self.mode == "wholebody" and self.n_parts != len(PART_NAMES):
            raise SchemaError(f"wholebody mode needs {len(PART_NAMES)} part tokens")
        if len(self.dense_owner) != self.n_dense:
            raise SchemaError("dense_owner must cover every dense keypoint")
        for i, owner in enumerate(self.dense_owner):
            if not 0 <= owner < self.n_parts:
                raise SchemaError(f"dense keypoint {i} has invalid owner {owner}")
            if self.group_of[self.n_sparse + i] != self.part_group[owner]:
                raise SchemaError(f"dense keypoint {i} group differs from its owner part's group")


def build_schema(mode: str, face_points: int = FULL_FACE_POINTS,
                 hand_points: int = FULL_HAND_POINTS,
                 foot_points: int = FULL_FOOT_POINTS) -> KeypointSchema:
    """Build the keypoint layout for a dataset mode.

    Defaults give the standard layouts (17 body joints; 133 total in
    whole-body mode). The per-region dense counts are configurable so small
    synthetic setups can shrink the dense sets without changing structure.
    """
    if mode not in ("body", "wholebody"):
        raise SchemaError(f"unknown mode {mode!r} (expected 'body' or 'wholebody')")
    if mode == "body":
        schema = KeypointSchema(
            mode="body",
            sparse_names=BODY_JOINTS,
            dense_names=(),
            part_names=(),
            group_of=_BODY_GROUPS,
            part_group=(),
            dense_owner=(),
        )
        schema.validate()
        return schema

    for label, n in (("face_points", face_points), ("hand_points", hand_points),
                     ("foot_points", foot_points)):
        if n < 1:
            raise SchemaError(f"{label} must be >= 1, got {n}")
    dense_names: list[str] = []
    dense_owner: list[int] = []
    region_counts = (face_points, hand_points, hand_points, foot_points, foot_points)
    for part_idx, (part, count) in enumerate(zip(PART_NAMES, region_counts)):
        for k in range(count):
            dense_names.append(f"{part}_{k:02d}")
            dense_owner.append(part_idx)
    group_of = _BODY_GROUPS + tuple(_PART_GROUPS[o] for o in dense_owner)
    schema = KeypointSchema(
        mode="wholebody",
        sparse_names=BODY_JOINTS,
        dense_names=tuple(dense_names),
        part_names=PART_NAMES,
        group_of=group_of,
        part_group=_PART_GROUPS,
        dense_owner=tuple(dense_owner),
    )
    schema.validate()
    return schema


# ---------------------------------------------------------------------------
# model configuration

INTRODUCTION_MODES = ("dense", "sparse-dense", "human-sparse-dense")


@dataclass
class ModelConfig:
    """Every knob of the model plus the desk-scale training schedule.

    Defaults describe the small trainable setup: 64x48 grayscale input, a
    two-block conv stem (downsample 4, 16 channels), 1x1 patches (192 visual
    tokens), and a 6+6 layer encoder.
    """

    mode: str = "wholebody"
    image_height: int = 64
    image_width: int = 48
    stem_channels: tuple[int, ...] = (8, 16)
    patch_h: int = 1
    patch_w: int = 1
    embed_dim: int = 64
    heads: int = 4
    coarse_layers: int = 6
    h2k_index: int = 3
    fine_layers: int = 6
    fine_prune_index: int = 3
    alpha1: float = 0.2
    alpha2: float = 0.35
    alpha3: float = 0.55
    simcc_split: int = 2
    target_sigma: float = 2.0
    grouping: bool = True
    masking: bool = True
    mhga: bool = True
    pruning: bool = True
    gp_loss: bool = True
    introduction_mode: str = "human-sparse-dense"
    seed: int = 0
    # dense counts used when mode == wholebody (desk-scale defaults)
    dense_face: int = 20
    dense_hand: int = 8
    dense_foot: int = 3
    # training schedule
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    train_steps: int = 300
    ckpt_every: int = 100
    gp_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    # ---- derived geometry -------------------------------------------------
    @property
    def downsample(self) -> int:
        return 2 ** len(self.stem_channels)

    @property
    def stem_out_channels(self) -> int:
        return self.stem_channels[-1] if self.stem_channels else 1

    @property
    def feature_h(self) -> int:
        return self.image_height // self.downsample

    @property
    def feature_w(self) -> int:
        return self.image_width // self.downsample

    @property
    def grid_rows(self) -> int:
        return self.feature_h // self.patch_h

    @property
    def grid_cols(self) -> int:
        return self.feature_w // self.patch_w

    @property
    def n_vis(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def x_bins(self) -> int:
        return self.simcc_split * self.image_width

    @property
    def y_bins(self) -> int:
        return self.simcc_split * self.image_height

    @property
    def alphas(self) -> tuple[float, float, float]:
        return (self.alpha1, self.alpha2, self.alpha3)

    def build_schema(self) -> KeypointSchema:
        if self.mode == "body":
            return build_schema("body")
        return build_schema("wholebody", face_points=self.dense_face,
                            hand_points=self.dense_hand, foot_points=self.dense_foot)

    def replace(self, **kw) -> "ModelConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return validate_config(vals)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def validate_config(raw: dict) -> ModelConfig:
    """Normalize and validate a raw key/value config.

    Unknown keys are rejected (anti-typo); defaults fill absent keys; every
    structural invariant is checked with a field-level diagnostic.
    """
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = dict(raw)
    for key in ("stem_channels", "gp_weights"):
        if key in kw:
            kw[key] = tuple(kw[key])
    cfg = ModelConfig(**kw)

    def fail(fieldname, msg):
        raise ConfigError(f"{fieldname}: {msg}")

    if cfg.mode not in ("body", "wholebody"):
        fail("mode", f"expected 'body' or 'wholebody', got {cfg.mode!r}")
    if cfg.introduction_mode not in INTRODUCTION_MODES:
        fail("introduction_mode", f"expected one of {INTRODUCTION_MODES}, got {cfg.introduction_mode!r}")
    if cfg.image_height < 1 or cfg.image_width < 1:
        fail("image_height/image_width", "must be positive")
    if any(c < 1 for c in cfg.stem_channels):
        fail("stem_channels", "channel counts must be positive")
    if cfg.image_height % cfg.downsample or cfg.image_width % cfg.downsample:
        fail("stem_channels", f"image {cfg.image_height}x{cfg.image_width} not divisible by stem downsample {cfg.downsample}")
    if cfg.feature_h % cfg.patch_h or cfg.feature_w % cfg.patch_w:
        fail("patch_h/patch_w", f"feature map {cfg.feature_h}x{cfg.feature_w} not divisible by patch {cfg.patch_h}x{cfg.patch_w}")
    if cfg.embed_dim % cfg.heads:
        fail("embed_dim", f"embed_dim {cfg.embed_dim} not divisible by heads {cfg.heads}")
    if not (0.0 <= cfg.alpha1 <= cfg.alpha2 <= cfg.alpha3 < 1.0):
        fail("alpha1/alpha2/alpha3", f"need 0 <= a1 <= a2 <= a3 < 1, got {cfg.alphas}")
    if cfg.coarse_layers < 0 or cfg.fine_layers < 0:
        fail("coarse_layers/fine_layers", "must be >= 0")
    if cfg.coarse_layers == 0:
        if cfg.h2k_index != 0:
            fail("h2k_index", "must be 0 when coarse_layers is 0")
        if cfg.introduction_mode == "human-sparse-dense":
            fail("introduction_mode", "human token cannot expand without coarse layers")
    elif not 1 <= cfg.h2k_index <= cfg.coarse_layers:
        fail("h2k_index", f"need 1 <= h2k_index <= coarse_layers, got {cfg.h2k_index} vs {cfg.coarse_layers}")
    if cfg.fine_layers == 0:
        if cfg.fine_prune_index != 0:
            fail("fine_prune_index", "must be 0 when fine_layers is 0")
    elif not 1 <= cfg.fine_prune_index <= cfg.fine_layers:
        fail("fine_prune_index", f"need 1 <= fine_prune_index <= fine_layers, got {cfg.fine_prune_index} vs {cfg.fine_layers}")
    if cfg.simcc_split < 1:
        fail("simcc_split", "must be >= 1")
    if cfg.target_sigma <= 0:
        fail("target_sigma", "must be > 0")
    if cfg.masking and not cfg.grouping:
        fail("masking", "per-group masks need grouping enabled")
    if cfg.mode == "wholebody":
        for key in ("dense_face", "dense_hand", "dense_foot"):
            if getattr(cfg, key) < 1:
                fail(key, "must be >= 1 in wholebody mode")
    if cfg.batch_size < 1 or cfg.train_steps < 0:
        fail("batch_size/train_steps", "must be positive")
    if len(cfg.gp_weights) != 3 or any(w < 0 for w in cfg.gp_weights):
        fail("gp_weights", "need three non-negative weights")
    return cfg


def load_config(path: str) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return validate_config(raw)


def group_counts(schema: KeypointSchema, grouping: bool) -> list[dict]:
    """Per-group token membership (single catch-all group when not grouping)."""
    if not grouping:
        return [{
            "group": 0,
            "sparse": list(range(schema.n_sparse)),
            "dense": list(range(schema.n_dense)),
            "parts": list(range(schema.n_parts)),
        }]
    return [{
        "group": g,
        "sparse": schema.sparse_group(g),
        "dense": schema.dense_group(g),
        "parts": schema.part_group_members(g),
    } for g in (GROUP_HEAD, GROUP_UPPER, GROUP_LOWER)]
