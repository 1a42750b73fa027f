"""Jumbled-patch generation: tiling, geometric augmentation, cropping, shuffling."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .permset import PermutationSet

ROTATIONS = (-15.0, 0.0, 15.0)
SCALES = (1.0, 1.2)


@dataclass(frozen=True)
class Geometry:
    """Frame / tile / patch sizes. Defaults are 256 / 85 / 64."""

    frame_size: int = 256
    n_patches: int = 9
    patch_size: int = 64

    def __post_init__(self):
        side = math.isqrt(self.n_patches)
        if side * side != self.n_patches:
            raise ValueError(f"n_patches must be a perfect square, got {self.n_patches}")
        if self.tile_size < self.patch_size:
            raise ValueError(
                f"tile side {self.tile_size} is smaller than patch side {self.patch_size}"
            )

    @property
    def grid(self) -> int:
        return math.isqrt(self.n_patches)

    @property
    def tile_size(self) -> int:
        return self.frame_size // self.grid

    @property
    def crop_range(self) -> int:
        return self.tile_size - self.patch_size

    @property
    def center_ref(self) -> int:
        return self.crop_range // 2

    @property
    def translation_px(self) -> int:
        return int(math.floor(0.1 * self.patch_size))


DEFAULT_GEOMETRY = Geometry()


@dataclass(frozen=True)
class AugmentationParams:
    rotation_deg: float = 0.0
    tx_px: float = 0.0
    ty_px: float = 0.0
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.tx_px == 0 and self.ty_px == 0 and self.scale == 1.0


IDENTITY_AUG = AugmentationParams()


def augmentation_group(geometry: Geometry = DEFAULT_GEOMETRY) -> list[AugmentationParams]:
    """Cartesian product rotation x tx x ty x scale (54 members)."""
    t = geometry.translation_px
    shifts = (-t, 0, t)
    return [
        AugmentationParams(float(r), float(x), float(y), float(s))
        for r, x, y, s in itertools.product(ROTATIONS, shifts, shifts, SCALES)
    ]


@dataclass
class JumbledSample:
    patches: np.ndarray  # (9, P, P) float32
    label: int
    provenance: dict = field(default_factory=dict)


def _check_frame(frame: np.ndarray, geometry: Geometry) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 2 or frame.shape[0] != frame.shape[1]:
        raise ValueError(f"frame must be a square 2-D grid, got shape {frame.shape}")
    if frame.shape[0] != geometry.frame_size:
        raise ValueError(
            f"frame side {frame.shape[0]} does not match geometry frame_size {geometry.frame_size}"
        )
    return frame


def tile_bounds(index: int, geometry: Geometry = DEFAULT_GEOMETRY) -> tuple[int, int, int, int]:
    """(row_start, row_stop, col_start, col_stop) of tile ``index`` in row-major order."""
    row, col = divmod(index, geometry.grid)
    s = geometry.tile_size
    return row * s, (row + 1) * s, col * s, (col + 1) * s


def partition_frame(frame: np.ndarray, geometry: Geometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Cut the frame into its ``grid x grid`` tiles; leftover edge pixels are dropped."""
    frame = _check_frame(frame, geometry)
    tiles = []
    for i in range(geometry.n_patches):
        r0, r1, c0, c1 = tile_bounds(i, geometry)
        tiles.append(frame[r0:r1, c0:c1])
    return np.stack(tiles)


def affine_warp(image: np.ndarray, rotation_deg=0.0, tx=0.0, ty=0.0, scale=1.0) -> np.ndarray:
    """Rotate about the center, translate, then scale about the center.

    Bilinear interpolation, zero fill outside the support, result clamped to
    [0, 1]. ``tx`` moves content along columns, ``ty`` along rows.
    """
    image = np.asarray(image, dtype=np.float32)
    if rotation_deg == 0 and tx == 0 and ty == 0 and scale == 1.0:
        return image.copy()
    h, w = image.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    theta = math.radians(rotation_deg)
    # forward rotation in (row, col) coordinates
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    inv_rot = rot.T
    shift = np.array([ty, tx], dtype=float)
    # out q = s * (R (p - c) + t) + c  =>  p = R^-1 ((q - c) / s - t) + c
    matrix = inv_rot / scale
    offset = center - matrix @ center - inv_rot @ shift
    out = ndimage.affine_transform(
        image, matrix, offset=offset, order=1, mode="constant", cval=0.0, prefilter=False
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_augmentation(
    partition: np.ndarray, params: AugmentationParams, geometry: Geometry = DEFAULT_GEOMETRY
) -> np.ndarray:
    if params not in set(augmentation_group(geometry)):
        raise ValueError(f"{params} is not a member of the augmentation group")
    partition = np.asarray(partition)
    if partition.shape != (geometry.tile_size, geometry.tile_size):
        raise ValueError(
            f"partition must be {geometry.tile_size}x{geometry.tile_size}, got {partition.shape}"
        )
    if params.is_identity:
        return partition.copy()
    return affine_warp(partition, params.rotation_deg, params.tx_px, params.ty_px, params.scale)


def crop(partition: np.ndarray, ref_x: int, ref_y: int, patch_size: int = 64) -> np.ndarray:
    return partition[ref_x : ref_x + patch_size, ref_y : ref_y + patch_size]


def random_crop(
    partition: np.ndarray, rng: np.random.Generator, geometry: Geometry = DEFAULT_GEOMETRY
) -> tuple[np.ndarray, tuple[int, int]]:
    """Crop a patch at a reference point drawn uniformly from [0, crop_range]^2."""
    ref_x, ref_y = (int(v) for v in rng.integers(0, geometry.crop_range + 1, size=2))
    return crop(partition, ref_x, ref_y, geometry.patch_size), (ref_x, ref_y)


def arrange(patches: np.ndarray, perm) -> np.ndarray:
    """Slot ``k`` of the result holds tile ``perm[k]``."""
    return np.asarray(patches)[np.asarray(perm, dtype=int)]


def unarrange(patches: np.ndarray, perm) -> np.ndarray:
    return np.asarray(patches)[np.argsort(np.asarray(perm, dtype=int))]


def make_jumbled_sample(
    frame: np.ndarray,
    pset: PermutationSet,
    rng: np.random.Generator,
    geometry: Geometry = DEFAULT_GEOMETRY,
    provenance: dict | None = None,
) -> JumbledSample:
    group = augmentation_group(geometry)
    tiles = partition_frame(frame, geometry)
    patches = []
    augs = []
    refs = []
    for tile in tiles:
        g = group[int(rng.integers(len(group)))]
        warped = apply_augmentation(tile, g, geometry)
        patch, ref = random_crop(warped, rng, geometry)
        patches.append(patch)
        augs.append(g)
        refs.append(ref)
    label = int(rng.integers(len(pset)))
    jumbled = arrange(np.stack(patches), pset.perms[label]).astype(np.float32)
    prov = dict(provenance or {})
    prov.update({"refs": refs, "augmentations": [a.__dict__ for a in augs]})
    return JumbledSample(patches=jumbled, label=label, provenance=prov)


def make_eval_sample(
    frame: np.ndarray,
    pset: PermutationSet,
    arrangement_index: int,
    geometry: Geometry = DEFAULT_GEOMETRY,
    provenance: dict | None = None,
) -> JumbledSample:
    """Deterministic sample: no augmentation, center crop, given arrangement."""
    if not 0 <= arrangement_index < len(pset):
        raise ValueError(f"arrangement_index {arrangement_index} outside [0, {len(pset)})")
    tiles = partition_frame(frame, geometry)
    ref = geometry.center_ref
    patches = np.stack([crop(t, ref, ref, geometry.patch_size) for t in tiles])
    jumbled = arrange(patches, pset.perms[arrangement_index]).astype(np.float32)
    prov = dict(provenance or {})
    prov.update({"refs": [(ref, ref)] * geometry.n_patches})
    return JumbledSample(patches=jumbled, label=int(arrangement_index), provenance=prov)


def assemble_mosaic(patches: np.ndarray, gap: int = 4, fill: float = 1.0) -> np.ndarray:
    """Lay the patches out row-major on a grid separated by ``gap`` pixels."""
    n, p, _ = patches.shape
    g = math.isqrt(n)
    side = g * p + (g - 1) * gap
    out = np.full((side, side), fill, dtype=np.float32)
    for k in range(n):
        r, c = divmod(k, g)
        out[r * (p + gap) : r * (p + gap) + p, c * (p + gap) : c * (p + gap) + p] = patches[k]
    return out


# Binary sample cache: 9 x P x P float32 little-endian followed by a uint16 label.

def write_sample_record(directory, name: str, sample: JumbledSample) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{name}.bin"
    payload = sample.patches.astype("<f4").tobytes() + np.uint16(sample.label).astype("<u2").tobytes()
    path.write_bytes(payload)
    meta = dict(sample.provenance)
    meta["shape"] = list(sample.patches.shape)
    (directory / f"{name}.json").write_text(json.dumps(meta, default=_jsonable))
    return path


def read_sample_record(path) -> JumbledSample:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    shape = tuple(meta.pop("shape"))
    raw = path.read_bytes()
    n = int(np.prod(shape)) * 4
    if len(raw) != n + 2:
        raise ValueError(f"{path}: expected {n + 2} bytes, found {len(raw)}")
    patches = np.frombuffer(raw[:n], dtype="<f4").reshape(shape).astype(np.float32)
    label = int(np.frombuffer(raw[n:], dtype="<u2")[0])
    return JumbledSample(patches=patches, label=label, provenance=meta)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")
