"""Clip store: MRNet ingestion, synthetic knee-like clips, frame streams.

Store layout::

    store/manifest.json
    store/labels.csv                     clip_id,label
    store/<split>/<clip_id>/frame_0000.png   8-bit grayscale
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from .patchgen import DEFAULT_GEOMETRY, Geometry, tile_bounds

log = logging.getLogger(__name__)

SPLITS = ("train", "valid")
MRNET_REFERENCE_COUNTS = {"train": {"total": 1130, "positive": 208}, "valid": {"total": 120}}


class IngestError(RuntimeError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__(f"{len(problems)} ingestion problem(s):\n  " + "\n  ".join(problems))


@dataclass
class ClipRecord:
    clip_id: str
    label: int
    split: str
    path: Path | None = None
    _frames: np.ndarray | None = field(default=None, repr=False)

    @property
    def frames(self) -> np.ndarray:
        """(F, L, L) float32 in [0, 1]; loaded from disk on first access."""
        if self._frames is None:
            if self.path is None:
                raise ValueError(f"clip {self.clip_id} has neither frames nor a path")
            self._frames = read_clip_frames(self.path)
        return self._frames

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def release(self) -> None:
        if self.path is not None:
            self._frames = None


@dataclass
class DatasetManifest:
    name: str
    frame_size: int
    counts: dict
    normalization: str
    clips: list[dict]
    source_digests: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return self.__dict__.copy()

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        return cls(**doc)

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for c in sorted(self.clips, key=lambda c: c["clip_id"]):
            h.update(f"{c['clip_id']}:{c['label']}:{c['split']}:{c['digest']}".encode())
        return h.hexdigest()


def _to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frames, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_clip_frames(clip_dir: Path) -> np.ndarray:
    files = sorted(Path(clip_dir).glob("frame_*.png"))
    if not files:
        raise FileNotFoundError(f"no frames in {clip_dir}")
    return np.stack([np.asarray(Image.open(f), dtype=np.float32) / 255.0 for f in files])


def _write_clip(store: Path, split: str, clip_id: str, frames_u8: np.ndarray) -> str:
    clip_dir = store / split / clip_id
    clip_dir.mkdir(parents=True, exist_ok=True)
    for old in clip_dir.glob("frame_*.png"):
        old.unlink()
    for i, fr in enumerate(frames_u8):
        Image.fromarray(fr, mode="L").save(clip_dir / f"frame_{i:04d}.png")
    return hashlib.sha256(frames_u8.tobytes()).hexdigest()


def _count(clips: list[dict]) -> dict:
    counts = {}
    for split in SPLITS:
        sel = [c for c in clips if c["split"] == split]
        counts[split] = {
            "total": len(sel),
            "positive": sum(c["label"] == 1 for c in sel),
            "negative": sum(c["label"] == 0 for c in sel),
        }
    return counts


def write_manifest(store: Path, manifest: DatasetManifest) -> None:
    store.mkdir(parents=True, exist_ok=True)
    tmp = store / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest.to_json(), indent=2))
    tmp.replace(store / "manifest.json")
    with open(store / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "label"])
        for c in manifest.clips:
            w.writerow([c["clip_id"], c["label"]])


def load_manifest(store) -> DatasetManifest:
    return DatasetManifest.from_json(json.loads((Path(store) / "manifest.json").read_text()))


def load_store(store, split: str | None = None) -> list[ClipRecord]:
    """Lazy records for one split (or all), checked against the manifest."""
    store = Path(store)
    manifest = load_manifest(store)
    on_disk = {s: sorted(p.name for p in (store / s).iterdir() if p.is_dir()) if (store / s).exists() else [] for s in SPLITS}
    for s in SPLITS:
        if len(on_disk[s]) != manifest.counts[s]["total"]:
            raise ValueError(
                f"store {store}: manifest lists {manifest.counts[s]['total']} {s} clips, found {len(on_disk[s])}"
            )
    return [
        ClipRecord(c["clip_id"], int(c["label"]), c["split"], store / c["split"] / c["clip_id"])
        for c in manifest.clips
        if split is None or c["split"] == split
    ]


# ---------------------------------------------------------------------------
# MRNet adapter


def fit_square(frames: np.ndarray, size: int) -> np.ndarray:
    """Center-crop or zero-pad the last two axes to ``size``."""
    out = np.zeros(frames.shape[:-2] + (size, size), dtype=frames.dtype)
    h, w = frames.shape[-2:]
    sh, sw = max(0, (h - size) // 2), max(0, (w - size) // 2)
    dh, dw = max(0, (size - h) // 2), max(0, (size - w) // 2)
    ch, cw = min(h, size), min(w, size)
    out[..., dh : dh + ch, dw : dw + cw] = frames[..., sh : sh + ch, sw : sw + cw]
    return out


def minmax_normalize(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    lo, hi = frames.min(), frames.max()
    if hi <= lo:
        return np.zeros_like(frames, dtype=np.float32)
    return ((frames - lo) / (hi - lo)).astype(np.float32)


def _read_labels(path: Path, problems: list[str]) -> dict[str, int]:
    labels = {}
    if not path.exists():
        problems.append(f"missing label table {path}")
        return labels
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip().isdigit():
                continue
            try:
                labels[f"{int(row[0]):04d}"] = int(row[1])
            except (IndexError, ValueError):
                problems.append(f"{path}: bad row {row}")
    return labels


def ingest_mrnet(source_dir, out, plane: str = "sagittal", frame_size: int = 256) -> DatasetManifest:
    """Convert an MRNet-layout directory into a clip store.

    Expects ``<src>/{train,valid}/<plane>/NNNN.npy`` stacks and
    ``<src>/{train,valid}-acl.csv`` label tables (``id,label`` rows).
    Raises :class:`IngestError` listing every problem found.
    """
    src, store = Path(source_dir), Path(out)
    problems: list[str] = []
    clips: list[dict] = []
    resized = 0
    for split in SPLITS:
        labels = _read_labels(src / f"{split}-acl.csv", problems)
        stack_dir = src / split / plane
        stacks = {p.stem: p for p in sorted(stack_dir.glob("*.npy"))} if stack_dir.exists() else {}
        if not stacks:
            problems.append(f"no {plane} stacks under {stack_dir}")
        for cid in sorted(set(stacks) - set(labels)):
            problems.append(f"{split}/{cid}: stack has no label")
        for cid in sorted(set(labels) - set(stacks)):
            problems.append(f"{split}/{cid}: label has no stack")
        for cid in sorted(set(stacks) & set(labels)):
            try:
                arr = np.load(stacks[cid])
            except (OSError, ValueError) as exc:
                problems.append(f"{split}/{cid}: corrupt stack ({exc})")
                continue
            if arr.ndim != 3 or arr.shape[0] < 1:
                problems.append(f"{split}/{cid}: expected (slices, H, W), got {arr.shape}")
                continue
            if labels[cid] not in (0, 1):
                problems.append(f"{split}/{cid}: label {labels[cid]} is not binary")
                continue
            if arr.shape[1:] != (frame_size, frame_size):
                resized += 1
                arr = fit_square(arr, frame_size)
            frames = _to_uint8(minmax_normalize(arr))
            digest = _write_clip(store, split, cid, frames)
            clips.append({"clip_id": cid, "split": split, "label": labels[cid], "n_frames": len(frames), "digest": digest})
    if problems:
        raise IngestError(problems)
    counts = _count(clips)
    ref = MRNET_REFERENCE_COUNTS
    manifest = DatasetManifest(
        name=f"mrnet-{plane}",
        frame_size=frame_size,
        counts=counts,
        normalization="per-clip min-max to [0,1], stored as 8-bit",
        clips=clips,
        source_digests={"source_dir": str(src.resolve())},
        notes={
            "plane": plane,
            "frames_center_cropped_or_padded": resized,
            "reference_counts": ref,
            "matches_reference_counts": counts["train"]["total"] == ref["train"]["total"]
            and counts["train"]["positive"] == ref["train"]["positive"]
            and counts["valid"]["total"] == ref["valid"]["total"],
        },
    )
    write_manifest(store, manifest)
    return manifest


# ---------------------------------------------------------------------------
# synthetic clips


class SyntheticSpec(BaseModel):
    """Knee-like synthetic clips. Positives carry a dark band in one tile."""

    model_config = ConfigDict(extra="forbid")

    n_per_class: int = Field(50, ge=1)
    n_positive: int | None = Field(None, ge=1, description="positive count when it should differ from n_per_class")
    valid_fraction: float = Field(0.25, ge=0.0, lt=1.0)
    frames_min: int = Field(12, ge=1)
    frames_max: int = Field(20, ge=1)
    frame_size: int = 256
    artifact_tile: int = Field(4, ge=0)
    artifact_thickness: float = Field(0.25, gt=0, description="band thickness as a fraction of the tile side")
    artifact_length: float = Field(0.8, gt=0, le=1.0, description="band length as a fraction of the tile side")
    artifact_contrast: float = Field(0.85, gt=0, le=1.0)
    artifact_span: float = Field(0.8, gt=0, le=1.0, description="fraction of frames that carry the band")
    noise: float = Field(0.03, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _geometry(self):
        if self.frames_max < self.frames_min:
            raise ValueError("frames_max < frames_min")
        if self.artifact_tile >= DEFAULT_GEOMETRY.n_patches:
            raise ValueError(f"artifact_tile {self.artifact_tile} lies outside the 3x3 tile grid")
        if self.frame_size < 3 * 8:
            raise ValueError("frame_size too small")
        return self

    @property
    def geometry(self) -> Geometry:
        return Geometry(frame_size=self.frame_size, patch_size=self.frame_size // 4)


def artifact_box(spec: SyntheticSpec) -> tuple[int, int, int, int]:
    """(row0, row1, col0, col1) of the planted band inside its tile."""
    r0, r1, c0, c1 = tile_bounds(spec.artifact_tile, spec.geometry)
    side = r1 - r0
    th = max(1, int(round(spec.artifact_thickness * side)))
    ln = max(1, int(round(spec.artifact_length * side)))
    rc, cc = (r0 + r1) // 2, (c0 + c1) // 2
    return rc - th // 2, rc - th // 2 + th, cc - ln // 2, cc - ln // 2 + ln


def artifact_frames(spec: SyntheticSpec, n_frames: int) -> range:
    k = max(1, int(round(spec.artifact_span * n_frames)))
    start = (n_frames - k) // 2
    return range(start, start + k)


def _anatomy(size: int, shift: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """Shared knee-like layout: bright femur and tibia ellipses over soft tissue, black outside the field of view."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    yy = yy - 0.5 + shift[0]
    xx = xx - 0.5 + shift[1]
    img = 0.35 * np.exp(-(xx**2 + yy**2) / 0.18)
    img += 0.55 * (((xx + 0.05) / 0.28) ** 2 + ((yy + 0.30) / 0.20) ** 2 < 1)  # femur
    img += 0.45 * (((xx - 0.04) / 0.24) ** 2 + ((yy - 0.28) / 0.16) ** 2 < 1)  # tibia
    img += 0.25 * (((xx - 0.30) / 0.07) ** 2 + ((yy + 0.02) / 0.10) ** 2 < 1)  # patella
    img += 0.15 * (0.5 - yy)  # coil falloff
    blobs = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
    blobs /= np.abs(blobs).max() + 1e-12
    img = ndimage.gaussian_filter(img, sigma=size / 128) + 0.12 * blobs
    # field of view fades to black air, like real scans, so zero-filled warps add no new edges
    r = np.sqrt((xx - shift[1]) ** 2 + (yy - shift[0]) ** 2)
    return img / (1.0 + np.exp((r - 0.40) / 0.02))


def synthesize_clip(spec: SyntheticSpec, clip_seed: int, positive: bool) -> np.ndarray:
    """(F, L, L) float32 frames. The negative and positive twins of a seed differ only in the band."""
    rng = np.random.default_rng(clip_seed)
    n = int(rng.integers(spec.frames_min, spec.frames_max + 1))
    size = spec.frame_size
    base_shift = rng.uniform(-0.02, 0.02, size=2)
    drift = rng.uniform(-0.01, 0.01, size=2)
    anatomy_rng = np.random.default_rng(rng.integers(2**32))
    anatomy = _anatomy(size, tuple(base_shift), anatomy_rng)
    frames = np.empty((n, size, size), dtype=np.float64)
    for i in range(n):
        t = i / max(1, n - 1) - 0.5
        shifted = ndimage.shift(anatomy, (drift[0] * t * size, drift[1] * t * size), order=1, mode="nearest")
        frames[i] = shifted + spec.noise * rng.standard_normal((size, size))
    frames = np.clip(frames, 0.0, 1.0)
    if positive:
        r0, r1, c0, c1 = artifact_box(spec)
        for i in artifact_frames(spec, n):
            frames[i, r0:r1, c0:c1] *= 1.0 - spec.artifact_contrast
    return frames.astype(np.float32)


def _clip_seed(seed: int, index: int) -> int:
    return int.from_bytes(hashlib.sha256(f"synthetic:{seed}:{index}".encode()).digest()[:8], "little")


def generate_synthetic(spec: SyntheticSpec, out=None) -> tuple[DatasetManifest, list[ClipRecord]]:
    """Build a balanced synthetic dataset; written to ``out`` when given."""
    store = Path(out) if out is not None else None
    records: list[ClipRecord] = []
    clips: list[dict] = []
    for label in (0, 1):
        n = spec.n_per_class if label == 0 or spec.n_positive is None else spec.n_positive
        n_valid = int(round(spec.valid_fraction * n))
        for j in range(n):
            idx = label * spec.n_per_class + j
            split = "valid" if j < n_valid else "train"
            cid = f"syn{idx:05d}"
            frames = synthesize_clip(spec, _clip_seed(spec.seed, idx), positive=bool(label))
            u8 = _to_uint8(frames)
            if store is not None:
                digest = _write_clip(store, split, cid, u8)
                rec = ClipRecord(cid, label, split, store / split / cid)
            else:
                digest = hashlib.sha256(u8.tobytes()).hexdigest()
                rec = ClipRecord(cid, label, split, None, u8.astype(np.float32) / 255.0)
            records.append(rec)
            clips.append({"clip_id": cid, "split": split, "label": label, "n_frames": len(u8), "digest": digest})
    manifest = DatasetManifest(
        name="synthetic",
        frame_size=spec.frame_size,
        counts=_count(clips),
        normalization="synthetic intensities in [0,1], stored as 8-bit",
        clips=clips,
        source_digests={},
        notes={"spec": spec.model_dump(), "artifact_box": artifact_box(spec)},
    )
    if store is not None:
        write_manifest(store, manifest)
    return manifest, records


def threshold_detector_scores(records: list[ClipRecord], spec: SyntheticSpec) -> np.ndarray:
    """Hand-coded detector: darkest band-to-tile contrast over the clip's frames."""
    r0, r1, c0, c1 = artifact_box(spec)
    t0, t1, u0, u1 = tile_bounds(spec.artifact_tile, spec.geometry)
    scores = []
    for rec in records:
        fr = rec.frames
        band = fr[:, r0:r1, c0:c1].mean(axis=(1, 2))
        ring = fr[:, t0:t1, u0:u1].mean(axis=(1, 2))
        scores.append(float(np.max(ring - band)))
    return np.asarray(scores)


# ---------------------------------------------------------------------------
# frame streams


def pretext_frame_stream(records: list[ClipRecord], rng: np.random.Generator) -> Iterator[tuple[ClipRecord, int, np.ndarray]]:
    """One epoch: every clip once, in shuffled order, with one uniformly drawn frame."""
    if not records:
        raise ValueError("no records")
    for i in rng.permutation(len(records)):
        rec = records[int(i)]
        k = int(rng.integers(rec.n_frames))
        yield rec, k, rec.frames[k]
