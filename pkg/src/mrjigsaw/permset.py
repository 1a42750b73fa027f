"""Hamming-separated arrangement pool and the sampled pretext class set."""

from __future__ import annotations

import functools
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ENUMERATION_ORDER = "lexicographic"
MAX_UNGUARDED_PATCHES = 9


class PermutationSetError(ValueError):
    """Raised when a permutation pool or set violates one of its invariants."""


def hamming_distance(a, b) -> int:
    """Number of positions at which two arrangements differ."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


def _is_bijection(row, n: int) -> bool:
    return len(row) == n and sorted(int(v) for v in row) == list(range(n))


@dataclass(frozen=True)
class PermutationPool:
    perms: np.ndarray  # (K, N) int8, row 0 is the identity
    n_patches: int
    min_distance_exclusive: int
    enumeration_order: str = ENUMERATION_ORDER

    def __len__(self) -> int:
        return len(self.perms)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.n_patches}:{self.min_distance_exclusive}:{self.enumeration_order}:".encode())
        h.update(np.ascontiguousarray(self.perms, dtype=np.int8).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class PermutationSet:
    perms: np.ndarray  # (C, N) int8, row 0 is the identity
    source_pool_hash: str
    rng_seed: int
    n_patches: int = 9
    threshold: int = 4
    enumeration_order: str = ENUMERATION_ORDER
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def class_count(self) -> int:
        return len(self.perms)

    def __len__(self) -> int:
        return len(self.perms)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PermutationSet):
            return NotImplemented
        return (
            np.array_equal(self.perms, other.perms)
            and self.source_pool_hash == other.source_pool_hash
            and self.rng_seed == other.rng_seed
            and self.n_patches == other.n_patches
            and self.threshold == other.threshold
            and self.enumeration_order == other.enumeration_order
        )

    def validate(self) -> None:
        validate_perms(self.perms, self.n_patches)


def validate_perms(perms, n: int) -> None:
    """Check the PermutationSet/Pool invariants, naming the first one violated."""
    perms = np.asarray(perms)
    if perms.ndim != 2 or perms.shape[0] == 0:
        raise PermutationSetError("invariant violated: perms must be a non-empty 2-D table")
    if perms.shape[1] != n:
        raise PermutationSetError(
            f"invariant violated: row length {perms.shape[1]} != n_patches {n}"
        )
    for i, row in enumerate(perms):
        if not _is_bijection(row, n):
            raise PermutationSetError(f"invariant violated: row {i} is not a bijection on 0..{n - 1}")
    if not np.array_equal(perms[0], np.arange(n)):
        raise PermutationSetError("invariant violated: row 0 must be the identity")
    if len({tuple(r) for r in perms.tolist()}) != len(perms):
        raise PermutationSetError("invariant violated: duplicate arrangements")


def generate_candidate_pool(
    n_patches: int = 9, threshold: int = 4, allow_large: bool = False
) -> PermutationPool:
    """Greedy scan of all arrangements in lexicographic order.

    A candidate joins the pool when it differs from every member already
    admitted in more than ``threshold`` positions. The identity seeds the pool.
    """
    if n_patches < 2:
        raise ValueError("n_patches must be >= 2")
    if not 0 <= threshold < n_patches:
        raise ValueError("threshold must satisfy 0 <= threshold < n_patches")
    if n_patches > MAX_UNGUARDED_PATCHES and not allow_large:
        raise ValueError(
            f"{n_patches}! arrangements is too many to scan; pass allow_large=True to force it"
        )

    # itertools.permutations yields lexicographic order for sorted input,
    # so the identity comes first.
    candidates = itertools.permutations(range(n_patches))
    admitted = np.empty((math.factorial(n_patches), n_patches), dtype=np.int8)
    admitted[0] = next(candidates)
    k = 1
    for cand in candidates:
        row = np.asarray(cand, dtype=np.int8)
        if ((admitted[:k] != row).sum(axis=1) > threshold).all():
            admitted[k] = row
            k += 1
    return PermutationPool(
        perms=admitted[:k].copy(), n_patches=n_patches, min_distance_exclusive=threshold
    )


def sample_class_set(pool: PermutationPool, class_count: int, seed: int) -> PermutationSet:
    """Keep the identity as class 0 and draw the rest without replacement."""
    if not 1 <= class_count <= len(pool):
        raise ValueError(f"class_count must be in [1, {len(pool)}], got {class_count}")
    rng = np.random.default_rng(seed)
    rest = rng.choice(np.arange(1, len(pool)), size=class_count - 1, replace=False)
    idx = np.concatenate([[0], rest]).astype(int)
    return PermutationSet(
        perms=pool.perms[idx].copy(),
        source_pool_hash=pool.digest(),
        rng_seed=int(seed),
        n_patches=pool.n_patches,
        threshold=pool.min_distance_exclusive,
        enumeration_order=pool.enumeration_order,
        extra={"pool_size": len(pool)},
    )


def save_permutation_set(pset: PermutationSet, path) -> Path:
    path = Path(path)
    doc = {
        "n_patches": pset.n_patches,
        "threshold": pset.threshold,
        "enumeration_order": pset.enumeration_order,
        "seed": pset.rng_seed,
        "pool_digest": pset.source_pool_hash,
        "perms": pset.perms.astype(int).tolist(),
    }
    if pset.extra:
        doc["extra"] = pset.extra
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)
    return path


def load_permutation_set(path) -> PermutationSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PermutationSetError(f"cannot read permutation set {path}: {exc}") from exc
    required = ("n_patches", "threshold", "enumeration_order", "seed", "pool_digest", "perms")
    missing = [k for k in required if k not in doc]
    if missing:
        raise PermutationSetError(f"permutation set {path} is missing fields {missing}")
    n = int(doc["n_patches"])
    try:
        perms = np.asarray(doc["perms"], dtype=np.int64)
    except (TypeError, ValueError) as exc:
        raise PermutationSetError("invariant violated: perms is not a rectangular int table") from exc
    validate_perms(perms, n)
    return PermutationSet(
        perms=perms.astype(np.int8),
        source_pool_hash=str(doc["pool_digest"]),
        rng_seed=int(doc["seed"]),
        n_patches=n,
        threshold=int(doc["threshold"]),
        enumeration_order=str(doc["enumeration_order"]),
        extra=dict(doc.get("extra", {})),
    )


def render_one_based(perm) -> str:
    return "[" + ",".join(str(int(v) + 1) for v in perm) + "]"


@functools.lru_cache(maxsize=4)
def cached_pool(n_patches: int = 9, threshold: int = 4) -> PermutationPool:
    """Process-wide memo of :func:`generate_candidate_pool` (the N=9 scan takes ~15 s)."""
    return generate_candidate_pool(n_patches, threshold)
