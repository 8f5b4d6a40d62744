"""Interaction ingestion, chronological splitting, visual-feature storage
and a seeded synthetic dataset generator for desk-scale experiments.

File formats
------------
Interactions are CSV with the exact header ``user_id,item_id,timestamp``.
Visual features are a binary container: magic ``HVFEAT01`` (8 bytes), then
row count and dimension as little-endian u32, then count*dim little-endian
float32 values in dense-item-id order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, InvalidInputError, ParseError

FEATURE_MAGIC = b"HVFEAT01"

EXPECTED_HEADER = ["user_id", "item_id", "timestamp"]


@dataclass
class Interactions:
    """A bag of (user, item, timestamp) rows in dense-id space."""

    users: np.ndarray  # int64
    items: np.ndarray  # int64
    stamps: np.ndarray  # int64 seconds

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def take(self, idx: np.ndarray) -> "Interactions":
        return Interactions(self.users[idx], self.items[idx], self.stamps[idx])


@dataclass
class InteractionDataset:
    """All interactions plus the external-id maps and per-user positive sets."""

    interactions: Interactions
    user_ids: list[str]  # dense id -> external id
    item_ids: list[str]
    user_index: dict[str, int]  # external id -> dense id
    item_index: dict[str, int]
    positives: list[np.ndarray] = field(default_factory=list)  # per user, whole dataset

    def __post_init__(self):
        if not self.positives:
            self.positives = build_history(self.interactions, len(self.user_ids))

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)


@dataclass
class SplitDataset:
    """Chronological train/valid/test partition of a dataset."""

    dataset: InteractionDataset
    train: Interactions
    valid: Interactions
    test: Interactions


@dataclass
class VisualFeatureStore:
    """Frozen per-item feature rows, dense-item-id order."""

    dim: int
    rows: np.ndarray  # (n_items, dim) float32, possibly memory-mapped
    missing: frozenset[int] = frozenset()  # dense ids that were zero-filled

    @property
    def count(self) -> int:
        return int(self.rows.shape[0])


def build_history(interactions: Interactions, n_users: int) -> list[np.ndarray]:
    """Per-user sorted unique positive item ids, computed from these rows only."""
    buckets: list[list[int]] = [[] for _ in range(n_users)]
    for u, i in zip(interactions.users.tolist(), interactions.items.tolist()):
        buckets[u].append(i)
    return [np.unique(np.asarray(b, dtype=np.int64)) for b in buckets]


# --- CSV ingestion ----------------------------------------------------------


def load_interactions(path) -> InteractionDataset:
    """Parse an interactions CSV; malformed rows raise with their line number."""
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if [h.strip() for h in header] != EXPECTED_HEADER:
            raise ParseError(
                f"{path}: line 1: expected header {','.join(EXPECTED_HEADER)!r}, "
                f"got {','.join(header)!r}"
            )
        users: list[int] = []
        items: list[int] = []
        stamps: list[int] = []
        user_ids: list[str] = []
        item_ids: list[str] = []
        user_index: dict[str, int] = {}
        item_index: dict[str, int] = {}
        seen: set[tuple[int, int, int]] = set()
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"{path}: line {line_no}: expected 3 fields, got {len(row)}")
            raw_user, raw_item, raw_stamp = (f.strip() for f in row)
            if not raw_user:
                raise ParseError(f"{path}: line {line_no}: missing user_id")
            if not raw_item:
                raise ParseError(f"{path}: line {line_no}: missing item_id")
            try:
                stamp = int(raw_stamp)
            except ValueError:
                raise ParseError(
                    f"{path}: line {line_no}: timestamp {raw_stamp!r} is not an integer"
                ) from None
            u = user_index.setdefault(raw_user, len(user_ids))
            if u == len(user_ids):
                user_ids.append(raw_user)
            i = item_index.setdefault(raw_item, len(item_ids))
            if i == len(item_ids):
                item_ids.append(raw_item)
            key = (u, i, stamp)
            if key in seen:
                continue
            seen.add(key)
            users.append(u)
            items.append(i)
            stamps.append(stamp)
    inter = Interactions(
        np.asarray(users, dtype=np.int64),
        np.asarray(items, dtype=np.int64),
        np.asarray(stamps, dtype=np.int64),
    )
    return InteractionDataset(inter, user_ids, item_ids, user_index, item_index)


def write_interactions_csv(dataset: InteractionDataset, path) -> None:
    inter = dataset.interactions
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EXPECTED_HEADER)
        for u, i, t in zip(inter.users, inter.items, inter.stamps):
            writer.writerow([dataset.user_ids[u], dataset.item_ids[i], int(t)])


# --- chronological split ----------------------------------------------------


def chrono_split(
    dataset: InteractionDataset, ratios: Sequence[float] = (0.7, 0.1, 0.2)
) -> SplitDataset:
    """Sort globally by (timestamp, user, item) and cut by floor(ratio * n)."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise InvalidInputError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidInputError(f"ratios must sum to 1, got {sum(ratios)}")
    inter = dataset.interactions
    order = np.lexsort((inter.items, inter.users, inter.stamps))
    n = len(inter)
    n_train = int(np.floor(ratios[0] * n))
    n_valid = int(np.floor(ratios[1] * n))
    return SplitDataset(
        dataset=dataset,
        train=inter.take(order[:n_train]),
        valid=inter.take(order[n_train : n_train + n_valid]),
        test=inter.take(order[n_train + n_valid :]),
    )


# --- visual feature store ---------------------------------------------------


def write_features(path, rows: np.ndarray, dim: int | None = None) -> None:
    """Serialize feature rows to the binary container, bit-exact float32."""
    rows = np.ascontiguousarray(np.asarray(rows, dtype="<f4"))
    if rows.ndim != 2:
        raise InvalidInputError(f"feature rows must be 2-D, got shape {rows.shape}")
    if dim is not None and rows.shape[1] != dim:
        raise InvalidInputError(f"feature dim {rows.shape[1]} does not match declared {dim}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes())


def load_features(path) -> VisualFeatureStore:
    """Memory-map a feature container after validating its exact byte length."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16 or head[:8] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic, not a feature container")
    count, dim = struct.unpack("<II", head[8:16])
    if dim == 0:
        raise FormatError(f"{path}: feature dimension must be positive")
    expected = 16 + count * dim * 4
    if size != expected:
        raise FormatError(
            f"{path}: payload truncated or oversized, expected {expected} bytes, found {size}"
        )
    rows = np.memmap(path, dtype="<f4", mode="r", offset=16, shape=(count, dim))
    return VisualFeatureStore(dim=dim, rows=rows)


# --- synthetic generator ----------------------------------------------------

TOP_CATEGORIES = 6
SUBS_PER_TOP = 4
PREFERRED_DRAW_P = 0.85


def synth_generate(
    users: int,
    items: int,
    interactions: int,
    skew: float,
    seed: int,
    feat_dim: int = 16,
) -> tuple[InteractionDataset, VisualFeatureStore]:
    """Seeded synthetic purchase log with category structure.

    Items are drawn i.i.d. with popularity weights proportional to
    1/rank^skew, so the marginal item frequencies follow the requested
    power law exactly.  Each drawn item is then assigned to a user that
    prefers the item's latent category (with a uniform fallback), each user
    preferring one to three of the leaf categories.  Visual features are
    the leaf-category centroid plus Gaussian noise.  Users or items that
    are never drawn are dropped; dense ids follow first appearance in time
    order, matching what a CSV round trip would assign.
    """
    if users <= 0 or items <= 0 or interactions <= 0:
        raise InvalidInputError("users, items and interactions must all be positive")
    if skew < 0:
        raise InvalidInputError(f"skew must be non-negative, got {skew}")
    rng = np.random.default_rng(seed)
    n_leaf = TOP_CATEGORIES * SUBS_PER_TOP

    item_leaf = rng.integers(0, n_leaf, size=items)
    popularity_rank = rng.permutation(items)
    weights = (popularity_rank + 1.0) ** (-skew)
    weights = weights / weights.sum()

    pref_count = rng.integers(1, 4, size=users)
    user_prefs = [rng.choice(n_leaf, size=k, replace=False) for k in pref_count]
    fans: list[list[int]] = [[] for _ in range(n_leaf)]
    for u, prefs in enumerate(user_prefs):
        for cat in prefs:
            fans[cat].append(u)

    drawn_items = rng.choice(items, size=interactions, p=weights)
    take_fan = rng.random(interactions) < PREFERRED_DRAW_P
    drawn_users = np.empty(interactions, dtype=np.int64)
    for k in range(interactions):
        cat_fans = fans[item_leaf[drawn_items[k]]]
        if take_fan[k] and cat_fans:
            drawn_users[k] = cat_fans[rng.integers(0, len(cat_fans))]
        else:
            drawn_users[k] = rng.integers(0, users)

    gaps = rng.integers(60, 3600, size=interactions)
    stamps = 1_600_000_000 + np.cumsum(gaps)

    top_centroids = rng.normal(0.0, 1.0, size=(TOP_CATEGORIES, feat_dim))
    leaf_centroids = (
        np.repeat(top_centroids, SUBS_PER_TOP, axis=0)
        + rng.normal(0.0, 0.5, size=(n_leaf, feat_dim))
    )
    raw_feats = leaf_centroids[item_leaf] + rng.normal(0.0, 0.1, size=(items, feat_dim))

    # Relabel by first appearance in time order so a CSV round trip assigns
    # identical dense ids and the feature rows stay aligned.
    user_map: dict[int, int] = {}
    item_map: dict[int, int] = {}
    users_out = np.empty(interactions, dtype=np.int64)
    items_out = np.empty(interactions, dtype=np.int64)
    for k in range(interactions):
        users_out[k] = user_map.setdefault(int(drawn_users[k]), len(user_map))
        items_out[k] = item_map.setdefault(int(drawn_items[k]), len(item_map))
    user_ids = [f"u{orig}" for orig in user_map]
    item_ids = [f"i{orig}" for orig in item_map]

    dense_feats = np.zeros((len(item_map), feat_dim), dtype=np.float32)
    for orig, dense in item_map.items():
        dense_feats[dense] = raw_feats[orig]

    inter = Interactions(users_out, items_out, stamps.astype(np.int64))
    dataset = InteractionDataset(
        inter,
        user_ids,
        item_ids,
        {e: k for k, e in enumerate(user_ids)},
        {e: k for k, e in enumerate(item_ids)},
    )
    store = VisualFeatureStore(dim=feat_dim, rows=dense_feats)
    return dataset, store
