"""Manifest-driven extraction into the HVFEAT01 feature container.

The manifest is a CSV with header ``item_id,path``.  Item ids are dense
non-negative integers; output row k holds the feature of item k regardless
of manifest order.  Ids absent from the manifest, and images that fail to
decode, produce zero rows and are listed in the returned summary.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoders import get_encoder

FEATURE_MAGIC = b"HVFEAT01"

MANIFEST_HEADER = ["item_id", "path"]


class ManifestError(ValueError):
    """The manifest CSV is malformed."""


def read_manifest(path) -> list[tuple[int, str]]:
    path = Path(path)
    rows: list[tuple[int, str]] = []
    seen: set[int] = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}: line 1: expected header {','.join(MANIFEST_HEADER)!r}"
            )
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ManifestError(f"{path}: line {line_no}: expected 2 fields")
            raw_id, image_path = row[0].strip(), row[1].strip()
            try:
                item_id = int(raw_id)
            except ValueError:
                raise ManifestError(
                    f"{path}: line {line_no}: item_id {raw_id!r} is not an integer"
                ) from None
            if item_id < 0:
                raise ManifestError(f"{path}: line {line_no}: item_id must be >= 0")
            if item_id in seen:
                raise ManifestError(f"{path}: line {line_no}: duplicate item_id {item_id}")
            seen.add(item_id)
            rows.append((item_id, image_path))
    return rows


def write_container(path, rows: np.ndarray) -> None:
    """Serialize float32 rows as magic, u32 count, u32 dim, then payload."""
    rows = np.ascontiguousarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes())


@dataclass
class ExtractSummary:
    count: int
    dim: int
    encoder: str
    missing: list[int] = field(default_factory=list)  # ids with no manifest row
    failed: list[tuple[int, str]] = field(default_factory=list)  # undecodable images

    def describe(self) -> str:
        lines = [f"{self.count} rows x {self.dim} dims via {self.encoder}"]
        if self.missing:
            lines.append(f"missing ids (zero rows): {self.missing}")
        for item_id, reason in self.failed:
            lines.append(f"failed id {item_id} (zero row): {reason}")
        return "\n".join(lines)


def extract(manifest, encoder_name: str, out_path, batch_size: int = 16) -> ExtractSummary:
    """Encode every manifest image and write the container in dense-id order."""
    if isinstance(manifest, (str, Path)):
        manifest = read_manifest(manifest)
    if not manifest:
        raise ManifestError("manifest lists no items")
    if batch_size <= 0:
        raise ValueError(f"batch size must be positive, got {batch_size}")

    encoder = get_encoder(encoder_name)
    count = max(item_id for item_id, _ in manifest) + 1
    by_id = dict(manifest)
    missing = [k for k in range(count) if k not in by_id]

    rows = None
    failed: list[tuple[int, str]] = []
    pending_ids: list[int] = []
    pending: list[np.ndarray] = []

    def flush():
        nonlocal rows
        if not pending:
            return
        feats = encoder.forward(np.stack(pending))
        if rows is None:
            rows = np.zeros((count, feats.shape[1]), dtype=np.float32)
        rows[pending_ids] = feats
        pending_ids.clear()
        pending.clear()

    for item_id in sorted(by_id):
        try:
            with Image.open(by_id[item_id]) as img:
                pending.append(encoder.preprocess(img))
            pending_ids.append(item_id)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            failed.append((item_id, str(exc)))
        if len(pending) >= batch_size:
            flush()
    flush()

    if rows is None:  # every image failed; fall back to the encoder's width
        rows = np.zeros((count, encoder.dim), dtype=np.float32)
    write_container(out_path, rows)
    return ExtractSummary(
        count=count,
        dim=int(rows.shape[1]),
        encoder=encoder_name,
        missing=missing,
        failed=failed,
    )
