"""Descriptor files, dataset manifests and selection traces.

Descriptor file layout, little-endian throughout::

    offset  size  field
    0       4     magic b"DSC1"
    4       4     format version (u32, currently 1)
    8       4     descriptor count (u32)
    12      4     dimension (u32)
    16      4*n*d payload, IEEE-754 binary32, row-major

Values are stored as binary32 and promoted to float64 on load.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .classify import classify
from .core import (
    DataError,
    DescriptorSet,
    DimensionMismatch,
    EmptyDescriptorSet,
    MergeStrategy,
    Method,
    NonFiniteComponent,
    ScoreRule,
    SupportPool,
)
from .episodes import Item, LabeledDataset, UnlabeledItem, merge_shots
from .similarity import neighbor_stats

MAGIC = b"DSC1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")
UNLABELED = "UNLABELED"
MANIFEST_FORMAT = "fewshot-nbnn-manifest"


class CodecError(DataError):
    pass


class BadMagic(CodecError):
    pass


class TruncatedPayload(CodecError):
    pass


class UnsupportedVersion(CodecError):
    pass


class TrailingBytes(CodecError):
    pass


class ManifestError(DataError):
    pass


def encode_descriptor_file(descriptors: DescriptorSet) -> bytes:
    data = descriptors.data
    with np.errstate(over="ignore"):
        payload = data.astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise NonFiniteComponent("a component overflows binary32")
    n, d = payload.shape
    return HEADER.pack(MAGIC, FORMAT_VERSION, n, d) + payload.tobytes(order="C")


def decode_descriptor_file(blob: bytes) -> DescriptorSet:
    blob = bytes(blob)
    if blob[:4] != MAGIC[: min(4, len(blob))]:
        raise BadMagic(f"not a descriptor file (magic {blob[:4]!r})")
    if len(blob) < HEADER.size:
        raise TruncatedPayload(f"header needs {HEADER.size} bytes, got {len(blob)}")
    _, version, n, d = HEADER.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format version {version} is not supported")
    if n == 0:
        raise EmptyDescriptorSet("descriptor file holds no descriptors")
    if d == 0:
        raise DimensionMismatch("descriptor file declares dimension 0")
    expected = HEADER.size + 4 * n * d
    if len(blob) < expected:
        raise TruncatedPayload(f"payload needs {expected - HEADER.size} bytes, got {len(blob) - HEADER.size}")
    if len(blob) > expected:
        raise TrailingBytes(f"{len(blob) - expected} bytes after the payload")
    values = np.frombuffer(blob, dtype="<f4", count=n * d, offset=HEADER.size)
    return DescriptorSet(values.astype(np.float64).reshape(n, d))


def write_descriptor_file(path: str | os.PathLike, descriptors: DescriptorSet) -> None:
    Path(path).write_bytes(encode_descriptor_file(descriptors))


def read_descriptor_file(path: str | os.PathLike) -> DescriptorSet:
    return decode_descriptor_file(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def write_manifest(
    dataset: LabeledDataset,
    directory: str | os.PathLike,
    *,
    protocol: dict | None = None,
    extra: dict | None = None,
) -> Path:
    """Write every image as a descriptor file plus ``manifest.json``; return its path."""
    root = Path(directory)
    (root / "descriptors").mkdir(parents=True, exist_ok=True)
    entries = []
    for it in dataset.items:
        rel = f"descriptors/{it.image_id}.dsc"
        write_descriptor_file(root / rel, it.descriptors)
        entries.append({"id": it.image_id, "class": it.class_id, "path": rel})
    for u in dataset.unlabeled:
        rel = f"descriptors/{u.image_id}.dsc"
        write_descriptor_file(root / rel, u.descriptors)
        entry = {"id": u.image_id, "class": UNLABELED, "path": rel}
        if u.group is not None:
            entry["group"] = u.group
        entries.append(entry)
    doc: dict[str, Any] = {"format": MANIFEST_FORMAT, "version": 1, "items": entries}
    if protocol:
        doc["protocol"] = protocol
    if extra:
        doc.update(extra)
    path = root / "manifest.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_manifest(path: str | os.PathLike) -> tuple[LabeledDataset, dict]:
    """Load a manifest and every descriptor file it references.

    Returns the dataset and the manifest's protocol defaults (possibly empty).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("items"), list):
        raise ManifestError(f"{path}: expected an object with an 'items' list")
    items, unlabeled, seen = [], [], set()
    for n, entry in enumerate(doc["items"]):
        try:
            image_id, class_id, rel = str(entry["id"]), str(entry["class"]), entry["path"]
        except (KeyError, TypeError):
            raise ManifestError(f"{path}: item {n} needs 'id', 'class' and 'path'") from None
        if image_id in seen:
            raise ManifestError(f"{path}: duplicate image id {image_id!r}")
        seen.add(image_id)
        file = path.parent / rel
        if not file.is_file():
            raise ManifestError(f"{path}: item {image_id!r} points at missing file {rel}")
        try:
            ds = read_descriptor_file(file)
        except DataError as exc:
            raise type(exc)(f"{file}: {exc}") from None
        if class_id == UNLABELED:
            unlabeled.append(UnlabeledItem(image_id, ds, entry.get("group")))
        else:
            items.append(Item(image_id, class_id, ds))
    return LabeledDataset(items, unlabeled), dict(doc.get("protocol") or {})


def support_pool_from_dataset(dataset: LabeledDataset, merge: MergeStrategy | str = MergeStrategy.UNION) -> SupportPool:
    """One support class per labelled class, shots merged with ``merge``."""
    classes = []
    for cid in dataset.class_ids:
        shots = [dataset.items[p].descriptors for p in dataset.by_class[cid]]
        classes.append((cid, merge_shots(shots, merge)))
    return SupportPool(classes)


# ---------------------------------------------------------------------------
# Selection traces
# ---------------------------------------------------------------------------


def selection_trace(
    Q: DescriptorSet,
    pool: SupportPool,
    method: Method | str = Method.MN4,
    score_rule: ScoreRule | str = ScoreRule.NBNN,
    k_percent: float | None = None,
) -> dict:
    """Bookkeeping for visualising which descriptors drove a decision.

    ``pairs`` mirrors the classifier's selection exactly.  ``nearest_support``
    lists, per class, the matched support descriptors of the selected queries;
    ``mutual_query`` lists, per class, the query descriptor each of those
    support descriptors points back to.  For MNN the union of ``mutual_query``
    equals the selected query set.
    """
    result = classify(Q, pool, method, score_rule, k_percent)
    stats = neighbor_stats(Q, pool)
    nearest_support: dict[str, list[int]] = {cid: [] for cid in pool.class_ids}
    mutual_query: dict[str, list[int]] = {cid: [] for cid in pool.class_ids}
    pairs = []
    for p in result.selection.pairs:
        cid, within = pool.locate(p.pool_index)
        pairs.append(
            {
                "query_index": p.query_index,
                "pool_index": p.pool_index,
                "class": cid,
                "within_class_index": within,
                "cosine": p.similarity,
                "tau": p.tau,
            }
        )
        if within not in nearest_support[cid]:
            nearest_support[cid].append(within)
            back = int(stats.back_row[0, p.pool_index])
            if back not in mutual_query[cid]:
                mutual_query[cid].append(back)
    return {
        "method": Method(method).value,
        "selection": result.selection.method.value,
        "score_rule": ScoreRule(score_rule).value,
        "n_query_descriptors": len(Q),
        "fallback": result.fallback,
        "predicted": result.predicted,
        "scores": result.scores.as_dict(),
        "pairs": pairs,
        "nearest_support": {k: sorted(v) for k, v in nearest_support.items()},
        "mutual_query": {k: sorted(v) for k, v in mutual_query.items()},
    }
