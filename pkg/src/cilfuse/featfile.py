"""Binary feature-file format for precomputed embeddings.

Layout (little-endian):
    bytes 0..3    magic "CILF"
    bytes 4..7    format version (u32) = 1
    bytes 8..11   n rows (u32)
    bytes 12..15  k columns (u32)
    16..16+4nk    n*k float32 features, row-major
    ..+4n         n u32 class labels

A JSON manifest accompanies the file and must declare at least
``class_count``; every label must be < class_count. Features are stored as
float32 and upcast to float64 on ingestion.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import LabeledSet
from .errors import FormatError

MAGIC = b"CILF"
VERSION = 1
HEADER_LEN = 16


def write_feature_file(path, x, labels) -> None:
    x = np.ascontiguousarray(x, dtype=np.float32)
    labels = np.ascontiguousarray(labels, dtype=np.uint32)
    if x.ndim != 2:
        raise FormatError("features must be a 2-D array")
    n, k = x.shape
    if len(labels) != n:
        raise FormatError(f"{n} rows but {len(labels)} labels")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, n, k))
        fh.write(x.astype("<f4").tobytes())
        fh.write(labels.astype("<u4").tobytes())


def read_feature_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a feature file; errors name the offending byte offset."""
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_LEN:
        raise FormatError(f"truncated header: file ends at byte {len(blob)}, need {HEADER_LEN}")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic at byte 0: {blob[:4]!r}")
    version, n, k = struct.unpack("<III", blob[4:HEADER_LEN])
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    if n == 0:
        raise FormatError("empty dataset (n=0) at byte 8")
    if k == 0:
        raise FormatError("zero feature width (k=0) at byte 12")
    expected = HEADER_LEN + 4 * n * k + 4 * n
    if len(blob) != expected:
        raise FormatError(f"file ends at byte {len(blob)}, expected {expected} (n={n}, k={k})")
    x = np.frombuffer(blob, dtype="<f4", count=n * k, offset=HEADER_LEN).reshape(n, k)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=HEADER_LEN + 4 * n * k)
    return x.astype(np.float64), labels.astype(np.int64)


def read_manifest(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "class_count" not in doc:
        raise FormatError("manifest must be a JSON object with a class_count field")
    if not isinstance(doc["class_count"], int) or doc["class_count"] < 1:
        raise FormatError("class_count must be a positive integer")
    return doc


def ingest_features(file_path, manifest_path) -> LabeledSet:
    """Load a feature file as a labeled set of precomputed inputs.

    Models built on ingested rows use an identity trunk (no trunk blocks);
    branch blocks operate directly on the stored feature rows.
    """
    x, labels = read_feature_file(file_path)
    manifest = read_manifest(manifest_path)
    if labels.max() >= manifest["class_count"]:
        raise FormatError(
            f"label {int(labels.max())} >= declared class_count {manifest['class_count']}"
        )
    n = x.shape[0]
    return LabeledSet(x, labels, np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))
