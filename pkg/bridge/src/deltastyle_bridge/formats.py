"""Writers for the consumer's binary formats.

The bridge and the main pipeline share no code at runtime; these layouts are
the contract. All integers are little-endian, payload reals are 32-bit.

  DEDS: magic | version u32=1 | n u64 | clip_dim u32 | style_dim u32 |
        fnv1a-64 digest over both payloads | images f32 | styles f32
  DETT: magic | count u32 | per entry: name length u16, UTF-8 name,
        clip_dim f32 values
  DERM: magic | version u32=1 | style_dim u32 | clip_dim u32 | probe f64 |
        samples-per-channel u32 | rows f32
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"DEDS"
TEXT_MAGIC = b"DETT"
RELEVANCE_MAGIC = b"DERM"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a(data: bytes, state: int = _FNV_OFFSET) -> int:
    """64-bit FNV-1a; the consumer recomputes the same digest on load."""
    h = state
    view = np.frombuffer(data, dtype=np.uint8)
    # Chunked python loop; exports are written once, speed is secondary.
    for b in view.tobytes():
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def _f32_rows(name: str, mat: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(mat, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contain non-finite values")
    return arr


def write_dataset(path: str | Path, images: np.ndarray,
                  styles: np.ndarray) -> dict[str, str]:
    """Write a DEDS file; returns the per-matrix checksums (hex strings)."""
    images = _f32_rows("images", images)
    styles = _f32_rows("styles", styles)
    if images.shape[0] != styles.shape[0]:
        raise ValueError("images and styles must hold equally many records")
    norms = np.linalg.norm(images.astype(np.float64), axis=1)
    if np.abs(norms - 1.0).max() > 1e-3:
        raise ValueError("image embeddings must be unit-norm")
    images_b = images.tobytes()
    styles_b = styles.tobytes()
    digest = fnv1a(styles_b, fnv1a(images_b))
    header = struct.pack("<4sIQIIQ", DATASET_MAGIC, VERSION,
                         images.shape[0], images.shape[1], styles.shape[1],
                         digest)
    Path(path).write_bytes(header + images_b + styles_b)
    return {
        "images": f"{fnv1a(images_b):016x}",
        "styles": f"{fnv1a(styles_b):016x}",
        "payload": f"{digest:016x}",
    }


def write_text_table(path: str | Path, names: list[str],
                     vectors: np.ndarray) -> dict[str, str]:
    vectors = _f32_rows("vectors", vectors)
    if len(names) != vectors.shape[0]:
        raise ValueError("one name per vector required")
    if len(set(names)) != len(names):
        raise ValueError("entry names must be unique")
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    if len(names) and np.abs(norms - 1.0).max() > 1e-3:
        raise ValueError("text embeddings must be unit-norm")
    chunks = [TEXT_MAGIC, struct.pack("<I", len(names))]
    for name, row in zip(names, vectors):
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(row.tobytes())
    payload = b"".join(chunks)
    Path(path).write_bytes(payload)
    return {"vectors": f"{fnv1a(vectors.tobytes()):016x}",
            "file": f"{fnv1a(payload):016x}"}


def write_relevance(path: str | Path, rows: np.ndarray, probe: float,
                    samples_per_channel: int) -> dict[str, str]:
    rows = _f32_rows("rows", rows)
    header = struct.pack("<4sIIIdI", RELEVANCE_MAGIC, VERSION,
                         rows.shape[0], rows.shape[1], float(probe),
                         int(samples_per_channel))
    Path(path).write_bytes(header + rows.tobytes())
    return {"rows": f"{fnv1a(rows.tobytes()):016x}"}
