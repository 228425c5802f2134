"""Writer and validator for the shared embedding-store wire format.

The format is the contract between this bridge and the downstream consumer:
magic ``CEMB``, u32 version=1, u32 n_items, u32 n_views, u32 dim (all
little-endian), then the text payload (n_items*n_views*dim float32,
row-major) and the image payload (n_items*dim float32). A JSON manifest at
``<path>.manifest`` carries encoder_name, view_names, item_ids and the
CRC-32 of the payload. This module implements the format independently; the
consumer's loader is the other side of the contract.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import StoreError

MAGIC = b"CEMB"
VERSION = 1
HEADER = struct.Struct("<4sIIII")


def write_store_file(
    path,
    text: np.ndarray,
    image: np.ndarray,
    encoder_name: str,
    view_names: list[str],
    item_ids: list[str],
    extra: dict | None = None,
) -> None:
    path = Path(path)
    text = np.ascontiguousarray(text, dtype="<f4")
    image = np.ascontiguousarray(image, dtype="<f4")
    if text.ndim != 3 or image.ndim != 2:
        raise StoreError("text must be (n_items, n_views, dim), image (n_items, dim)")
    n, c, d = text.shape
    if image.shape != (n, d):
        raise StoreError(f"image shape {image.shape} does not match text {text.shape}")
    if len(view_names) != c or len(item_ids) != n:
        raise StoreError("view_names/item_ids lengths do not match the arrays")
    if not (np.isfinite(text).all() and np.isfinite(image).all()):
        raise StoreError("refusing to write non-finite embeddings")
    _fail_on_zero_norm(text, image)

    payload = text.tobytes() + image.tobytes()
    with path.open("wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, c, d))
        fh.write(payload)
    manifest = {
        "encoder_name": encoder_name,
        "view_names": list(view_names),
        "item_ids": list(item_ids),
        "crc32": f"{zlib.crc32(payload) & 0xFFFFFFFF:08x}",
    }
    if extra:
        for key, value in extra.items():
            manifest.setdefault(key, value)
    Path(str(path) + ".manifest").write_text(
        json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8")


def _fail_on_zero_norm(text: np.ndarray, image: np.ndarray) -> None:
    tnorm = np.linalg.norm(text.astype(np.float64), axis=2)
    bad = np.argwhere(tnorm == 0.0)
    if bad.size:
        i, j = (int(x) for x in bad[0])
        raise StoreError(f"degenerate embedding: zero norm at item {i}, view {j}")
    inorm = np.linalg.norm(image.astype(np.float64), axis=1)
    bad = np.argwhere(inorm == 0.0)
    if bad.size:
        raise StoreError(f"degenerate embedding: zero norm at item {int(bad[0][0])}, view image")


def read_store_file(path):
    """Parse and fully check a store file; returns (text, image, manifest)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise StoreError(f"{path}: truncated header")
    magic, version, n, c, d = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise StoreError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreError(f"{path}: unsupported version {version}")
    expected = HEADER.size + 4 * (n * c * d + n * d)
    if len(raw) != expected:
        raise StoreError(f"{path}: expected {expected} bytes, found {len(raw)}")
    payload = raw[HEADER.size:]
    manifest_path = Path(str(path) + ".manifest")
    if not manifest_path.exists():
        raise StoreError(f"{path}: missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    crc = f"{zlib.crc32(payload) & 0xFFFFFFFF:08x}"
    if crc != str(manifest.get("crc32", "")).lower():
        raise StoreError(f"{path}: checksum mismatch")
    text = np.frombuffer(payload, dtype="<f4", count=n * c * d).reshape(n, c, d).copy()
    image = np.frombuffer(payload, dtype="<f4", count=n * d, offset=4 * n * c * d)
    image = image.reshape(n, d).copy()
    return text, image, manifest


def validate_store(path) -> dict:
    """Re-check format, checksum, and norms; returns a printable report."""
    text, image, manifest = read_store_file(path)
    if not (np.isfinite(text).all() and np.isfinite(image).all()):
        raise StoreError(f"{path}: non-finite values in payload")
    _fail_on_zero_norm(text, image)
    n, c, d = text.shape
    tnorm = np.linalg.norm(text.astype(np.float64), axis=2)
    inorm = np.linalg.norm(image.astype(np.float64), axis=1)
    return {
        "n_items": n,
        "n_views": c,
        "dim": d,
        "encoder_name": manifest.get("encoder_name"),
        "view_names": manifest.get("view_names"),
        "text_norm_mean_per_view": [float(x) for x in tnorm.mean(axis=0)],
        "text_norm_min": float(tnorm.min()),
        "text_norm_max": float(tnorm.max()),
        "image_norm_min": float(inorm.min()),
        "image_norm_max": float(inorm.max()),
    }


def merge_stores(paths: list, out_path) -> None:
    """Concatenate item shards into one store, re-sorted by item id.

    Shards must agree on views, dim, and encoder; item ids must be disjoint.
    The merged file is revalidated before this returns.
    """
    if not paths:
        raise StoreError("nothing to merge")
    texts, images, ids = [], [], []
    view_names = None
    encoder = None
    dim = None
    for p in paths:
        text, image, manifest = read_store_file(p)
        if view_names is None:
            view_names = list(manifest["view_names"])
            encoder = manifest["encoder_name"]
            dim = text.shape[2]
        else:
            if list(manifest["view_names"]) != view_names:
                raise StoreError(f"{p}: view names differ across shards")
            if manifest["encoder_name"] != encoder:
                raise StoreError(f"{p}: encoder differs across shards")
            if text.shape[2] != dim:
                raise StoreError(f"{p}: dim differs across shards")
        texts.append(text)
        images.append(image)
        ids.extend(str(i) for i in manifest["item_ids"])
    if len(set(ids)) != len(ids):
        raise StoreError("duplicate item ids across shards")
    text = np.concatenate(texts, axis=0)
    image = np.concatenate(images, axis=0)
    order = np.argsort(np.asarray(ids))
    write_store_file(
        out_path,
        text[order],
        image[order],
        encoder_name=encoder,
        view_names=view_names,
        item_ids=[ids[int(k)] for k in order],
        extra={"merged_from": [str(p) for p in paths]},
    )
    validate_store(out_path)
