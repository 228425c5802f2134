"""Binary container for per-item per-view text embeddings and image embeddings.

Wire format (little-endian):
    magic ``CEMB`` (4 bytes), u32 version=1, u32 n_items, u32 n_views, u32 dim,
    then the text payload (n_items * n_views * dim float32, row-major),
    then the image payload (n_items * dim float32).

A JSON manifest sidecar ``<path>.manifest`` records encoder_name, view_names
(ordered), item_ids (ordered) and the CRC-32 of the payload bytes. Stores are
write-once; loaded sets are immutable and safe to share across threads.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateEmbeddingError, ParameterError, StoreFormatError

MAGIC = b"CEMB"
VERSION = 1
HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class ViewEmbeddingSet:
    """Aligned text/image embeddings for n_items, with C views per item."""

    text: np.ndarray   # (n_items, n_views, dim) float32
    image: np.ndarray  # (n_items, dim) float32
    encoder_name: str
    view_names: tuple[str, ...]
    item_ids: tuple[str, ...]
    extra_manifest: dict | None = None

    @property
    def n_items(self) -> int:
        return self.text.shape[0]

    @property
    def n_views(self) -> int:
        return self.text.shape[1]

    @property
    def dim(self) -> int:
        return self.text.shape[2]

    def validate(self) -> None:
        if self.text.ndim != 3 or self.image.ndim != 2:
            raise StoreFormatError("text must be (n_items, n_views, dim), image (n_items, dim)")
        n, c, d = self.text.shape
        if self.image.shape != (n, d):
            raise StoreFormatError(
                f"image shape {self.image.shape} inconsistent with text shape {self.text.shape}"
            )
        if n < 0 or c < 1 or d < 1:
            raise StoreFormatError("store needs n_views >= 1 and dim >= 1")
        if len(self.view_names) != c:
            raise StoreFormatError(f"{len(self.view_names)} view names for {c} views")
        if len(self.item_ids) != n:
            raise StoreFormatError(f"{len(self.item_ids)} item ids for {n} items")
        if n == 0:
            return
        if not np.isfinite(self.text).all() or not np.isfinite(self.image).all():
            raise StoreFormatError("store contains non-finite values")
        _check_norms(self.text, self.image)

    def select_views(self, indices: list[int]) -> "ViewEmbeddingSet":
        """Restrict the store to a subset of views, keeping their order."""
        if not indices:
            raise ParameterError("view selection must keep at least one view")
        bad = [j for j in indices if j < 0 or j >= self.n_views]
        if bad:
            raise ParameterError(f"view indices {bad} out of range for C={self.n_views}")
        if len(set(indices)) != len(indices):
            raise ParameterError("view indices must be distinct")
        return replace(
            self,
            text=np.ascontiguousarray(self.text[:, indices, :]),
            view_names=tuple(self.view_names[j] for j in indices),
        )

    def view_index(self, name: str) -> int:
        try:
            return self.view_names.index(name)
        except ValueError:
            raise ParameterError(f"unknown view {name!r}; store has {self.view_names}") from None


def _check_norms(text: np.ndarray, image: np.ndarray) -> None:
    text_norms = np.linalg.norm(text.astype(np.float64), axis=2)
    zero = np.argwhere(text_norms == 0.0)
    if zero.size:
        i, j = (int(v) for v in zero[0])
        raise DegenerateEmbeddingError(i, j)
    image_norms = np.linalg.norm(image.astype(np.float64), axis=1)
    zero = np.argwhere(image_norms == 0.0)
    if zero.size:
        raise DegenerateEmbeddingError(int(zero[0][0]), "image")


def write_store(embeddings: ViewEmbeddingSet, path) -> None:
    """Write the store and its manifest; refuses sets that violate invariants."""
    embeddings.validate()
    path = Path(path)
    text = np.ascontiguousarray(embeddings.text, dtype="<f4")
    image = np.ascontiguousarray(embeddings.image, dtype="<f4")
    payload = text.tobytes() + image.tobytes()
    header = HEADER.pack(MAGIC, VERSION, embeddings.n_items, embeddings.n_views, embeddings.dim)
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(payload)
    manifest = {
        "encoder_name": embeddings.encoder_name,
        "view_names": list(embeddings.view_names),
        "item_ids": list(embeddings.item_ids),
        "crc32": f"{zlib.crc32(payload) & 0xFFFFFFFF:08x}",
    }
    if embeddings.extra_manifest:
        for key, value in embeddings.extra_manifest.items():
            manifest.setdefault(key, value)
    manifest_path = Path(str(path) + ".manifest")
    manifest_path.write_text(json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8")


def read_store(path) -> ViewEmbeddingSet:
    """Read and fully validate a store file (header, checksum, norms)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise StoreFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n_items, n_views, dim = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    if n_views < 1 or dim < 1:
        raise StoreFormatError(f"{path}: invalid dims n_views={n_views} dim={dim}")
    text_count = n_items * n_views * dim
    image_count = n_items * dim
    expected = HEADER.size + 4 * (text_count + image_count)
    if len(raw) != expected:
        raise StoreFormatError(
            f"{path}: payload length mismatch, expected {expected} bytes got {len(raw)}"
        )
    payload = raw[HEADER.size:]

    manifest_path = Path(str(path) + ".manifest")
    if not manifest_path.exists():
        raise StoreFormatError(f"{path}: missing manifest sidecar {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StoreFormatError(f"{manifest_path}: bad JSON: {exc.msg}") from None
    for key in ("encoder_name", "view_names", "item_ids", "crc32"):
        if key not in manifest:
            raise StoreFormatError(f"{manifest_path}: missing key {key!r}")
    crc = f"{zlib.crc32(payload) & 0xFFFFFFFF:08x}"
    if crc != str(manifest["crc32"]).lower():
        raise StoreFormatError(
            f"{path}: checksum mismatch (payload {crc}, manifest {manifest['crc32']})"
        )

    text = np.frombuffer(payload, dtype="<f4", count=text_count).reshape(n_items, n_views, dim)
    image = np.frombuffer(payload, dtype="<f4", count=image_count, offset=4 * text_count)
    image = image.reshape(n_items, dim)
    known = {"encoder_name", "view_names", "item_ids", "crc32"}
    extra = {k: v for k, v in manifest.items() if k not in known}
    embeddings = ViewEmbeddingSet(
        text=text.copy(),
        image=image.copy(),
        encoder_name=str(manifest["encoder_name"]),
        view_names=tuple(str(v) for v in manifest["view_names"]),
        item_ids=tuple(str(v) for v in manifest["item_ids"]),
        extra_manifest=extra or None,
    )
    embeddings.validate()
    return embeddings


@dataclass(frozen=True)
class GroupSignal:
    """Planted structure for synthetic stores.

    Items in the same group (group of item i is ``i % n_groups``) share a
    common direction; the informative view and the image both carry it with
    weight signal_weight against noise_weight of per-item noise, while the
    remaining views are pure noise.
    """

    n_groups: int
    signal_weight: float = 1.0
    noise_weight: float = 0.0
    informative_view: int = 0

    def group_of(self, item: int) -> int:
        return item % self.n_groups


def synth_store(
    n_items: int,
    n_views: int,
    dim: int,
    seed: int = 0,
    structure: GroupSignal | None = None,
    item_ids: tuple[str, ...] | None = None,
) -> ViewEmbeddingSet:
    """Deterministic pseudo-random unit-norm store, optionally group-structured."""
    if n_items < 1 or n_views < 1 or dim < 1:
        raise ParameterError("synth_store needs n_items, n_views, dim >= 1")
    rng = np.random.default_rng(seed)
    text = rng.standard_normal((n_items, n_views, dim))
    image = rng.standard_normal((n_items, dim))
    if structure is not None:
        if not (0 <= structure.informative_view < n_views):
            raise ParameterError("informative_view out of range")
        if structure.signal_weight == 0 and structure.noise_weight == 0:
            raise ParameterError("signal_weight and noise_weight cannot both be zero")
        directions = rng.standard_normal((structure.n_groups, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        groups = np.arange(n_items) % structure.n_groups
        signal = directions[groups]
        image = structure.signal_weight * signal + structure.noise_weight * image
        j = structure.informative_view
        text[:, j, :] = structure.signal_weight * signal + structure.noise_weight * text[:, j, :]
        # views other than j stay pure noise; normalization below removes scale
    norms = np.linalg.norm(text, axis=2, keepdims=True)
    norms[norms == 0] = 1.0
    text = text / norms
    inorms = np.linalg.norm(image, axis=1, keepdims=True)
    inorms[inorms == 0] = 1.0
    image = image / inorms
    if item_ids is None:
        width = max(4, len(str(n_items - 1)))
        item_ids = tuple(f"item{idx:0{width}d}" for idx in range(n_items))
    return ViewEmbeddingSet(
        text=text.astype(np.float32),
        image=image.astype(np.float32),
        encoder_name=f"synthetic(seed={seed})",
        view_names=tuple(f"view{j}" for j in range(n_views)),
        item_ids=item_ids,
    )
