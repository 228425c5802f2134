"""Interaction and metadata loading, k-core filtering, and deterministic splits.

Dense user/item indices are defined as the lexicographic rank of the external
string ids. Any loader that sees the same id sets therefore reproduces the
same indexing, which is what keeps embedding stores and split manifests
aligned across runs and tools.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    DataError,
    DuplicateItemIdError,
    EmptyAfterKCoreError,
    ParameterError,
    ParseError,
)

SPLIT_NAMES = ("train", "val", "test")

METADATA_FIELDS = ("title", "brand", "categories", "description")


@dataclass(frozen=True)
class InteractionDataset:
    """Implicit-feedback dataset with disjoint per-user train/val/test splits."""

    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    train_positives: tuple[tuple[int, ...], ...]
    val_positives: tuple[tuple[int, ...], ...]
    test_positives: tuple[tuple[int, ...], ...]

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @cached_property
    def user_index_map(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.user_ids)}

    @cached_property
    def item_index_map(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.item_ids)}

    def positives(self, split: str) -> tuple[tuple[int, ...], ...]:
        if split not in SPLIT_NAMES:
            raise ParameterError(f"unknown split {split!r}, expected one of {SPLIT_NAMES}")
        return getattr(self, f"{split}_positives")

    @property
    def n_interactions(self) -> int:
        return sum(
            len(s)
            for split in (self.train_positives, self.val_positives, self.test_positives)
            for s in split
        )

    def validate(self) -> None:
        m, n = self.n_users, self.n_items
        if m == 0 or n == 0:
            raise DataError("dataset has no users or no items")
        for split in (self.train_positives, self.val_positives, self.test_positives):
            if len(split) != m:
                raise DataError("split arrays must have one entry per user")
        for u in range(m):
            seen: set[int] = set()
            for split in (self.train_positives, self.val_positives, self.test_positives):
                items = split[u]
                if any(i < 0 or i >= n for i in items):
                    raise DataError(f"user {u} references an item index out of range")
                if list(items) != sorted(items):
                    raise DataError(f"positives of user {u} are not sorted")
                overlap = seen.intersection(items)
                if overlap:
                    raise DataError(f"user {u} has items {sorted(overlap)} in more than one split")
                seen.update(items)
            if not self.train_positives[u]:
                raise DataError(f"user {u} has no train positives")


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    n_interactions: int
    density: float

    def __post_init__(self):
        if self.n_users <= 0 or self.n_items <= 0:
            raise DataError("stats require at least one user and one item")
        if not (0.0 < self.density <= 1.0):
            raise DataError(f"density {self.density} outside (0, 1]")


@dataclass(frozen=True)
class ItemMetadata:
    """One item's textual fields plus an optional image reference.

    Field values are always strings (never None); fields absent from the
    source record are kept as empty strings and listed in missing_fields
    so that the view count stays constant across items.
    """

    item_id: str
    fields: dict[str, str]
    image_ref: str | None = None
    missing_fields: tuple[str, ...] = ()
    unknown_fields: tuple[str, ...] = ()
    extra: dict[str, object] = field(default_factory=dict)


def _split_sizes(n: int) -> tuple[int, int, int]:
    # val and test each get floor(n/10); remainder stays in train.
    if n < 3:
        return n, 0, 0
    f = n // 10
    return n - 2 * f, f, f


def load_interactions(path, k_core: int = 5, seed: int = 0) -> InteractionDataset:
    """Load a TSV interaction file, apply iterative k-core, and split 8:1:1.

    Lines are `user_id<TAB>item_id[<TAB>timestamp]`. Duplicate (user, item)
    pairs are collapsed to their earliest timestamp. The per-user split uses
    a seeded shuffle over items ordered by (timestamp, item id), so the same
    seed and input reproduce the assignment byte for byte.
    """
    if k_core < 1:
        raise ParameterError(f"k_core must be >= 1, got {k_core}")
    path = Path(path)
    pairs: dict[tuple[str, str], float] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise ParseError(path, lineno, f"expected 2 or 3 tab-separated fields, got {len(parts)}")
            user, item = parts[0], parts[1]
            if not user or not item:
                raise ParseError(path, lineno, "empty user or item id")
            ts = 0.0
            if len(parts) == 3 and parts[2] != "":
                try:
                    ts = float(parts[2])
                except ValueError:
                    raise ParseError(path, lineno, f"bad timestamp {parts[2]!r}") from None
            key = (user, item)
            if key in pairs:
                pairs[key] = min(pairs[key], ts)
            else:
                pairs[key] = ts
    if not pairs:
        raise DataError(f"{path}: no interactions found")

    kept = _iterate_k_core(pairs, k_core)
    if not kept:
        raise EmptyAfterKCoreError(f"{path}: empty after {k_core}-core filtering")

    user_ids = tuple(sorted({u for u, _ in kept}))
    item_ids = tuple(sorted({i for _, i in kept}))
    item_index = {i: k for k, i in enumerate(item_ids)}

    by_user: dict[str, list[tuple[float, str]]] = {u: [] for u in user_ids}
    for (u, i) in kept:
        by_user[u].append((pairs[(u, i)], i))

    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for u in user_ids:
        entries = sorted(by_user[u])
        items = [item_index[i] for _, i in entries]
        perm = rng.permutation(len(items))
        shuffled = [items[p] for p in perm]
        n_train, n_val, n_test = _split_sizes(len(shuffled))
        train.append(tuple(sorted(shuffled[:n_train])))
        val.append(tuple(sorted(shuffled[n_train:n_train + n_val])))
        test.append(tuple(sorted(shuffled[n_train + n_val:])))

    ds = InteractionDataset(user_ids, item_ids, tuple(train), tuple(val), tuple(test))
    ds.validate()
    return ds


def _iterate_k_core(pairs: dict[tuple[str, str], float], k: int) -> set[tuple[str, str]]:
    kept = set(pairs)
    while True:
        user_deg: dict[str, int] = {}
        item_deg: dict[str, int] = {}
        for u, i in kept:
            user_deg[u] = user_deg.get(u, 0) + 1
            item_deg[i] = item_deg.get(i, 0) + 1
        bad_users = {u for u, d in user_deg.items() if d < k}
        bad_items = {i for i, d in item_deg.items() if d < k}
        if not bad_users and not bad_items:
            return kept
        kept = {(u, i) for (u, i) in kept if u not in bad_users and i not in bad_items}
        if not kept:
            return kept


def compute_stats(ds: InteractionDataset) -> DatasetStats:
    ds.validate()
    n_inter = ds.n_interactions
    return DatasetStats(
        n_users=ds.n_users,
        n_items=ds.n_items,
        n_interactions=n_inter,
        density=n_inter / (ds.n_users * ds.n_items),
    )


def density_percent(n_interactions: int, n_users: int, n_items: int, decimals: int = 3) -> str:
    """Density as a percentage string, rounded half-up in integer arithmetic."""
    if n_users <= 0 or n_items <= 0:
        raise DataError("density undefined for empty user or item sets")
    num = n_interactions * 100 * 10**decimals
    den = n_users * n_items
    q, r = divmod(num, den)
    if 2 * r >= den:
        q += 1
    return f"{q // 10**decimals}.{q % 10**decimals:0{decimals}d}%"


def load_metadata(path, schema: tuple[str, ...] = METADATA_FIELDS) -> list[ItemMetadata]:
    """Load line-delimited metadata records, one JSON object per line.

    Records missing a schema field get an empty string for it and the field
    name recorded in missing_fields. Unknown keys are preserved in `extra`
    and flagged. A repeated item_id is an error.
    """
    path = Path(path)
    records: list[ItemMetadata] = []
    seen: set[str] = set()
    known = set(schema) | {"item_id", "image_path"}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"bad JSON: {exc.msg}") from None
            if not isinstance(obj, dict) or "item_id" not in obj or obj["item_id"] in (None, ""):
                raise ParseError(path, lineno, "record lacks an item_id")
            item_id = str(obj["item_id"])
            if item_id in seen:
                raise DuplicateItemIdError(f"{path}:{lineno}: duplicate item_id {item_id!r}")
            seen.add(item_id)
            fields: dict[str, str] = {}
            missing: list[str] = []
            for name in schema:
                value = obj.get(name)
                if value is None:
                    fields[name] = ""
                    if name not in obj:
                        missing.append(name)
                elif isinstance(value, list):
                    fields[name] = ", ".join(str(v) for v in value)
                else:
                    fields[name] = str(value)
            image = obj.get("image_path")
            extra = {k: v for k, v in obj.items() if k not in known}
            records.append(
                ItemMetadata(
                    item_id=item_id,
                    fields=fields,
                    image_ref=str(image) if image else None,
                    missing_fields=tuple(missing),
                    unknown_fields=tuple(sorted(extra)),
                    extra=extra,
                )
            )
    return records


def metadata_by_item(
    ds: InteractionDataset,
    records: list[ItemMetadata],
    schema: tuple[str, ...] = METADATA_FIELDS,
) -> tuple[list[ItemMetadata], list[str], list[str]]:
    """Align metadata to the dataset's item indexing.

    Returns (aligned, missing_ids, extra_ids). Items without a metadata
    record get all-empty fields so downstream view counts stay constant;
    their ids are reported rather than silently dropped.
    """
    by_id = {r.item_id: r for r in records}
    aligned: list[ItemMetadata] = []
    missing: list[str] = []
    for item_id in ds.item_ids:
        rec = by_id.get(item_id)
        if rec is None:
            missing.append(item_id)
            rec = ItemMetadata(
                item_id=item_id,
                fields={name: "" for name in schema},
                missing_fields=tuple(schema),
            )
        aligned.append(rec)
    extra = sorted(set(by_id) - set(ds.item_ids))
    return aligned, missing, extra


def write_split_manifest(ds: InteractionDataset, path) -> None:
    """Emit `{user_id, item_id, split}` records in deterministic order."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for u in range(ds.n_users):
            for split in SPLIT_NAMES:
                for i in ds.positives(split)[u]:
                    rec = {"user_id": ds.user_ids[u], "item_id": ds.item_ids[i], "split": split}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_split_manifest(path) -> InteractionDataset:
    """Rebuild a dataset from a split manifest, reproducing dense indices."""
    path = Path(path)
    entries: list[tuple[str, str, str]] = []
    seen: set[tuple[str, str]] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"bad JSON: {exc.msg}") from None
            try:
                user, item, split = str(obj["user_id"]), str(obj["item_id"]), str(obj["split"])
            except (KeyError, TypeError):
                raise ParseError(path, lineno, "record needs user_id, item_id, split") from None
            if split not in SPLIT_NAMES:
                raise ParseError(path, lineno, f"unknown split {split!r}")
            if (user, item) in seen:
                raise ParseError(path, lineno, f"duplicate pair ({user!r}, {item!r})")
            seen.add((user, item))
            entries.append((user, item, split))
    if not entries:
        raise DataError(f"{path}: empty split manifest")

    user_ids = tuple(sorted({u for u, _, _ in entries}))
    item_ids = tuple(sorted({i for _, i, _ in entries}))
    umap = {u: k for k, u in enumerate(user_ids)}
    imap = {i: k for k, i in enumerate(item_ids)}
    per_split: dict[str, list[list[int]]] = {s: [[] for _ in user_ids] for s in SPLIT_NAMES}
    for user, item, split in entries:
        per_split[split][umap[user]].append(imap[item])
    ds = InteractionDataset(
        user_ids,
        item_ids,
        tuple(tuple(sorted(s)) for s in per_split["train"]),
        tuple(tuple(sorted(s)) for s in per_split["val"]),
        tuple(tuple(sorted(s)) for s in per_split["test"]),
    )
    ds.validate()
    return ds
