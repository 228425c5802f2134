"""Read the prompt dump, run an encoder over prompts and images, emit a store.

The dump is line-delimited JSON with item_id, view_name, view_index, prompt
and image_path. Every item must carry the same ordered view set; output rows
are sorted by item id so the store aligns with the consumer's indexing no
matter how the dump was ordered.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import EncoderSpec, build_encoder
from .errors import CorpusError, MissingImagesError
from .store_format import write_store_file


@dataclass
class CorpusItem:
    item_id: str
    prompts: list[str]
    image_path: str | None


@dataclass
class EncodeResult:
    out_path: Path
    n_items: int
    n_views: int
    dim: int
    token_overflows: int
    placeholder_items: list[str] = field(default_factory=list)


def read_prompt_dump(path, image_dir=None) -> tuple[list[CorpusItem], list[str]]:
    """Parse the dump into per-item prompt lists plus the ordered view names."""
    path = Path(path)
    records: dict[str, dict[int, tuple[str, str]]] = {}
    images: dict[str, str | None] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: bad JSON: {exc.msg}") from None
            try:
                item_id = str(obj["item_id"])
                view_name = str(obj["view_name"])
                view_index = int(obj["view_index"])
                prompt = str(obj["prompt"])
            except (KeyError, TypeError, ValueError):
                raise CorpusError(
                    f"{path}:{lineno}: record needs item_id, view_name, view_index, prompt"
                ) from None
            slot = records.setdefault(item_id, {})
            if view_index in slot:
                raise CorpusError(
                    f"{path}:{lineno}: duplicate view {view_index} for item {item_id!r}"
                )
            slot[view_index] = (view_name, prompt)
            image = obj.get("image_path")
            if item_id in images and images[item_id] != (image or None):
                raise CorpusError(f"{path}:{lineno}: conflicting image paths for {item_id!r}")
            images[item_id] = image or None
    if not records:
        raise CorpusError(f"{path}: empty prompt dump")

    view_names: list[str] | None = None
    items: list[CorpusItem] = []
    for item_id in sorted(records):
        slots = records[item_id]
        expected = list(range(len(slots)))
        if sorted(slots) != expected:
            raise CorpusError(f"item {item_id!r} has gaps in its view indices")
        names = [slots[j][0] for j in expected]
        if view_names is None:
            view_names = names
        elif names != view_names:
            raise CorpusError(
                f"item {item_id!r} has view names {names}, expected {view_names}"
            )
        image = images[item_id]
        if image is not None and image_dir is not None and not Path(image).is_absolute():
            image = str(Path(image_dir) / image)
        items.append(CorpusItem(item_id=item_id,
                                prompts=[slots[j][1] for j in expected],
                                image_path=image))
    return items, view_names


def _l2_normalize(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows.astype(np.float64), axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise CorpusError("encoder produced a zero vector; cannot normalize")
    return (rows / norms).astype(np.float32)


def encode_corpus(
    prompt_dump,
    image_dir,
    spec: EncoderSpec,
    out_path,
    allow_missing: bool = False,
    encoder=None,
    hash_dim: int = 64,
) -> EncodeResult:
    """Encode every prompt and image, write a validated store file.

    Unreadable images land in ``<out>.rejects.jsonl``; without allow_missing
    that is a hard failure, with it the mean of the encoded images stands in
    (recorded in the manifest). Outputs are L2-normalized, which both suits
    the cosine consumers and guarantees the no-zero-norm store invariant.
    """
    out_path = Path(out_path)
    items, view_names = read_prompt_dump(prompt_dump, image_dir)
    encoder = encoder if encoder is not None else build_encoder(spec, hash_dim=hash_dim)

    readable: list[str] = []
    rejects: list[str] = []
    for item in items:
        path = item.image_path
        if path is None or not Path(path).is_file():
            rejects.append(item.item_id)
        else:
            readable.append(item.item_id)
    rejects_path = Path(str(out_path) + ".rejects.jsonl")
    if rejects:
        with rejects_path.open("w", encoding="utf-8") as fh:
            for item_id in rejects:
                fh.write(json.dumps({"item_id": item_id, "reason": "unreadable image"}) + "\n")
        if not allow_missing:
            raise MissingImagesError(rejects, rejects_path)
    elif rejects_path.exists():
        rejects_path.unlink()
    if not readable:
        raise CorpusError("no readable images in the corpus")

    overflow = 0
    texts: list[str] = []
    for item in items:
        for prompt in item.prompts:
            if encoder.count_tokens(prompt) > spec.max_tokens:
                overflow += 1
            texts.append(prompt)
    text_vecs = _l2_normalize(encoder.encode_texts(texts))
    n, c = len(items), len(view_names)
    dim = text_vecs.shape[1]
    text_vecs = text_vecs.reshape(n, c, dim)

    reject_set = set(rejects)
    encoded = _l2_normalize(encoder.encode_images(
        [item.image_path for item in items if item.item_id not in reject_set]))
    image_vecs = np.empty((n, dim), dtype=np.float32)
    placeholder = None
    if rejects:
        placeholder = _l2_normalize(encoded.mean(axis=0, keepdims=True))[0]
    pos = 0
    for row, item in enumerate(items):
        if item.item_id in reject_set:
            image_vecs[row] = placeholder
        else:
            image_vecs[row] = encoded[pos]
            pos += 1

    write_store_file(
        out_path,
        text_vecs,
        image_vecs,
        encoder_name=spec.name,
        view_names=view_names,
        item_ids=[item.item_id for item in items],
        extra={
            "preprocessing": getattr(encoder, "preprocessing", "unknown"),
            "max_tokens": spec.max_tokens,
            "token_overflows": overflow,
            "placeholder_items": rejects,
        },
    )
    return EncodeResult(
        out_path=out_path,
        n_items=n,
        n_views=c,
        dim=dim,
        token_overflows=overflow,
        placeholder_items=rejects,
    )
