"""Turn item metadata fields into the ordered multi-view prompt set.

Each view is one template filled with one metadata field; the optional
global view concatenates every field value behind its own stem. View order
is fixed for a run so that view index j means the same thing for every item.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .data import ItemMetadata
from .errors import ParseError, TemplateError

PLACEHOLDER = "{}"

GLOBAL_VIEW = "global"

# One template per metadata field, plus the global stem used when all fields
# are folded into a single view.
DEFAULT_TEMPLATES = (
    ("title", "The product title is {}."),
    ("brand", "The product brand is {}."),
    ("categories", "The product categories are {}."),
    ("description", "The product description is {}."),
)
GLOBAL_TEMPLATE = "The product descriptions are {}"

GLOBAL_SEPARATOR = "; "

DEFAULT_SOFT_CAP = 1200


@dataclass(frozen=True)
class PromptTemplate:
    view_name: str
    template: str

    def __post_init__(self):
        if self.template.count(PLACEHOLDER) != 1:
            raise TemplateError(
                f"template for view {self.view_name!r} must contain exactly one "
                f"{PLACEHOLDER!r} placeholder: {self.template!r}"
            )

    def fill(self, value: str) -> str:
        return self.template.replace(PLACEHOLDER, value)


@dataclass(frozen=True)
class ItemViews:
    item_index: int
    prompts: tuple[tuple[str, str], ...]  # (view_name, prompt text), fixed order
    image_ref: str | None

    @property
    def n_views(self) -> int:
        return len(self.prompts)


def default_templates() -> list[PromptTemplate]:
    return [PromptTemplate(name, tpl) for name, tpl in DEFAULT_TEMPLATES]


def load_templates(path) -> list[PromptTemplate]:
    """Read `{view_name, template}` records, one JSON object per line."""
    path = Path(path)
    templates: list[PromptTemplate] = []
    names: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"bad JSON: {exc.msg}") from None
            if "view_name" not in obj or "template" not in obj:
                raise ParseError(path, lineno, "record needs view_name and template")
            name = str(obj["view_name"])
            if name in names:
                raise TemplateError(f"{path}:{lineno}: duplicate view name {name!r}")
            names.add(name)
            templates.append(PromptTemplate(name, str(obj["template"])))
    if not templates:
        raise TemplateError(f"{path}: no templates found")
    return templates


def build_views(
    meta: ItemMetadata,
    templates: list[PromptTemplate],
    include_global: bool = True,
    item_index: int = 0,
) -> ItemViews:
    """Fill every template with its field; optionally append the global view.

    Empty field values are kept (the slot is filled with "") so the view
    count C is identical for every item.
    """
    if not templates:
        raise TemplateError("template list is empty")
    names = [t.view_name for t in templates]
    if len(set(names)) != len(names):
        raise TemplateError("duplicate view names in template set")
    prompts: list[tuple[str, str]] = []
    values: list[str] = []
    for tpl in templates:
        if tpl.view_name not in meta.fields:
            raise TemplateError(
                f"view {tpl.view_name!r} has no field in metadata for item {meta.item_id!r}"
            )
        value = meta.fields[tpl.view_name]
        values.append(value)
        prompts.append((tpl.view_name, tpl.fill(value)))
    if include_global:
        combined = GLOBAL_SEPARATOR.join(values)
        prompts.append((GLOBAL_VIEW, GLOBAL_TEMPLATE.replace(PLACEHOLDER, combined)))
    return ItemViews(item_index=item_index, prompts=tuple(prompts), image_ref=meta.image_ref)


def soft_truncate(prompt: str, max_chars: int) -> str:
    """Character-level cap that prefers cutting at a whitespace boundary.

    Token-exact truncation belongs to the encoder's own tokenizer; this is
    only a sanity bound applied before prompts leave the core.
    """
    if max_chars < 1:
        raise TemplateError(f"max_chars must be >= 1, got {max_chars}")
    if len(prompt) <= max_chars:
        return prompt
    head = prompt[:max_chars]
    cut = -1
    for pos, ch in enumerate(head):
        if ch.isspace():
            cut = pos
    if cut >= 0:
        return head[:cut].rstrip()
    return head


def build_all_views(
    metas: list[ItemMetadata],
    templates: list[PromptTemplate] | None = None,
    include_global: bool = True,
    max_chars: int = DEFAULT_SOFT_CAP,
) -> list[ItemViews]:
    templates = templates if templates is not None else default_templates()
    out: list[ItemViews] = []
    for idx, meta in enumerate(metas):
        views = build_views(meta, templates, include_global=include_global, item_index=idx)
        capped = tuple((name, soft_truncate(text, max_chars)) for name, text in views.prompts)
        out.append(ItemViews(item_index=idx, prompts=capped, image_ref=views.image_ref))
    return out


def write_prompt_dump(views: list[ItemViews], item_ids: list[str] | tuple[str, ...], path) -> None:
    """Emit `{item_id, view_name, view_index, prompt, image_path}` records."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for iv in views:
            for j, (name, text) in enumerate(iv.prompts):
                rec = {
                    "item_id": item_ids[iv.item_index],
                    "view_name": name,
                    "view_index": j,
                    "prompt": text,
                    "image_path": iv.image_ref,
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
