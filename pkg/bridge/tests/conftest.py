import json

import pytest
from PIL import Image

VIEW_NAMES = ["title", "brand", "global"]


def make_corpus(root, n_items=5, missing_image=None):
    """Prompt dump + PNG images for n_items; returns (dump_path, image_dir)."""
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    dump = root / "prompts.jsonl"
    with dump.open("w", encoding="utf-8") as fh:
        for i in range(n_items):
            item_id = f"item{i:02d}"
            image_name = f"{item_id}.png"
            if item_id != missing_image:
                img = Image.new("RGB", (8, 8),
                                ((37 * i) % 256, (91 * i) % 256, (13 * i) % 256))
                img.save(image_dir / image_name)
            for j, view in enumerate(VIEW_NAMES):
                fh.write(json.dumps({
                    "item_id": item_id,
                    "view_name": view,
                    "view_index": j,
                    "prompt": f"The {view} of product {i} is sample text {i} {j}.",
                    "image_path": image_name,
                }) + "\n")
    return dump, image_dir


@pytest.fixture
def corpus(tmp_path):
    return make_corpus(tmp_path)
