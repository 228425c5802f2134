"""Text/image encoder backends.

Two real families are supported through transformers checkpoints: ``clip``
(77-token limit) and ``long-clip`` (248 tokens; any CLIPModel-compatible
checkpoint whose text tower accepts 248 positions). ``hash`` is an offline
test double that derives deterministic unit vectors from content digests;
it exists so the corpus/store machinery can be exercised without weights
and carries no semantic alignment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import EncoderError

FAMILY_MAX_TOKENS = {"clip": 77, "long-clip": 248, "hash": 77}

DEFAULT_CHECKPOINTS = {
    "clip": "openai/clip-vit-large-patch14",
    "long-clip": "zer0int/LongCLIP-L-Diffusers",
}


@dataclass(frozen=True)
class EncoderSpec:
    family: str
    checkpoint: str | None = None
    device: str = "cpu"
    batch_size: int = 16

    def __post_init__(self):
        if self.family not in FAMILY_MAX_TOKENS:
            raise EncoderError(
                f"unknown encoder family {self.family!r}; "
                f"expected one of {sorted(FAMILY_MAX_TOKENS)}"
            )
        if self.batch_size < 1:
            raise EncoderError("batch_size must be >= 1")

    @property
    def max_tokens(self) -> int:
        return FAMILY_MAX_TOKENS[self.family]

    @property
    def resolved_checkpoint(self) -> str:
        if self.checkpoint:
            return self.checkpoint
        if self.family == "hash":
            return "hash"
        return DEFAULT_CHECKPOINTS[self.family]

    @property
    def name(self) -> str:
        return f"{self.family}:{self.resolved_checkpoint}"


class HashEncoder:
    """Deterministic stand-in encoder (no weights, no alignment claims)."""

    def __init__(self, spec: EncoderSpec, dim: int = 64):
        self.spec = spec
        self.dim = dim
        self.preprocessing = "sha256-digest"

    def _vector(self, digest: bytes) -> np.ndarray:
        seed = int.from_bytes(digest[:8], "little")
        vec = np.random.default_rng(seed).standard_normal(self.dim)
        return (vec / np.linalg.norm(vec)).astype(np.float32)

    def count_tokens(self, text: str) -> int:
        return len(text.split())

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            tokens = text.split()[: self.spec.max_tokens]
            digest = hashlib.sha256(" ".join(tokens).encode("utf-8")).digest()
            out[i] = self._vector(digest)
        return out

    def encode_images(self, image_paths: list[str]) -> np.ndarray:
        out = np.empty((len(image_paths), self.dim), dtype=np.float32)
        for i, path in enumerate(image_paths):
            with open(path, "rb") as fh:
                digest = hashlib.sha256(fh.read()).digest()
            out[i] = self._vector(digest)
        return out


class ClipEncoder:
    """transformers-backed CLIP (or Long-CLIP) text and image towers."""

    def __init__(self, spec: EncoderSpec):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EncoderError(
                "torch and transformers are required for the clip/long-clip "
                "families (pip install 'clip-bridge[clip]')"
            ) from exc
        self.spec = spec
        self._torch = torch
        checkpoint = spec.resolved_checkpoint
        try:
            self.model = CLIPModel.from_pretrained(checkpoint)
            self.processor = CLIPProcessor.from_pretrained(checkpoint)
        except Exception as exc:
            raise EncoderError(f"cannot load checkpoint {checkpoint!r}: {exc}") from exc
        positions = int(self.model.config.text_config.max_position_embeddings)
        if positions < spec.max_tokens:
            raise EncoderError(
                f"checkpoint {checkpoint!r} supports {positions} text positions, "
                f"family {spec.family!r} needs {spec.max_tokens}"
            )
        self.model.eval()
        self.model.to(spec.device)
        self.dim = int(self.model.config.projection_dim)
        self.preprocessing = f"transformers CLIPProcessor({checkpoint})"

    def count_tokens(self, text: str) -> int:
        return len(self.processor.tokenizer(text, truncation=False)["input_ids"])

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        torch = self._torch
        chunks = []
        with torch.inference_mode():
            for start in range(0, len(texts), self.spec.batch_size):
                batch = texts[start:start + self.spec.batch_size]
                inputs = self.processor(
                    text=batch, return_tensors="pt", padding=True,
                    truncation=True, max_length=self.spec.max_tokens,
                ).to(self.spec.device)
                feats = self.model.get_text_features(**inputs)
                chunks.append(feats.cpu().numpy().astype(np.float32))
        return np.concatenate(chunks, axis=0)

    def encode_images(self, image_paths: list[str]) -> np.ndarray:
        from PIL import Image

        torch = self._torch
        chunks = []
        with torch.inference_mode():
            for start in range(0, len(image_paths), self.spec.batch_size):
                batch = []
                for path in image_paths[start:start + self.spec.batch_size]:
                    with Image.open(path) as img:
                        batch.append(img.convert("RGB"))
                inputs = self.processor(images=batch, return_tensors="pt").to(self.spec.device)
                feats = self.model.get_image_features(**inputs)
                chunks.append(feats.cpu().numpy().astype(np.float32))
        return np.concatenate(chunks, axis=0)


def build_encoder(spec: EncoderSpec, hash_dim: int = 64):
    if spec.family == "hash":
        return HashEncoder(spec, dim=hash_dim)
    return ClipEncoder(spec)
