"""Temperature-scaled view-similarity profiles.

For each item, every view's text embedding is compared to the item image by
cosine similarity; a softmax with temperature tau turns the C similarities
into a probability vector over views. All math runs in float64 regardless of
the float32 storage so normalization error stays below acceptance tolerances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateEmbeddingError, ParameterError
from .store import ViewEmbeddingSet

DEFAULT_TAU = 0.1

TAU_GRID = (0.05, 0.1, 0.2, 0.5, 0.7)


@dataclass(frozen=True)
class SimilarityProfile:
    item_index: int
    raw_sims: np.ndarray  # (C,) float64, each in [-1, 1]
    scores: np.ndarray    # (C,) float64, simplex vector
    tau: float

    def validate(self) -> None:
        if self.tau <= 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if self.raw_sims.shape != self.scores.shape or self.raw_sims.ndim != 1:
            raise ParameterError("raw_sims and scores must be equal-length vectors")
        if np.any(self.raw_sims < -1.0) or np.any(self.raw_sims > 1.0):
            raise ParameterError("raw similarities outside [-1, 1]")
        if abs(float(self.scores.sum()) - 1.0) > 1e-12:
            raise ParameterError("scores do not sum to 1")
        if np.any(self.scores <= 0.0) or np.any(self.scores > 1.0):
            raise ParameterError("scores outside (0, 1]")
        if int(np.argmax(self.scores)) != int(np.argmax(self.raw_sims)):
            raise ParameterError("softmax changed the argmax")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two vectors, clamped to [-1, 1] against rounding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbeddingError("?", "?", "zero-norm input to cosine")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def view_similarity_scores(
    text_views: np.ndarray, image: np.ndarray, tau: float, item_index: int = 0
) -> SimilarityProfile:
    """Softmax-with-temperature over per-view cosine similarities (one item)."""
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    text_views = np.asarray(text_views, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if text_views.ndim != 2 or text_views.shape[0] < 1:
        raise ParameterError("text_views must be a (C, D) array with C >= 1")
    norms = np.linalg.norm(text_views, axis=1)
    for j, n in enumerate(norms):
        if n == 0.0:
            raise DegenerateEmbeddingError(item_index, j)
    inorm = np.linalg.norm(image)
    if inorm == 0.0:
        raise DegenerateEmbeddingError(item_index, "image")
    raw = np.clip((text_views @ image) / (norms * inorm), -1.0, 1.0)
    scores = _softmax(raw / tau)
    profile = SimilarityProfile(item_index=item_index, raw_sims=raw, scores=scores, tau=tau)
    profile.validate()
    return profile


def similarity_matrix(store: ViewEmbeddingSet) -> np.ndarray:
    """Raw cosine similarities for every item and view, shape (n_items, C)."""
    text = store.text.astype(np.float64)
    image = store.image.astype(np.float64)
    tnorms = np.linalg.norm(text, axis=2)
    inorms = np.linalg.norm(image, axis=1)
    bad = np.argwhere(tnorms == 0.0)
    if bad.size:
        i, j = (int(v) for v in bad[0])
        raise DegenerateEmbeddingError(i, j)
    if np.any(inorms == 0.0):
        raise DegenerateEmbeddingError(int(np.argmax(inorms == 0.0)), "image")
    dots = np.einsum("icd,id->ic", text, image)
    return np.clip(dots / (tnorms * inorms[:, None]), -1.0, 1.0)


def score_matrix(raw_sims: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise stable softmax of raw_sims / tau."""
    if tau <= 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    logits = raw_sims / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def profile_all(store: ViewEmbeddingSet, tau: float) -> list[SimilarityProfile]:
    """One SimilarityProfile per item, in item index order."""
    if store.n_items == 0:
        return []
    raw = similarity_matrix(store)
    scores = score_matrix(raw, tau)
    profiles = []
    for i in range(store.n_items):
        p = SimilarityProfile(item_index=i, raw_sims=raw[i], scores=scores[i], tau=tau)
        p.validate()
        profiles.append(p)
    return profiles


def write_profile_dump(profiles: list[SimilarityProfile], item_ids, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for p in profiles:
            rec = {
                "item_id": item_ids[p.item_index],
                "raw_sims": [float(x) for x in p.raw_sims],
                "scores": [float(x) for x in p.scores],
                "tau": p.tau,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
