"""Fusion layer: collapse the C view embeddings into one item text vector.

Four strategies are supported. SUM and Concat are parameter-free pooling;
MLP is a trainable one-layer perceptron over the concatenated views with a
leaky-rectifier activation; SA weights views by their similarity scores.
The image embedding always passes through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import SimilarityProfile
from .errors import ParameterError
from .store import ViewEmbeddingSet, write_store

FUSION_METHODS = ("sum", "concat", "mlp", "sa")

LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class MlpFusionParams:
    weight: np.ndarray  # (C*D, D)
    bias: np.ndarray    # (D,)
    alpha: float = LEAKY_SLOPE

    def validate(self, c: int, d: int) -> None:
        if self.weight.shape != (c * d, d):
            raise ParameterError(
                f"mlp weight shape {self.weight.shape}, expected {(c * d, d)}"
            )
        if self.bias.shape != (d,):
            raise ParameterError(f"mlp bias shape {self.bias.shape}, expected {(d,)}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ParameterError("mlp fusion parameters must be finite")


@dataclass(frozen=True)
class FusedItemRepresentation:
    item_index: int
    text: np.ndarray   # (D,) for sum/mlp/sa, (C*D,) for concat
    image: np.ndarray  # (D,), bit-identical pass-through
    method: str


def init_mlp_params(n_views: int, dim: int, seed: int = 0, alpha: float = LEAKY_SLOPE) -> MlpFusionParams:
    """Variance-preserving uniform init on +-sqrt(6 / (fan_in + fan_out)), zero bias."""
    rng = np.random.default_rng(seed)
    fan_in, fan_out = n_views * dim, dim
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return MlpFusionParams(weight=weight, bias=np.zeros(fan_out), alpha=alpha)


def fuse_sum(views: np.ndarray) -> np.ndarray:
    views = _as_views(views)
    return views.sum(axis=0)


def fuse_concat(views: np.ndarray) -> np.ndarray:
    views = _as_views(views)
    return views.reshape(-1)


def fuse_mlp(views: np.ndarray, params: MlpFusionParams) -> np.ndarray:
    views = _as_views(views)
    c, d = views.shape
    params.validate(c, d)
    out, _ = mlp_forward(views.reshape(1, -1), params)
    return out[0]


def fuse_sa(views: np.ndarray, profile: SimilarityProfile) -> np.ndarray:
    views = _as_views(views)
    scores = np.asarray(profile.scores, dtype=np.float64)
    if scores.shape[0] != views.shape[0]:
        raise ParameterError(
            f"profile has {scores.shape[0]} scores for {views.shape[0]} views"
        )
    return scores @ views


def _as_views(views: np.ndarray) -> np.ndarray:
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 2 or views.shape[0] < 1:
        raise ParameterError("views must be a (C, D) array with C >= 1")
    return views


def mlp_forward(flat_views: np.ndarray, params: MlpFusionParams):
    """Leaky-rectified affine map over concatenated views.

    flat_views: (n, C*D). Returns (output (n, D), cache for mlp_backward).
    """
    pre = flat_views @ params.weight + params.bias
    out = np.where(pre > 0, pre, params.alpha * pre)
    return out, (flat_views, pre)


def mlp_backward(cache, grad_out: np.ndarray, params: MlpFusionParams):
    """Gradients of mlp_forward wrt inputs, weight, and bias."""
    flat_views, pre = cache
    grad_pre = grad_out * np.where(pre > 0, 1.0, params.alpha)
    grad_weight = flat_views.T @ grad_pre
    grad_bias = grad_pre.sum(axis=0)
    grad_inputs = grad_pre @ params.weight.T
    return grad_inputs, grad_weight, grad_bias


def fuse_all(
    store: ViewEmbeddingSet,
    profiles: list[SimilarityProfile] | None,
    method: str,
    params: MlpFusionParams | None = None,
) -> list[FusedItemRepresentation]:
    """Fuse every item in the store; image rows are copied through unchanged."""
    if method not in FUSION_METHODS:
        raise ParameterError(f"unknown fusion method {method!r}, expected one of {FUSION_METHODS}")
    if method == "mlp" and params is None:
        raise ParameterError("mlp fusion requires MlpFusionParams")
    if method == "sa":
        if profiles is None:
            raise ParameterError("sa fusion requires similarity profiles")
        if len(profiles) != store.n_items:
            raise ParameterError(
                f"{len(profiles)} profiles for {store.n_items} items"
            )
    text = store.text.astype(np.float64)
    n, c, d = text.shape
    if method == "sum":
        fused = text.sum(axis=1)
    elif method == "concat":
        fused = text.reshape(n, c * d)
    elif method == "mlp":
        params.validate(c, d)
        fused, _ = mlp_forward(text.reshape(n, c * d), params)
    else:
        weights = np.stack([p.scores for p in profiles])
        fused = np.einsum("ic,icd->id", weights, text)
    return [
        FusedItemRepresentation(
            item_index=i, text=fused[i], image=store.image[i], method=method
        )
        for i in range(n)
    ]


@dataclass(frozen=True)
class ModalityInputs:
    """What the downstream trainer consumes.

    For mlp, text_input holds the raw concatenated views and mlp carries the
    trainable fusion parameters; for the other methods text_input is the
    already-fused text and mlp is None. graph_vectors are the content vectors
    the frozen item graph is built from (training-independent by design).
    """

    method: str
    text_input: np.ndarray     # (n, p) float64
    image: np.ndarray          # (n, D) float64
    mlp: MlpFusionParams | None
    graph_vectors: np.ndarray  # (n, q) float64

    @property
    def text_dim(self) -> int:
        # width of the text vector entering the projection
        if self.mlp is not None:
            return self.mlp.weight.shape[1]
        return self.text_input.shape[1]


def prepare_modality_inputs(
    store: ViewEmbeddingSet,
    profiles: list[SimilarityProfile] | None,
    method: str,
    mlp_seed: int = 0,
    append_profile: bool = False,
) -> ModalityInputs:
    """Build trainer inputs; the frozen item graph uses the fused text.

    append_profile is an experimental switch that widens the (non-mlp) text
    input by the C similarity scores; off by default since SUM/Concat/MLP
    normally discard the profile entirely.
    """
    if method not in FUSION_METHODS:
        raise ParameterError(f"unknown fusion method {method!r}, expected one of {FUSION_METHODS}")
    text = store.text.astype(np.float64)
    n, c, d = text.shape
    image = store.image.astype(np.float64)
    if append_profile and profiles is None:
        raise ParameterError("append_profile requires similarity profiles")
    if method == "mlp":
        if append_profile:
            raise ParameterError("append_profile is not supported with mlp fusion")
        flat = text.reshape(n, c * d)
        return ModalityInputs(
            method=method,
            text_input=flat,
            image=image,
            mlp=init_mlp_params(c, d, seed=mlp_seed),
            graph_vectors=flat,
        )
    fused = np.stack([r.text for r in fuse_all(store, profiles, method)])
    text_input = fused
    if append_profile:
        scores = np.stack([p.scores for p in profiles])
        text_input = np.concatenate([fused, scores], axis=1)
    return ModalityInputs(
        method=method, text_input=text_input, image=image, mlp=None, graph_vectors=fused
    )


def write_fused_store(
    reps: list[FusedItemRepresentation], item_ids, path, encoder_name: str = "fused"
) -> None:
    """Dump fused representations in the embedding-store container (n_views=1).

    For concat the text width exceeds the image width; image rows are
    zero-padded to the container's dim and the true width is recorded in the
    manifest under image_dim.
    """
    if not reps:
        raise ParameterError("nothing to write")
    method = reps[0].method
    text = np.stack([r.text for r in reps]).astype(np.float32)
    image = np.stack([r.image for r in reps]).astype(np.float32)
    image_dim = image.shape[1]
    if text.shape[1] != image_dim:
        padded = np.zeros((image.shape[0], text.shape[1]), dtype=np.float32)
        padded[:, :image_dim] = image
        image = padded
    fused_set = ViewEmbeddingSet(
        text=text[:, None, :],
        image=image,
        encoder_name=encoder_name,
        view_names=(f"fused:{method}",),
        item_ids=tuple(item_ids),
        extra_manifest={"fusion_method": method, "image_dim": image_dim},
    )
    write_store(fused_set, path)
