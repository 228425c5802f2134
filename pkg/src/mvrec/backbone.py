"""Graph collaborative-filtering backbone consuming fused modality vectors.

The reference backbone propagates ID embeddings over the symmetric-normalized
user-item bipartite graph (layer-mean readout) after smoothing the item side
over a frozen item-item semantic kNN graph. Fused text and the image vector
enter additively at layer 0 through trainable linear projections, which are
the only modality-specific parameters. Training is pairwise ranking with
uniform negative sampling and adaptive-moment updates with decoupled weight
decay on ID embeddings and projections.

Everything is numpy: parameters are float32 (float64 in debug mode), all
propagation and gradient math runs in float64, and a fixed seed yields
byte-identical checkpoints on a single thread.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import InteractionDataset
from .errors import (
    DataError,
    DegenerateEmbeddingError,
    NumericError,
    ParameterError,
    StoreFormatError,
)
from .evaluation import early_stopper, ndcg_at_k, rank_items, recall_at_k
from .fusion import ModalityInputs, MlpFusionParams, mlp_backward, mlp_forward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# parameters subject to decoupled weight decay: ID embeddings and projections
DECAYED = ("user_emb", "item_emb", "text_w", "text_b", "image_w", "image_b")

CHECKPOINT_MAGIC = b"MVCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class RecConfig:
    d: int = 512
    layers_ui: int = 2
    layers_ii: int = 1
    k: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs_max: int = 200
    batch_size: int = 2048
    seed: int = 0
    patience: int = 10

    def validate(self) -> None:
        if self.d < 1:
            raise ParameterError(f"d must be >= 1, got {self.d}")
        if self.layers_ui < 0 or self.layers_ii < 0:
            raise ParameterError("layer counts must be >= 0")
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs_max < 1 or self.batch_size < 1 or self.patience < 1:
            raise ParameterError("epochs_max, batch_size and patience must be >= 1")

    def echo(self) -> dict:
        return {
            "d": self.d,
            "layers_ui": self.layers_ui,
            "layers_ii": self.layers_ii,
            "k": self.k,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "epochs_max": self.epochs_max,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "patience": self.patience,
        }


@dataclass
class RecModelState:
    """Trainable parameters plus optimizer moments."""

    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    dtype: np.dtype = np.dtype(np.float32)

    @classmethod
    def init(
        cls,
        n_users: int,
        n_items: int,
        inputs: ModalityInputs,
        config: RecConfig,
        dtype=np.float32,
    ) -> "RecModelState":
        config.validate()
        rng = np.random.default_rng([config.seed, 0])
        d = config.d
        p = inputs.text_dim
        img_d = inputs.image.shape[1]

        def glorot(fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        params = {
            "user_emb": rng.normal(0.0, 0.1, size=(n_users, d)),
            "item_emb": rng.normal(0.0, 0.1, size=(n_items, d)),
            "text_w": glorot(p, d),
            "text_b": np.zeros(d),
            "image_w": glorot(img_d, d),
            "image_b": np.zeros(d),
        }
        if inputs.mlp is not None:
            params["mlp_w"] = inputs.mlp.weight.copy()
            params["mlp_b"] = inputs.mlp.bias.copy()
        dtype = np.dtype(dtype)
        params = {k: w.astype(dtype) for k, w in params.items()}
        zeros = {k: np.zeros_like(w) for k, w in params.items()}
        return cls(
            params=params,
            m=zeros,
            v={k: np.zeros_like(w) for k, w in params.items()},
            step=0,
            dtype=dtype,
        )

    def copy(self) -> "RecModelState":
        return RecModelState(
            params={k: w.copy() for k, w in self.params.items()},
            m={k: w.copy() for k, w in self.m.items()},
            v={k: w.copy() for k, w in self.v.items()},
            step=self.step,
            dtype=self.dtype,
        )

    def check_finite(self) -> None:
        for name, w in self.params.items():
            if not np.isfinite(w).all():
                raise NumericError(f"parameter {name} became non-finite")

    def mlp_params(self, alpha: float) -> MlpFusionParams | None:
        if "mlp_w" not in self.params:
            return None
        return MlpFusionParams(
            weight=self.params["mlp_w"].astype(np.float64),
            bias=self.params["mlp_b"].astype(np.float64),
            alpha=alpha,
        )


@dataclass(frozen=True)
class ItemSemanticGraph:
    """Frozen symmetric-normalized item kNN adjacency (no self-loops)."""

    adjacency: sp.csr_matrix
    k: int

    def fingerprint(self) -> str:
        a = self.adjacency
        h = zlib.crc32(a.indptr.tobytes())
        h = zlib.crc32(a.indices.tobytes(), h)
        h = zlib.crc32(a.data.tobytes(), h)
        return f"{h & 0xFFFFFFFF:08x}"


def _sym_normalize(adj: sp.csr_matrix) -> sp.csr_matrix:
    degrees = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(degrees)
    nonzero = degrees > 0
    inv_sqrt[nonzero] = 1.0 / np.sqrt(degrees[nonzero])
    d_mat = sp.diags(inv_sqrt)
    return (d_mat @ adj @ d_mat).tocsr()


def build_norm_bipartite(ds: InteractionDataset) -> sp.csr_matrix:
    """Symmetric-normalized (M+N)x(M+N) adjacency over train interactions."""
    m, n = ds.n_users, ds.n_items
    rows, cols = [], []
    for u, items in enumerate(ds.train_positives):
        for i in items:
            rows.append(u)
            cols.append(m + i)
    if not rows:
        raise DataError("train split is empty")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    data = np.ones(rows.shape[0], dtype=np.float64)
    size = m + n
    upper = sp.coo_matrix((data, (rows, cols)), shape=(size, size))
    adj = (upper + upper.T).tocsr()
    return _sym_normalize(adj)


def build_item_knn_graph(item_vecs: np.ndarray, k: int) -> ItemSemanticGraph:
    """Top-k cosine neighbors per item, symmetrized by max, then normalized.

    Ties are broken by the lowest item index so graph construction is
    deterministic. The result is frozen: training never rewrites it.
    """
    vecs = np.asarray(item_vecs, dtype=np.float64)
    if vecs.ndim != 2:
        raise ParameterError("item_vecs must be (N, dim)")
    n = vecs.shape[0]
    if n <= k:
        raise ParameterError(f"need more items than neighbors, got N={n} k={k}")
    norms = np.linalg.norm(vecs, axis=1)
    zero = np.nonzero(norms == 0.0)[0]
    if zero.size:
        raise DegenerateEmbeddingError(int(zero[0]), "graph-input")
    unit = vecs / norms[:, None]
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    rows, cols = [], []
    for i in range(n):
        # stable argsort on the negated sims keeps the lowest index among ties
        order = np.argsort(-sims[i], kind="stable")[:k]
        rows.extend([i] * k)
        cols.extend(int(j) for j in order)
    data = np.ones(len(rows), dtype=np.float64)
    directed = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    symmetric = directed.maximum(directed.T)
    return ItemSemanticGraph(adjacency=_sym_normalize(symmetric), k=k)


def _layer_mean(adj: sp.csr_matrix, x: np.ndarray, layers: int) -> np.ndarray:
    acc = x.copy()
    cur = x
    for _ in range(layers):
        cur = adj @ cur
        acc += cur
    return acc / (layers + 1)


def propagate(
    state: RecModelState,
    inputs: ModalityInputs,
    bipartite: sp.csr_matrix,
    item_graph: ItemSemanticGraph,
    config: RecConfig,
):
    """Final user/item representations after modality injection and smoothing."""
    (f_u, f_i), _ = _forward(state, inputs, bipartite, item_graph, config)
    return f_u, f_i


def _forward(state, inputs, bipartite, item_graph, config):
    p = {k: w.astype(np.float64) for k, w in state.params.items()}
    text_in = inputs.text_input
    mlp_cache = None
    if "mlp_w" in p:
        mlp = MlpFusionParams(weight=p["mlp_w"], bias=p["mlp_b"],
                              alpha=inputs.mlp.alpha if inputs.mlp else 0.01)
        text, mlp_cache = mlp_forward(text_in, mlp)
    else:
        text = text_in
    proj_text = text @ p["text_w"] + p["text_b"]
    proj_image = inputs.image @ p["image_w"] + p["image_b"]
    h_item0 = p["item_emb"] + proj_text + proj_image
    h_item = _layer_mean(item_graph.adjacency, h_item0, config.layers_ii)
    z0 = np.vstack([p["user_emb"], h_item])
    z = _layer_mean(bipartite, z0, config.layers_ui)
    m = p["user_emb"].shape[0]
    cache = (p, text, mlp_cache)
    return (z[:m], z[m:]), cache


def bpr_loss(score_pos, score_neg):
    """Pairwise ranking loss -ln sigmoid(pos - neg) in stable softplus form."""
    x = np.asarray(score_neg, dtype=np.float64) - np.asarray(score_pos, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    if out.ndim == 0:
        return float(out)
    return out


def loss_and_grads(
    state: RecModelState,
    inputs: ModalityInputs,
    bipartite: sp.csr_matrix,
    item_graph: ItemSemanticGraph,
    config: RecConfig,
    users: np.ndarray,
    pos_items: np.ndarray,
    neg_items: np.ndarray,
):
    """Mean pairwise loss over the batch and its exact parameter gradients.

    Pure in the state: repeated calls with the same arguments return the
    same values, which is what the finite-difference checks rely on.
    """
    (f_u, f_i), cache = _forward(state, inputs, bipartite, item_graph, config)
    p, text, mlp_cache = cache
    m = f_u.shape[0]
    b = users.shape[0]

    s_pos = np.einsum("bd,bd->b", f_u[users], f_i[pos_items])
    s_neg = np.einsum("bd,bd->b", f_u[users], f_i[neg_items])
    losses = bpr_loss(s_pos, s_neg)
    loss = float(np.mean(losses))

    # d(loss)/d(s_neg - s_pos) per pair, averaged over the batch
    g = _sigmoid(s_neg - s_pos) / b
    grad_fu = np.zeros_like(f_u)
    grad_fi = np.zeros_like(f_i)
    np.add.at(grad_fu, users, g[:, None] * (f_i[neg_items] - f_i[pos_items]))
    np.add.at(grad_fi, pos_items, -g[:, None] * f_u[users])
    np.add.at(grad_fi, neg_items, g[:, None] * f_u[users])

    grad_z = np.vstack([grad_fu, grad_fi])
    # both normalized adjacencies are symmetric, so backprop reuses _layer_mean
    grad_z0 = _layer_mean(bipartite, grad_z, config.layers_ui)
    grad_user = grad_z0[:m]
    grad_hitem = _layer_mean(item_graph.adjacency, grad_z0[m:], config.layers_ii)

    grads = {
        "user_emb": grad_user,
        "item_emb": grad_hitem,
        "text_w": text.T @ grad_hitem,
        "text_b": grad_hitem.sum(axis=0),
        "image_w": inputs.image.T @ grad_hitem,
        "image_b": grad_hitem.sum(axis=0),
    }
    if mlp_cache is not None:
        grad_text = grad_hitem @ p["text_w"].T
        mlp = MlpFusionParams(weight=p["mlp_w"], bias=p["mlp_b"],
                              alpha=inputs.mlp.alpha if inputs.mlp else 0.01)
        _, grad_mlp_w, grad_mlp_b = mlp_backward(mlp_cache, grad_text, mlp)
        grads["mlp_w"] = grad_mlp_w
        grads["mlp_b"] = grad_mlp_b
    return loss, grads


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def adam_step(state: RecModelState, grads: dict[str, np.ndarray], config: RecConfig) -> None:
    """In-place adaptive-moment update with decay folded into the lr-scaled step."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    for name, grad in grads.items():
        g = grad.astype(np.float64)
        m64 = state.m[name].astype(np.float64)
        v64 = state.v[name].astype(np.float64)
        m64 = ADAM_BETA1 * m64 + (1.0 - ADAM_BETA1) * g
        v64 = ADAM_BETA2 * v64 + (1.0 - ADAM_BETA2) * g * g
        update = (m64 / bias1) / (np.sqrt(v64 / bias2) + ADAM_EPS)
        w64 = state.params[name].astype(np.float64)
        if name in DECAYED:
            update = update + config.weight_decay * w64
        w64 = w64 - config.lr * update
        state.params[name] = w64.astype(state.dtype)
        state.m[name] = m64.astype(state.dtype)
        state.v[name] = v64.astype(state.dtype)


@dataclass
class TrainResult:
    state: RecModelState
    log: list[dict]
    best_epoch: int
    best_val: float
    bipartite: sp.csr_matrix
    item_graph: ItemSemanticGraph


def train(
    ds: InteractionDataset,
    inputs: ModalityInputs,
    config: RecConfig,
    dtype=np.float32,
    deterministic_timing: bool = True,
) -> TrainResult:
    """Pairwise-ranking training with per-epoch validation and early stopping.

    One uniform negative is resampled per positive each epoch. Validation
    Recall@20 (capped at the item count) drives patience-based stopping; the
    returned state is the best-validation checkpoint. With no validation
    targets the loop runs to epochs_max and returns the final state.
    """
    config.validate()
    ds.validate()
    bipartite = build_norm_bipartite(ds)
    item_graph = build_item_knn_graph(inputs.graph_vectors, config.k)
    graph_mark = item_graph.fingerprint()
    state = RecModelState.init(ds.n_users, ds.n_items, inputs, config, dtype=dtype)

    pairs = np.asarray(
        [(u, i) for u, items in enumerate(ds.train_positives) for i in items],
        dtype=np.int64,
    )
    train_sets = [frozenset(items) for items in ds.train_positives]
    k_eff = min(20, ds.n_items)
    has_val = any(len(v) for v in ds.val_positives)

    log: list[dict] = []
    history: list[float] = []
    best_state = state.copy()
    best_epoch = 0
    best_val = -np.inf

    for epoch in range(config.epochs_max):
        rng = np.random.default_rng([config.seed, 1, epoch])
        order = rng.permutation(pairs.shape[0])
        shuffled = pairs[order]
        negatives = _sample_negatives(shuffled[:, 0], train_sets, ds.n_items, rng)

        started = time.perf_counter()
        epoch_loss = 0.0
        for start in range(0, shuffled.shape[0], config.batch_size):
            batch = shuffled[start:start + config.batch_size]
            negs = negatives[start:start + config.batch_size]
            loss, grads = loss_and_grads(
                state, inputs, bipartite, item_graph, config,
                batch[:, 0], batch[:, 1], negs,
            )
            if not np.isfinite(loss):
                raise NumericError(
                    f"loss became non-finite at epoch {epoch}; lr {config.lr} may be too high"
                )
            adam_step(state, grads, config)
            state.check_finite()
            epoch_loss += loss * batch.shape[0]
        epoch_loss /= max(1, shuffled.shape[0])
        elapsed_ms = 0 if deterministic_timing else int((time.perf_counter() - started) * 1000)

        val_recall = val_ndcg = None
        if has_val:
            val_recall, val_ndcg = _quick_val(state, inputs, bipartite, item_graph, config, ds, k_eff)
            history.append(val_recall)
            if val_recall > best_val:
                best_val = val_recall
                best_epoch = epoch
                best_state = state.copy()
        log.append({
            "epoch": epoch,
            "loss": epoch_loss,
            "val_recall20": val_recall,
            "val_ndcg20": val_ndcg,
            "elapsed_ms": elapsed_ms,
        })
        if has_val:
            stop, _ = early_stopper(history, patience=config.patience)
            if stop:
                break

    if not has_val:
        best_state = state
        best_epoch = len(log) - 1
        best_val = float("nan")

    if item_graph.fingerprint() != graph_mark:
        raise NumericError("frozen item graph changed during training")
    return TrainResult(
        state=best_state,
        log=log,
        best_epoch=best_epoch,
        best_val=best_val,
        bipartite=bipartite,
        item_graph=item_graph,
    )


def _sample_negatives(users, train_sets, n_items, rng) -> np.ndarray:
    negs = np.empty(users.shape[0], dtype=np.int64)
    for idx, u in enumerate(users):
        positives = train_sets[u]
        if len(positives) >= n_items:
            # full-feedback user: no unobserved item exists, fall back to uniform
            negs[idx] = int(rng.integers(0, n_items))
            continue
        while True:
            cand = int(rng.integers(0, n_items))
            if cand not in positives:
                negs[idx] = cand
                break
    return negs


def _quick_val(state, inputs, bipartite, item_graph, config, ds, k_eff):
    f_u, f_i = propagate(state, inputs, bipartite, item_graph, config)
    recalls, ndcgs = [], []
    for u in range(ds.n_users):
        targets = ds.val_positives[u]
        if not targets:
            continue
        scores = f_i @ f_u[u]
        ranking = rank_items(scores, ds.train_positives[u])
        recalls.append(recall_at_k(ranking, targets, k_eff))
        ndcgs.append(ndcg_at_k(ranking, targets, k_eff))
    return float(np.mean(recalls)), float(np.mean(ndcgs))


def predict_scores(final_user: np.ndarray, final_item: np.ndarray, user: int) -> np.ndarray:
    """Scores of every item for one user, from final representations."""
    if user < 0 or user >= final_user.shape[0]:
        raise ParameterError(f"unknown user index {user}")
    return final_item @ final_user[user]


def make_scorer(final_user: np.ndarray, final_item: np.ndarray):
    def score(u: int) -> np.ndarray:
        return predict_scores(final_user, final_item, u)

    return score


def save_checkpoint(state: RecModelState, config_echo: dict, path, epoch: int, best_val: float) -> None:
    """Versioned binary checkpoint: JSON header plus raw little-endian tensors."""
    path = Path(path)
    names = sorted(state.params)
    tensors = []
    payload = bytearray()
    for group, table in (("param", state.params), ("m", state.m), ("v", state.v)):
        for name in names:
            arr = np.ascontiguousarray(table[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            tensors.append({
                "name": f"{group}:{name}",
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
            })
            payload.extend(le.tobytes())
    header = {
        "config": config_echo,
        "epoch": epoch,
        "best_val": best_val if np.isfinite(best_val) else None,
        "step": state.step,
        "dtype": str(state.dtype),
        "tensors": tensors,
        "payload_crc32": f"{zlib.crc32(bytes(payload)) & 0xFFFFFFFF:08x}",
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Returns (state, config_echo, epoch, best_val)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise StoreFormatError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise StoreFormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + head_len].decode("utf-8"))
    payload = raw[12 + head_len:]
    crc = f"{zlib.crc32(payload) & 0xFFFFFFFF:08x}"
    if crc != header["payload_crc32"]:
        raise StoreFormatError(f"{path}: checkpoint payload checksum mismatch")
    offset = 0
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
    for spec_entry in header["tensors"]:
        group, name = spec_entry["name"].split(":", 1)
        shape = tuple(spec_entry["shape"])
        dtype = np.dtype(spec_entry["dtype"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<"), count=count, offset=offset)
        groups[group][name] = arr.astype(dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise StoreFormatError(f"{path}: trailing bytes in checkpoint payload")
    state = RecModelState(
        params=groups["param"],
        m=groups["m"],
        v=groups["v"],
        step=int(header["step"]),
        dtype=np.dtype(header["dtype"]),
    )
    best_val = header["best_val"]
    return state, header["config"], int(header["epoch"]), (
        float("nan") if best_val is None else float(best_val)
    )
