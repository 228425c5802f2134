"""Top-K ranking metrics with train-positive masking, plus early stopping.

Recall@K and NDCG@K are macro-averaged over users that have at least one
target in the evaluated split. NDCG uses binary relevance with the
1/log2(rank+1) discount. Score ties are broken by ascending item index so
every ranking is reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import InteractionDataset
from .errors import DataError, ParameterError

DEFAULT_KS = (10, 20, 50)

ScoreFn = Callable[[int], np.ndarray]


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = DEFAULT_KS
    split: str = "val"
    mask_splits: tuple[str, ...] | None = None  # None: train, plus val when split=test

    def resolved_masks(self) -> tuple[str, ...]:
        if self.mask_splits is not None:
            return self.mask_splits
        return ("train", "val") if self.split == "test" else ("train",)

    def validate(self, n_items: int) -> None:
        if self.split not in ("val", "test"):
            raise ParameterError(f"split must be val or test, got {self.split!r}")
        if not self.ks:
            raise ParameterError("K list is empty")
        if list(self.ks) != sorted(self.ks):
            raise ParameterError("K values must be ascending")
        if any(k < 1 for k in self.ks):
            raise ParameterError("K values must be positive")
        if self.ks[-1] > n_items:
            raise ParameterError(f"K={self.ks[-1]} exceeds the item count {n_items}")


@dataclass(frozen=True)
class EvalReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users_evaluated: int
    split: str = "val"

    def as_records(self) -> list[dict]:
        return [
            {
                "split": self.split,
                "K": k,
                "recall": self.recall[k],
                "ndcg": self.ndcg[k],
                "n_users": self.n_users_evaluated,
            }
            for k in sorted(self.recall)
        ]


def rank_items(scores: np.ndarray, masked: Iterable[int]) -> np.ndarray:
    """All unmasked items sorted by score descending, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    mask = np.zeros(n, dtype=bool)
    masked = list(masked)
    if masked:
        idx = np.asarray(masked, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ParameterError("masked item index out of range")
        mask[idx] = True
    candidates = np.nonzero(~mask)[0]
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order]


def recall_at_k(ranking: Sequence[int], targets: Iterable[int], k: int) -> float:
    targets = set(targets)
    if not targets:
        raise ParameterError("recall undefined for empty targets")
    top = set(int(i) for i in ranking[:k])
    return len(top & targets) / len(targets)


def ndcg_at_k(ranking: Sequence[int], targets: Iterable[int], k: int) -> float:
    targets = set(targets)
    if not targets:
        raise ParameterError("ndcg undefined for empty targets")
    dcg = 0.0
    for pos, item in enumerate(ranking[:k], start=1):
        if int(item) in targets:
            dcg += 1.0 / np.log2(pos + 1)
    ideal = sum(1.0 / np.log2(p + 1) for p in range(1, min(k, len(targets)) + 1))
    return dcg / ideal


def evaluate(score_fn: ScoreFn, ds: InteractionDataset, config: EvalConfig) -> EvalReport:
    """Rank all items per user with masking and macro-average the metrics."""
    config.validate(ds.n_items)
    target_split = ds.positives(config.split)
    mask_splits = [ds.positives(s) for s in config.resolved_masks()]
    recalls = {k: [] for k in config.ks}
    ndcgs = {k: [] for k in config.ks}
    evaluated = 0
    for u in range(ds.n_users):
        targets = target_split[u]
        if not targets:
            continue
        masked: set[int] = set()
        for split in mask_splits:
            masked.update(split[u])
        ranking = rank_items(score_fn(u), masked)
        for k in config.ks:
            recalls[k].append(recall_at_k(ranking, targets, k))
            ndcgs[k].append(ndcg_at_k(ranking, targets, k))
        evaluated += 1
    if evaluated == 0:
        raise DataError(f"no users with targets in split {config.split!r}")
    return EvalReport(
        recall={k: float(np.mean(v)) for k, v in recalls.items()},
        ndcg={k: float(np.mean(v)) for k, v in ndcgs.items()},
        n_users_evaluated=evaluated,
        split=config.split,
    )


@dataclass
class EarlyStopper:
    """Patience-based stop on a metric history (higher is better)."""

    patience: int = 10

    def __post_init__(self):
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")

    def assess(self, history: Sequence[float]) -> tuple[bool, int]:
        """Returns (stop, best_epoch); best is the earliest among ties."""
        if not history:
            return False, -1
        arr = np.asarray(history, dtype=np.float64)
        best_epoch = int(np.argmax(arr))  # argmax takes the earliest maximum
        epochs_since_best = len(arr) - 1 - best_epoch
        return epochs_since_best >= self.patience, best_epoch


def early_stopper(history: Sequence[float], patience: int = 10) -> tuple[bool, int]:
    return EarlyStopper(patience=patience).assess(history)


def popularity_scorer(ds: InteractionDataset) -> ScoreFn:
    """Scores every item by its train interaction count, identical for all users."""
    counts = np.zeros(ds.n_items, dtype=np.float64)
    for items in ds.train_positives:
        for i in items:
            counts[i] += 1.0

    def score(_u: int) -> np.ndarray:
        return counts

    return score


def random_scorer(ds: InteractionDataset, seed: int = 0) -> ScoreFn:
    """Seeded per-user random scores; deterministic across calls."""

    n = ds.n_items

    def score(u: int) -> np.ndarray:
        return np.random.default_rng([seed, u]).random(n)

    return score


def write_report(report: EvalReport, path, config_echo: dict | None = None) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if config_echo is not None:
            fh.write(json.dumps({"type": "config", **config_echo}, sort_keys=True) + "\n")
        for rec in report.as_records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
