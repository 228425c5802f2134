"""Run orchestration shared by the CLI commands.

A RunSpec captures everything a run needs; every command writes a config
echo (config.json) into its output directory first, so any run can be
replayed to identical artifacts from the echo alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import alignment, fusion
from .backbone import (
    RecConfig,
    load_checkpoint,
    make_scorer,
    propagate,
    save_checkpoint,
    train,
)
from .data import InteractionDataset, load_split_manifest
from .errors import DataError, ParameterError
from .evaluation import (
    DEFAULT_KS,
    EvalConfig,
    EvalReport,
    evaluate,
    popularity_scorer,
    write_report,
)
from .store import ViewEmbeddingSet, read_store


@dataclass(frozen=True)
class RunSpec:
    command: str
    manifest: str
    store: str
    out_dir: str
    fusion: str = "sa"
    tau: float = alignment.DEFAULT_TAU
    views: tuple[str, ...] | None = None  # view names to keep; None keeps all
    rec: RecConfig = field(default_factory=RecConfig)
    deterministic: bool = True

    def echo(self) -> dict:
        return {
            "command": self.command,
            "manifest": str(self.manifest),
            "store": str(self.store),
            "out_dir": str(self.out_dir),
            "fusion": self.fusion,
            "tau": self.tau,
            "views": list(self.views) if self.views is not None else None,
            "rec": self.rec.echo(),
            "deterministic": self.deterministic,
        }


def write_config_echo(echo: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def check_alignment(ds: InteractionDataset, store: ViewEmbeddingSet) -> None:
    if tuple(store.item_ids) != tuple(ds.item_ids):
        raise DataError(
            "store item ids do not match the dataset indexing "
            f"({store.n_items} store items vs {ds.n_items} dataset items)"
        )


def resolve_views(store: ViewEmbeddingSet, views: tuple[str, ...] | None) -> list[int]:
    """Map a view selection (names or numeric indices) onto store indices."""
    if views is None:
        return list(range(store.n_views))
    if not views:
        raise ParameterError("view selection is empty")
    indices = []
    for v in views:
        if v.isdigit():
            j = int(v)
            if j >= store.n_views:
                raise ParameterError(f"view index {j} out of range for C={store.n_views}")
            indices.append(j)
        else:
            indices.append(store.view_index(v))
    if len(set(indices)) != len(indices):
        raise ParameterError("duplicate views in selection")
    return indices


def eval_ks(n_items: int) -> tuple[int, ...]:
    ks = tuple(k for k in DEFAULT_KS if k <= n_items)
    return ks if ks else (n_items,)


@dataclass
class RunArtifacts:
    out_dir: Path
    checkpoint: Path
    train_log: Path
    val_report: EvalReport
    test_report: EvalReport | None
    summary: dict


def run_training(spec: RunSpec, store: ViewEmbeddingSet | None = None,
                 ds: InteractionDataset | None = None) -> RunArtifacts:
    """Full pipeline: profiles, fusion, training, evaluation, artifacts."""
    out_dir = Path(spec.out_dir)
    write_config_echo(spec.echo(), out_dir)
    if ds is None:
        ds = load_split_manifest(spec.manifest)
    if store is None:
        store = read_store(spec.store)
    check_alignment(ds, store)

    view_indices = resolve_views(store, spec.views)
    if view_indices == list(range(store.n_views)):
        active = store
    else:
        active = store.select_views(view_indices)

    profiles = alignment.profile_all(active, spec.tau)
    alignment.write_profile_dump(profiles, active.item_ids, out_dir / "profiles.jsonl")
    inputs = fusion.prepare_modality_inputs(active, profiles, spec.fusion,
                                            mlp_seed=spec.rec.seed)
    echo = spec.echo()
    echo["resolved_view_indices"] = view_indices
    echo["resolved_view_names"] = list(active.view_names)
    echo["text_dim"] = inputs.text_dim
    write_config_echo(echo, out_dir)

    result = train(ds, inputs, spec.rec, deterministic_timing=spec.deterministic)

    log_path = out_dir / "train_log.jsonl"
    with log_path.open("w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    ckpt_path = out_dir / "checkpoint.ckpt"
    save_checkpoint(result.state, echo, ckpt_path, epoch=result.best_epoch,
                    best_val=result.best_val)

    f_u, f_i = propagate(result.state, inputs, result.bipartite, result.item_graph, spec.rec)
    scorer = make_scorer(f_u, f_i)
    ks = eval_ks(ds.n_items)

    val_report = None
    if any(len(v) for v in ds.val_positives):
        val_report = evaluate(scorer, ds, EvalConfig(ks=ks, split="val"))
        write_report(val_report, out_dir / "report_val.jsonl", config_echo=echo)
    test_report = None
    if any(len(t) for t in ds.test_positives):
        test_report = evaluate(scorer, ds, EvalConfig(ks=ks, split="test"))
        write_report(test_report, out_dir / "report_test.jsonl", config_echo=echo)

    summary = {
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.log),
        "final_loss": result.log[-1]["loss"],
        "val": _report_dict(val_report),
        "test": _report_dict(test_report),
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunArtifacts(
        out_dir=out_dir,
        checkpoint=ckpt_path,
        train_log=log_path,
        val_report=val_report,
        test_report=test_report,
        summary=summary,
    )


def _report_dict(report: EvalReport | None) -> dict | None:
    if report is None:
        return None
    return {
        "recall": {str(k): v for k, v in sorted(report.recall.items())},
        "ndcg": {str(k): v for k, v in sorted(report.ndcg.items())},
        "n_users": report.n_users_evaluated,
    }


def evaluate_checkpoint(checkpoint_path, manifest_path, store_path, split: str,
                        out_dir) -> EvalReport:
    """Rebuild the model from a checkpoint and score the requested split."""
    state, echo, _epoch, _best = load_checkpoint(checkpoint_path)
    ds = load_split_manifest(manifest_path)
    store = read_store(store_path)
    check_alignment(ds, store)
    rec = RecConfig(**echo["rec"])
    view_indices = echo.get("resolved_view_indices") or list(range(store.n_views))
    active = store.select_views(view_indices)
    profiles = alignment.profile_all(active, echo["tau"])
    inputs = fusion.prepare_modality_inputs(active, profiles, echo["fusion"],
                                            mlp_seed=rec.seed)
    from .backbone import build_item_knn_graph, build_norm_bipartite

    bipartite = build_norm_bipartite(ds)
    item_graph = build_item_knn_graph(inputs.graph_vectors, rec.k)
    f_u, f_i = propagate(state, inputs, bipartite, item_graph, rec)
    report = evaluate(make_scorer(f_u, f_i), ds,
                      EvalConfig(ks=eval_ks(ds.n_items), split=split))
    out_dir = Path(out_dir)
    run_echo = {"command": "evaluate", "checkpoint": str(checkpoint_path),
                "manifest": str(manifest_path), "store": str(store_path),
                "split": split, "train_config": echo}
    write_config_echo(run_echo, out_dir)
    write_report(report, out_dir / f"report_{split}.jsonl", config_echo=run_echo)
    return report


def popularity_report(manifest_path, split: str = "test") -> EvalReport:
    ds = load_split_manifest(manifest_path)
    return evaluate(popularity_scorer(ds), ds, EvalConfig(ks=eval_ks(ds.n_items), split=split))


# ------------------------------------------------------------------ ablation


def ablate_views(spec: RunSpec, protocol: str) -> dict[str, RunArtifacts]:
    """Per-variant pipeline runs with one view removed (or only the global one).

    Masking happens before the similarity softmax, so scores renormalize over
    the surviving views. The shared store is opened read-only once.
    """
    if protocol not in ("leave-one-out", "only-global"):
        raise ParameterError(f"unknown ablation protocol {protocol!r}")
    store = read_store(spec.store)
    ds = load_split_manifest(spec.manifest)
    out_root = Path(spec.out_dir)
    runs: dict[str, RunArtifacts] = {}

    if protocol == "only-global":
        global_name = "global"
        if global_name not in store.view_names:
            raise DataError("store has no 'global' view; cannot run only-global")
        variant = replace(spec, command="ablate-views",
                          views=(global_name,),
                          out_dir=str(out_root / "only_global"))
        runs["only-global"] = run_training(variant, store=store, ds=ds)
        return runs

    if store.n_views < 2:
        raise ParameterError("leave-one-out ablation needs at least two views")
    full = replace(spec, command="ablate-views", views=None,
                   out_dir=str(out_root / "full"))
    runs["full"] = run_training(full, store=store, ds=ds)
    for name in store.view_names:
        keep = tuple(v for v in store.view_names if v != name)
        variant = replace(spec, command="ablate-views", views=keep,
                          out_dir=str(out_root / f"minus_{name}"))
        runs[f"minus_{name}"] = run_training(variant, store=store, ds=ds)
    _write_comparison(runs, out_root / "comparison.json")
    return runs


def ablate_fusion(spec: RunSpec) -> dict[str, RunArtifacts]:
    """One full run per fusion method with shared data and seed."""
    store = read_store(spec.store)
    ds = load_split_manifest(spec.manifest)
    out_root = Path(spec.out_dir)
    runs: dict[str, RunArtifacts] = {}
    for method in fusion.FUSION_METHODS:
        variant = replace(spec, command="ablate-fusion", fusion=method,
                          out_dir=str(out_root / method))
        runs[method] = run_training(variant, store=store, ds=ds)
    _write_comparison(runs, out_root / "comparison.json")
    return runs


def sweep(spec: RunSpec, param: str, grid: tuple[float, ...]) -> dict[str, RunArtifacts]:
    """Parameter sweep over tau or the latent dimension."""
    if param not in ("tau", "dim"):
        raise ParameterError(f"sweep parameter must be tau or dim, got {param!r}")
    if not grid:
        raise ParameterError("sweep grid is empty")
    store = read_store(spec.store)
    ds = load_split_manifest(spec.manifest)
    out_root = Path(spec.out_dir)
    runs: dict[str, RunArtifacts] = {}
    for value in grid:
        if value <= 0:
            raise ParameterError(f"sweep values must be positive, got {value}")
        if param == "tau":
            variant = replace(spec, command="sweep", tau=float(value),
                              out_dir=str(out_root / f"tau_{value:g}"))
            label = f"tau={value:g}"
        else:
            d = int(value)
            if d != value:
                raise ParameterError(f"dim grid values must be integers, got {value}")
            variant = replace(spec, command="sweep", rec=replace(spec.rec, d=d),
                              out_dir=str(out_root / f"dim_{d}"))
            label = f"d={d}"
        runs[label] = run_training(variant, store=store, ds=ds)
    _write_comparison(runs, out_root / "comparison.json")
    return runs


def _write_comparison(runs: dict[str, RunArtifacts], path: Path) -> None:
    table = {label: art.summary for label, art in runs.items()}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------- view importance


@dataclass(frozen=True)
class ImportanceTable:
    """Occurrence counts of each importance rank per view.

    Rank 0 goes to the view with the highest similarity score for an item;
    counts[view, rank] says how many items put that view at that rank.
    importance_sum is the occurrence-weighted rank total per view (lower
    means more important).
    """

    view_names: tuple[str, ...]
    counts: np.ndarray  # (C, C) int64
    n_items: int

    @property
    def importance_sum(self) -> np.ndarray:
        ranks = np.arange(self.counts.shape[1])
        return (self.counts * ranks[None, :]).sum(axis=1)

    def validate(self) -> None:
        c = len(self.view_names)
        if self.counts.shape != (c, c):
            raise ParameterError("counts must be C x C")
        if not np.all(self.counts.sum(axis=1) == self.n_items):
            raise ParameterError("each view must receive exactly one rank per item")
        if not np.all(self.counts.sum(axis=0) == self.n_items):
            raise ParameterError("each rank must be assigned exactly once per item")


def view_importance(profiles: list[alignment.SimilarityProfile],
                    view_names: tuple[str, ...]) -> ImportanceTable:
    """Rank views per item by descending score; ties go to the lower index."""
    c = len(view_names)
    counts = np.zeros((c, c), dtype=np.int64)
    for p in profiles:
        if p.scores.shape[0] != c:
            raise ParameterError("profile view count does not match view names")
        order = np.argsort(-p.scores, kind="stable")
        for rank, view in enumerate(order):
            counts[int(view), rank] += 1
    table = ImportanceTable(view_names=view_names, counts=counts, n_items=len(profiles))
    table.validate()
    return table


def write_importance(table: ImportanceTable, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "importance.csv"
    c = len(table.view_names)
    header = "view," + ",".join(f"rank{r}" for r in range(c)) + ",importance_sum"
    lines = [header]
    sums = table.importance_sum
    for j, name in enumerate(table.view_names):
        row = ",".join(str(int(x)) for x in table.counts[j])
        lines.append(f"{name},{row},{int(sums[j])}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    plot_path = out_dir / "importance_heatmap.json"
    plot_path.write_text(json.dumps({
        "view_names": list(table.view_names),
        "counts": table.counts.tolist(),
        "importance_sum": [int(x) for x in sums],
        "n_items": table.n_items,
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, plot_path


# ------------------------------------------------------- synthetic benchmark


def synth_benchmark(out_dir, seed: int = 0, n_users: int = 500, n_items: int = 200,
                    n_groups: int = 2, rec: RecConfig | None = None) -> dict:
    """Seeded end-to-end benchmark with built-in baselines as oracles.

    Runs the SA pipeline, the SUM pipeline, the SA pipeline with the planted
    informative view masked out, and the popularity baseline, all on one
    generated dataset; emits benchmark.json with the comparison booleans.
    """
    from .synth import SynthSpec, generate_benchmark

    out_dir = Path(out_dir)
    spec = SynthSpec(n_users=n_users, n_items=n_items, n_groups=n_groups, seed=seed)
    ds, paths = generate_benchmark(out_dir / "data", spec)
    # desk-scale defaults tuned for a clear planted-signal margin
    rec = rec or RecConfig(d=32, layers_ui=2, layers_ii=1, k=25, lr=5e-3,
                           weight_decay=1e-2, epochs_max=200, batch_size=256, seed=seed)

    base = RunSpec(
        command="synth-benchmark",
        manifest=str(paths["manifest"]),
        store=str(paths["store"]),
        out_dir=str(out_dir / "run_sa"),
        fusion="sa",
        rec=rec,
    )
    informative = f"view{spec.informative_view}"
    keep = tuple(f"view{j}" for j in range(spec.n_views) if j != spec.informative_view)

    runs = {
        "sa": run_training(base, ds=ds),
        "sum": run_training(replace(base, fusion="sum", out_dir=str(out_dir / "run_sum")), ds=ds),
        "sa_ablated": run_training(
            replace(base, views=keep, out_dir=str(out_dir / "run_sa_ablated")), ds=ds),
    }
    pop = popularity_report(paths["manifest"], split="test")

    recall20 = {label: art.test_report.recall[20] for label, art in runs.items()}
    recall20["popularity"] = pop.recall[20]
    checks = {
        "sa_at_least_2x_popularity": recall20["sa"] >= 2.0 * recall20["popularity"],
        "ablating_informative_view_hurts": recall20["sa_ablated"] < recall20["sa"],
        "sa_at_least_sum": recall20["sa"] >= recall20["sum"],
    }
    result = {
        "seed": seed,
        "spec": {"n_users": spec.n_users, "n_items": spec.n_items,
                 "n_groups": spec.n_groups, "informative_view": informative},
        "rec": rec.echo(),
        "recall20": recall20,
        "checks": checks,
    }
    (out_dir / "benchmark.json").write_text(
        json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result
