"""Command-line surface for the experiment pipeline.

Exit codes: 0 success, 2 usage error, 3 data/validation error, 4 numeric
failure. Every command writes a config echo into its output directory, and
with --deterministic (the default) reruns reproduce artifacts byte for byte.
"""

from __future__ import annotations

import contextlib
import functools
import json
import sys
from pathlib import Path

import click

from . import alignment, prompts
from .backbone import RecConfig
from .data import (
    compute_stats,
    density_percent,
    load_interactions,
    load_metadata,
    load_split_manifest,
    metadata_by_item,
    write_split_manifest,
)
from .errors import DataError, NumericError, ParameterError
from .pipeline import (
    RunSpec,
    ablate_fusion,
    ablate_views,
    evaluate_checkpoint,
    run_training,
    sweep,
    synth_benchmark,
    view_importance,
    write_config_echo,
    write_importance,
)
from .store import read_store


class DataFailure(click.ClickException):
    exit_code = 3


class NumericFailure(click.ClickException):
    exit_code = 4


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ParameterError as exc:
            raise click.UsageError(str(exc)) from exc
        except DataError as exc:
            raise DataFailure(str(exc)) from exc
        except NumericError as exc:
            raise NumericFailure(str(exc)) from exc

    return wrapper


@contextlib.contextmanager
def thread_limits(deterministic: bool):
    if not deterministic:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=1):
        yield


@click.group()
def main():
    """Multi-view modality-aligned recommendation toolkit."""


@main.command()
@click.option("--interactions", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k-core", default=5, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@guarded
def prepare(interactions, k_core, seed, out_dir):
    """Load interactions, k-core filter, split 8:1:1, and emit the manifest."""
    ds = load_interactions(interactions, k_core=k_core, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_split_manifest(ds, out / "splits.jsonl")
    stats = compute_stats(ds)
    echo = {"command": "prepare", "interactions": str(interactions),
            "k_core": k_core, "seed": seed, "out_dir": str(out)}
    write_config_echo(echo, out)
    (out / "stats.json").write_text(json.dumps({
        "n_users": stats.n_users,
        "n_items": stats.n_items,
        "n_interactions": stats.n_interactions,
        "density_percent": density_percent(stats.n_interactions, stats.n_users, stats.n_items),
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(f"users={stats.n_users} items={stats.n_items} "
               f"interactions={stats.n_interactions}")
    click.echo(f"manifest written to {out / 'splits.jsonl'}")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@guarded
def stats(manifest):
    """Print dataset statistics from a split manifest."""
    ds = load_split_manifest(manifest)
    s = compute_stats(ds)
    click.echo(f"users         {s.n_users}")
    click.echo(f"items         {s.n_items}")
    click.echo(f"interactions  {s.n_interactions}")
    click.echo(f"density       {density_percent(s.n_interactions, s.n_users, s.n_items)}")


@main.command("build-prompts")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--metadata", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--templates", type=click.Path(exists=True, dir_okay=False),
              help="Template file overriding the built-in set.")
@click.option("--global-view/--no-global-view", "include_global", default=True,
              show_default=True)
@click.option("--max-chars", default=prompts.DEFAULT_SOFT_CAP, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@guarded
def build_prompts(manifest, metadata, templates, include_global, max_chars, out_dir):
    """Fill prompt templates per item and emit the prompt dump for encoding."""
    ds = load_split_manifest(manifest)
    records = load_metadata(metadata)
    templates_list = prompts.load_templates(templates) if templates else None
    aligned, missing, extra = metadata_by_item(ds, records)
    views = prompts.build_all_views(aligned, templates_list,
                                    include_global=include_global, max_chars=max_chars)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prompts.write_prompt_dump(views, ds.item_ids, out / "prompts.jsonl")
    echo = {"command": "build-prompts", "manifest": str(manifest),
            "metadata": str(metadata), "templates": str(templates) if templates else None,
            "include_global": include_global, "max_chars": max_chars,
            "out_dir": str(out)}
    write_config_echo(echo, out)
    report = {"missing_metadata": missing, "unmatched_metadata": extra}
    (out / "metadata_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if missing:
        click.echo(f"warning: {len(missing)} items have no metadata "
                   f"(see metadata_report.json)", err=True)
    click.echo(f"{len(views)} items x {views[0].n_views} views -> {out / 'prompts.jsonl'}")


@main.command("ingest-embeddings")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--store", "store_path", required=True, type=click.Path(exists=True, dir_okay=False))
@guarded
def ingest_embeddings(manifest, store_path):
    """Validate an embedding store against the dataset indexing."""
    from .pipeline import check_alignment

    ds = load_split_manifest(manifest)
    store = read_store(store_path)
    check_alignment(ds, store)
    import numpy as np

    norms = np.linalg.norm(store.text.astype(np.float64), axis=2)
    click.echo(f"OK items={store.n_items} views={store.n_views} dim={store.dim}")
    click.echo(f"encoder {store.encoder_name}")
    for j, name in enumerate(store.view_names):
        click.echo(f"view {j} ({name}): norm mean={norms[:, j].mean():.4f} "
                   f"min={norms[:, j].min():.4f} max={norms[:, j].max():.4f}")


def train_options(fn):
    options = [
        click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False)),
        click.option("--store", "store_path", required=True,
                     type=click.Path(exists=True, dir_okay=False)),
        click.option("--fusion", default="sa", show_default=True,
                     type=click.Choice(["sum", "concat", "mlp", "sa"])),
        click.option("--tau", default=alignment.DEFAULT_TAU, show_default=True, type=float),
        click.option("--views", default=None,
                     help="Comma list of view names or indices to keep."),
        click.option("--dim", default=512, show_default=True, type=int,
                     help="Latent embedding dimension d."),
        click.option("--k", default=10, show_default=True, type=int),
        click.option("--layers-ui", default=2, show_default=True, type=int),
        click.option("--layers-ii", default=1, show_default=True, type=int),
        click.option("--lr", default=1e-3, show_default=True, type=float),
        click.option("--weight-decay", default=1e-4, show_default=True, type=float),
        click.option("--epochs", default=200, show_default=True, type=int),
        click.option("--batch-size", default=2048, show_default=True, type=int),
        click.option("--patience", default=10, show_default=True, type=int),
        click.option("--seed", default=0, show_default=True, type=int),
        click.option("--deterministic/--no-deterministic", default=True, show_default=True),
        click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False)),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def build_spec(command, manifest, store_path, fusion, tau, views, dim, k, layers_ui,
               layers_ii, lr, weight_decay, epochs, batch_size, patience, seed,
               deterministic, out_dir) -> RunSpec:
    rec = RecConfig(d=dim, layers_ui=layers_ui, layers_ii=layers_ii, k=k, lr=lr,
                    weight_decay=weight_decay, epochs_max=epochs, batch_size=batch_size,
                    seed=seed, patience=patience)
    rec.validate()
    view_tuple = tuple(v.strip() for v in views.split(",") if v.strip()) if views else None
    if views is not None and not view_tuple:
        raise ParameterError("--views was given but names no views")
    return RunSpec(command=command, manifest=manifest, store=store_path,
                   out_dir=out_dir, fusion=fusion, tau=tau, views=view_tuple,
                   rec=rec, deterministic=deterministic)


def _echo_report(label: str, report) -> None:
    if report is None:
        return
    for k in sorted(report.recall):
        click.echo(f"{label} recall@{k}={report.recall[k]:.4f} "
                   f"ndcg@{k}={report.ndcg[k]:.4f}")


@main.command()
@train_options
@guarded
def train(**kw):
    """Run the full pipeline: profiles, fusion, training, evaluation."""
    spec = build_spec("train", **kw)
    with thread_limits(spec.deterministic):
        art = run_training(spec)
    click.echo(f"best epoch {art.summary['best_epoch']} "
               f"({art.summary['epochs_run']} run)")
    _echo_report("val", art.val_report)
    _echo_report("test", art.test_report)
    click.echo(f"checkpoint: {art.checkpoint}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--store", "store_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["val", "test"]))
@click.option("--deterministic/--no-deterministic", default=True, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@guarded
def evaluate(checkpoint, manifest, store_path, split, deterministic, out_dir):
    """Score a checkpoint on the validation or test split."""
    with thread_limits(deterministic):
        report = evaluate_checkpoint(checkpoint, manifest, store_path, split, out_dir)
    _echo_report(split, report)


@main.command("ablate-views")
@train_options
@click.option("--protocol", default="leave-one-out", show_default=True,
              type=click.Choice(["leave-one-out", "only-global"]))
@guarded
def ablate_views_cmd(protocol, **kw):
    """Re-run the pipeline with views removed; emit a comparative table."""
    spec = build_spec("ablate-views", **kw)
    with thread_limits(spec.deterministic):
        runs = ablate_views(spec, protocol)
    for label, art in runs.items():
        report = art.test_report or art.val_report
        if report is not None:
            k = 20 if 20 in report.recall else max(report.recall)
            click.echo(f"{label}: recall@{k}={report.recall[k]:.4f}")


@main.command("ablate-fusion")
@train_options
@guarded
def ablate_fusion_cmd(**kw):
    """Train each fusion method on shared data and seed."""
    spec = build_spec("ablate-fusion", **kw)
    with thread_limits(spec.deterministic):
        runs = ablate_fusion(spec)
    for label, art in runs.items():
        report = art.test_report or art.val_report
        if report is not None:
            k = 20 if 20 in report.recall else max(report.recall)
            click.echo(f"{label}: recall@{k}={report.recall[k]:.4f}")


@main.command("sweep")
@train_options
@click.option("--param", required=True, type=click.Choice(["tau", "dim"]))
@click.option("--grid", default=None,
              help="Comma list of values; defaults to the built-in grid.")
@guarded
def sweep_cmd(param, grid, **kw):
    """Sweep tau or the latent dimension over a grid."""
    spec = build_spec("sweep", **kw)
    if grid:
        try:
            values = tuple(float(v) for v in grid.split(",") if v.strip())
        except ValueError:
            raise ParameterError(f"bad grid {grid!r}") from None
    else:
        values = alignment.TAU_GRID if param == "tau" else (128.0, 256.0, 512.0, 1024.0)
    with thread_limits(spec.deterministic):
        runs = sweep(spec, param, values)
    for label, art in runs.items():
        report = art.test_report or art.val_report
        if report is not None:
            k = 20 if 20 in report.recall else max(report.recall)
            click.echo(f"{label}: recall@{k}={report.recall[k]:.4f}")


@main.command("view-importance")
@click.option("--store", "store_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tau", default=alignment.DEFAULT_TAU, show_default=True, type=float)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@guarded
def view_importance_cmd(store_path, tau, out_dir):
    """Rank views per item by similarity score and emit the occurrence table."""
    store = read_store(store_path)
    profiles = alignment.profile_all(store, tau)
    table = view_importance(profiles, store.view_names)
    out = Path(out_dir)
    echo = {"command": "view-importance", "store": str(store_path), "tau": tau,
            "out_dir": str(out)}
    write_config_echo(echo, out)
    csv_path, plot_path = write_importance(table, out)
    sums = table.importance_sum
    for j, name in enumerate(table.view_names):
        click.echo(f"{name}: importance_sum={int(sums[j])}")
    click.echo(f"wrote {csv_path} and {plot_path}")


@main.command("synth-benchmark")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--users", default=500, show_default=True, type=int)
@click.option("--items", default=200, show_default=True, type=int)
@click.option("--groups", default=2, show_default=True, type=int)
@click.option("--deterministic/--no-deterministic", default=True, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@guarded
def synth_benchmark_cmd(seed, users, items, groups, deterministic, out_dir):
    """Seeded end-to-end benchmark against the built-in baselines."""
    with thread_limits(deterministic):
        result = synth_benchmark(out_dir, seed=seed, n_users=users, n_items=items,
                                 n_groups=groups)
    for label, value in sorted(result["recall20"].items()):
        click.echo(f"recall@20 {label}: {value:.4f}")
    for label, ok in sorted(result["checks"].items()):
        click.echo(f"check {label}: {'pass' if ok else 'FAIL'}")
    if not all(result["checks"].values()):
        sys.exit(1)


if __name__ == "__main__":
    main()
