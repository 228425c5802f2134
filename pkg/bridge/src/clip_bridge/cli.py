"""Bridge CLI: encode a prompt corpus, validate or merge store files."""

from __future__ import annotations

import functools
import json

import click

from .corpus import encode_corpus
from .encoders import EncoderSpec
from .errors import BridgeError
from .store_format import merge_stores, validate_store


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except BridgeError as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


@click.group()
def main():
    """Aligned text/image embedding extraction for the recommendation toolkit."""


@main.command()
@click.option("--prompts", "prompt_dump", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--images", "image_dir", required=True, type=click.Path(file_okay=False))
@click.option("--encoder", "family", default="clip", show_default=True,
              type=click.Choice(["clip", "long-clip", "hash"]))
@click.option("--checkpoint", default=None,
              help="Checkpoint id; defaults to the family's standard checkpoint.")
@click.option("--batch", "batch_size", default=16, show_default=True, type=int)
@click.option("--device", default="cpu", show_default=True)
@click.option("--allow-missing", is_flag=True, default=False,
              help="Substitute a mean-image placeholder for unreadable images.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@guarded
def encode(prompt_dump, image_dir, family, checkpoint, batch_size, device,
           allow_missing, out_path):
    """Encode every prompt and item image into an embedding store."""
    spec = EncoderSpec(family=family, checkpoint=checkpoint, device=device,
                       batch_size=batch_size)
    result = encode_corpus(prompt_dump, image_dir, spec, out_path,
                           allow_missing=allow_missing)
    click.echo(f"wrote {result.out_path}: items={result.n_items} "
               f"views={result.n_views} dim={result.dim}")
    if result.token_overflows:
        click.echo(f"warning: {result.token_overflows} prompts exceeded "
                   f"{spec.max_tokens} tokens and were truncated", err=True)
    if result.placeholder_items:
        click.echo(f"warning: {len(result.placeholder_items)} items use the "
                   f"mean-image placeholder", err=True)


@main.command()
@click.argument("store", type=click.Path(exists=True, dir_okay=False))
@guarded
def validate(store):
    """Re-check a store file's format, checksum, and vector norms."""
    report = validate_store(store)
    click.echo("OK " + json.dumps(report, sort_keys=True))


@main.command()
@click.argument("shards", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@guarded
def merge(shards, out_path):
    """Merge item shards into one store, re-sorting and revalidating."""
    merge_stores(list(shards), out_path)
    report = validate_store(out_path)
    click.echo(f"merged {len(shards)} shards -> {out_path} "
               f"({report['n_items']} items)")


if __name__ == "__main__":
    main()
