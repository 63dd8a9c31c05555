"""Command-line entry points tying the modules into reproducible runs.

Commands: synth, ingest, train, embed, evaluate, zeroshot, explain. Every
command refuses to clobber existing outputs unless --overwrite is given, and
stamps its artifacts with the hash of the resolved parameters that produced
them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import click

from . import __version__
from .config import load_run_config, resolve_run_config
from .data import (
    build_pair_instances,
    gallery_only_players,
    load_attribute_annotations,
    load_manifest,
    merge_splits,
    save_manifest,
)
from .embeddings import load_embedding_cache, save_embedding_cache
from .encoders import (
    encode_normalized,
    load_checkpoint,
    load_pretrained,
    text_provider_for,
)
from .errors import ConfigError, JointSpaceError, PlayerReidError
from .eval import EvalOutcome, evaluate
from .preprocess import Preprocessor, load_image
from .scorecam import ScoreCamConfig, localise_number, save_cam_artifacts, similarity_cam
from .synth import SynthConfig, generate_corpus
from .train import RecordPixelLoader, train as run_training
from .zeroshot import ATTRIBUTES, build_prompts, evaluate_attribute

logger = logging.getLogger(__name__)


def _params_hash(params: dict) -> str:
    canonical = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _refuse_existing(path: Path, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise ConfigError(f"refusing to overwrite existing {path}; pass --overwrite")


def _load_encoder(encoder_name: str | None, checkpoint: str | None, drop_projection: bool):
    if checkpoint:
        enc, _header = load_checkpoint(checkpoint)
        return enc, str(checkpoint)
    return load_pretrained(encoder_name or "tiny", drop_projection=drop_projection), ""


@click.group()
@click.version_option(version=__version__, prog_name="playerreid")
@click.option("-v", "--verbose", is_flag=True, help="Enable info-level logging.")
def main(verbose: bool):
    """Player re-identification toolkit: train, evaluate, probe, explain."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.argument("out_dir", type=click.Path(path_type=Path))
@click.option("--players", default=64, show_default=True, help="Number of identities.")
@click.option("--queries", default=1, show_default=True, help="Train query images per player.")
@click.option("--gallery", default=8, show_default=True, help="Train gallery images per player.")
@click.option("--test-queries", default=1, show_default=True)
@click.option("--test-gallery", default=3, show_default=True)
@click.option("--height", default=48, show_default=True)
@click.option("--width", default=24, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--overwrite", is_flag=True)
def synth(out_dir, players, queries, gallery, test_queries, test_gallery, height, width, seed, overwrite):
    """Generate a synthetic color-coded corpus with manifests and annotations."""
    _refuse_existing(out_dir / "train.csv", overwrite)
    cfg = SynthConfig(
        n_players=players,
        queries_per_player=queries,
        gallery_per_player=gallery,
        test_queries_per_player=test_queries,
        test_gallery_per_player=test_gallery,
        height=height,
        width=width,
        seed=seed,
    )
    artifacts = generate_corpus(out_dir, cfg)
    for name, path in artifacts.items():
        click.echo(f"{name}: {path}")


@main.command()
@click.argument("manifests", nargs=-1, required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--merge-splits", "merge", is_flag=True, help="Merge several manifests into one split.")
@click.option("--out", type=click.Path(path_type=Path), help="Write the (merged) manifest here.")
@click.option("--annotations", type=click.Path(exists=True, path_type=Path))
@click.option("--seed", default=0, show_default=True, help="Seed for the pairing preview.")
@click.option("--overwrite", is_flag=True)
def ingest(manifests, merge, out, annotations, seed, overwrite):
    """Validate manifests and print split statistics."""
    splits = [load_manifest(p) for p in manifests]
    if len(splits) > 1 and not merge:
        raise ConfigError("several manifests given; pass --merge-splits to combine them")
    split = merge_splits(splits) if len(splits) > 1 else splits[0]

    queries = split.query_records
    galleries = split.gallery_records
    orphans = gallery_only_players(split)
    instances = build_pair_instances(split, seed=seed)
    click.echo(f"split {split.name}: {len(split.records)} records, {len(split.players)} players")
    click.echo(f"  query: {len(queries)}  gallery: {len(galleries)}")
    click.echo(f"  formable pair instances: {len(instances)}")
    if orphans:
        click.echo(f"  players without a query image (skipped in training): {len(orphans)}")
    if annotations:
        anns = load_attribute_annotations(annotations, split)
        click.echo(f"  attribute annotations: {len(anns)}")
    if out:
        _refuse_existing(out, overwrite)
        save_manifest(split, out)
        click.echo(f"  wrote manifest: {out}")


@main.command(name="train")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), help="Run config file (JSON/YAML).")
@click.option("--train-manifest", "train_manifests", multiple=True, type=click.Path(path_type=Path))
@click.option("--eval-manifest", type=click.Path(path_type=Path))
@click.option("--encoder", "encoder_name", default=None, help="Registered encoder name.")
@click.option("--epochs", type=int, default=None)
@click.option("--warmup-epochs", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", type=click.Path(path_type=Path), default=None)
@click.option("--overwrite", is_flag=True)
def train_cmd(config_path, train_manifests, eval_manifest, encoder_name, epochs, warmup_epochs, batch_size, seed, output_dir, overwrite):
    """Fine-tune an encoder end to end: ingest, sample, train, evaluate."""
    overrides: dict = {"dataset": {}, "encoder": {}, "sampler": {}, "train": {}}
    if train_manifests:
        overrides["dataset"]["train_manifests"] = [str(p) for p in train_manifests]
    if eval_manifest:
        overrides["dataset"]["eval_manifest"] = str(eval_manifest)
    if encoder_name:
        overrides["encoder"]["name"] = encoder_name
    if epochs is not None:
        overrides["train"]["epochs"] = epochs
    if warmup_epochs is not None:
        overrides["train"]["warmup_epochs"] = warmup_epochs
    if batch_size is not None:
        overrides["sampler"]["batch_size"] = batch_size
    if seed is not None:
        overrides["seed"] = seed
    if output_dir is not None:
        overrides["output_dir"] = str(output_dir)
    overrides = {k: v for k, v in overrides.items() if v or not isinstance(v, dict)}

    if config_path:
        cfg = load_run_config(config_path, overrides)
    else:
        cfg = resolve_run_config(overrides)

    if not cfg.dataset.train_manifests:
        raise ConfigError("no training manifest configured (dataset.train_manifests)")
    if not cfg.dataset.eval_manifest:
        raise ConfigError("no evaluation manifest configured (dataset.eval_manifest)")

    run_dir = Path(cfg.output_dir)
    if run_dir.exists() and any(run_dir.iterdir()) and not overwrite:
        raise ConfigError(f"run directory {run_dir} is not empty; pass --overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save_resolved(run_dir)

    splits = [load_manifest(p) for p in cfg.dataset.train_manifests]
    split = merge_splits(splits, name="train") if len(splits) > 1 else splits[0]
    eval_split = load_manifest(cfg.dataset.eval_manifest)

    encoder = _build_train_encoder(cfg)
    loss_cfg = cfg.loss_config(encoder.pretrained_logit_scale)
    started = datetime.now(timezone.utc)
    best, history = run_training(
        cfg.train_config(),
        split,
        eval_split,
        encoder,
        loss_cfg=loss_cfg,
        run_dir=run_dir,
        config_hash=cfg.config_hash(),
    )
    # wall-clock provenance lives here so history.jsonl stays timestamp-free
    # and bitwise comparable across same-seed runs
    (run_dir / "run.json").write_text(
        json.dumps(
            {
                "started_at": started.isoformat(),
                "finished_at": datetime.now(timezone.utc).isoformat(),
                "package_version": __version__,
                "config_hash": cfg.config_hash(),
            },
            indent=2,
        ),
        encoding="utf-8",
    )
    best_event = history.evals[history.best_index]
    click.echo(f"run dir: {run_dir}")
    click.echo(f"best checkpoint: {best} (epoch {best_event.epoch})")
    click.echo(f"best mAP (no rerank): {best_event.map_no_rerank:.4f}")
    if best_event.map_rerank is not None:
        click.echo(f"best mAP (reranked): {best_event.map_rerank:.4f}")


def _build_train_encoder(cfg):
    from .encoders import build_encoder

    section = cfg.encoder
    if section.checkpoint:
        encoder, _ = load_checkpoint(section.checkpoint)
        return encoder
    if section.name == "tiny":
        return build_encoder("tiny", seed=section.seed)
    return load_pretrained(section.name, drop_projection=section.drop_projection)


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path))
@click.option("--encoder", "encoder_name", default=None)
@click.option("--manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--role", type=click.Choice(["query", "gallery", "all"]), default="all", show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--drop-projection/--keep-projection", default=True, show_default=True)
@click.option("--overwrite", is_flag=True)
def embed(checkpoint, encoder_name, manifest, role, out, drop_projection, overwrite):
    """Embed a split into a float32 cache file with a JSON sidecar."""
    _refuse_existing(out, overwrite)
    encoder, ckpt_ref = _load_encoder(encoder_name, checkpoint, drop_projection)
    split = load_manifest(manifest)
    records = {
        "query": split.query_records,
        "gallery": split.gallery_records,
        "all": list(split.records),
    }[role]
    if not records:
        raise ConfigError(f"manifest {manifest} has no {role} records")
    loader = RecordPixelLoader(Preprocessor(encoder.preprocess_config(0.0)))
    pixels = loader.batch(records, train=False)
    matrix = encode_normalized(
        encoder,
        pixels,
        ids=[r.record_id for r in records],
        pids=[r.player_id for r in records],
    )
    params = {
        "command": "embed",
        "manifest": str(manifest),
        "role": role,
        "encoder": encoder.name,
        "checkpoint": ckpt_ref,
        "drop_projection": drop_projection,
    }
    save_embedding_cache(
        matrix,
        out,
        encoder_name=encoder.name,
        checkpoint=ckpt_ref,
        config_hash=_params_hash(params),
    )
    click.echo(f"wrote {matrix.n}x{matrix.dim} embeddings to {out}")


@main.command(name="evaluate")
@click.option("--query-cache", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--gallery-cache", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--rerank/--no-rerank", default=True, show_default=True)
@click.option("--k1", default=20, show_default=True)
@click.option("--k2", default=6, show_default=True)
@click.option("--lambda", "lambda_value", default=0.3, show_default=True)
@click.option("--out", type=click.Path(path_type=Path))
@click.option("--overwrite", is_flag=True)
def evaluate_cmd(query_cache, gallery_cache, rerank, k1, k2, lambda_value, out, overwrite):
    """Compute mAP and CMC from embedding caches, optionally re-ranked."""
    query, q_sidecar = load_embedding_cache(query_cache)
    gallery, g_sidecar = load_embedding_cache(gallery_cache)
    if query.dim != gallery.dim:
        raise ConfigError(
            f"cache dimensions differ: query {query.dim} vs gallery {gallery.dim}"
        )
    outcome: EvalOutcome = evaluate(
        query, gallery, rerank=rerank, k1=k1, k2=k2, lambda_value=lambda_value
    )
    outcome.encoder_name = q_sidecar.get("encoder_name", "")
    outcome.checkpoint = q_sidecar.get("checkpoint", "")
    outcome.config_hash = _params_hash(
        {
            "command": "evaluate",
            "query_cache": q_sidecar.get("payload_sha256"),
            "gallery_cache": g_sidecar.get("payload_sha256"),
            "rerank": rerank,
            "k1": k1,
            "k2": k2,
            "lambda": lambda_value,
        }
    )
    click.echo(f"mAP (no rerank):  {outcome.raw.mean_ap:.4f}")
    for k, v in sorted(outcome.raw.cmc.items()):
        click.echo(f"rank-{k} (no rerank): {v:.4f}")
    if outcome.reranked:
        click.echo(f"mAP (reranked):   {outcome.reranked.mean_ap:.4f}")
        for k, v in sorted(outcome.reranked.cmc.items()):
            click.echo(f"rank-{k} (reranked): {v:.4f}")
    if out:
        _refuse_existing(out, overwrite)
        outcome.save(out)
        click.echo(f"report: {out}")


@main.command()
@click.option("--encoder", "encoder_name", default="tiny", show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path))
@click.option("--manifest", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--annotations", required=True, type=click.Path(exists=True, path_type=Path))
@click.option(
    "--attributes",
    default=",".join(ATTRIBUTES),
    show_default=True,
    help="Comma-separated attribute list.",
)
@click.option("--template-variant", type=click.Choice(["table", "prose"]), default="table", show_default=True)
@click.option("--out-dir", required=True, type=click.Path(path_type=Path))
@click.option("--overwrite", is_flag=True)
def zeroshot(encoder_name, checkpoint, manifest, annotations, attributes, template_variant, out_dir, overwrite):
    """Zero-shot attribute classification of annotated images via text prompts."""
    attr_list = [a.strip() for a in attributes.split(",") if a.strip()]
    if not attr_list:
        raise ConfigError("no attributes requested")

    if checkpoint:
        encoder, header = load_checkpoint(checkpoint)
        if header.get("training_step", 0) > 0:
            raise JointSpaceError(
                f"checkpoint {checkpoint} is fine-tuned (step {header['training_step']}); "
                "its embeddings no longer live in the joint image-text space, so "
                "text-prompt classification is not possible"
            )
    else:
        # prompt matching needs the projection into the joint space
        encoder = load_pretrained(encoder_name, drop_projection=False)
    provider = text_provider_for(encoder)

    split = load_manifest(manifest)
    anns = load_attribute_annotations(annotations, split)
    if not anns:
        raise ConfigError(f"annotation file {annotations} is empty")
    by_id = {r.record_id: r for r in split.records}
    records = [by_id[rid] for rid in anns]

    loader = RecordPixelLoader(Preprocessor(encoder.preprocess_config(0.0)))
    pixels = loader.batch(records, train=False)
    matrix = encode_normalized(encoder, pixels, ids=[r.record_id for r in records])
    embeddings = {rid: matrix.vectors[i] for i, rid in enumerate(matrix.ids)}

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params_hash = _params_hash(
        {
            "command": "zeroshot",
            "encoder": encoder.name,
            "checkpoint": str(checkpoint) if checkpoint else "",
            "manifest": str(manifest),
            "annotations": str(annotations),
            "attributes": attr_list,
            "template_variant": template_variant,
        }
    )
    for attribute in attr_list:
        prompts = build_prompts(attribute, template_variant=template_variant)
        report = evaluate_attribute(embeddings, anns, prompts, provider)
        report_path = out_dir / f"zeroshot_{attribute}.json"
        _refuse_existing(report_path, overwrite)
        payload = report.to_dict()
        payload["config_hash"] = params_hash
        report_path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        report.save_confusion_csv(out_dir / f"confusion_{attribute}.csv")
        tops = ", ".join(f"top{k}: {v:.3f}" for k, v in sorted(report.topk_accuracy.items()))
        click.echo(
            f"{attribute}: {tops}, macroP {report.macro.macro_precision:.3f}, "
            f"macroR {report.macro.macro_recall:.3f}, macroF1 {report.macro.macro_f1:.3f}"
        )
    click.echo(f"reports in {out_dir}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path))
@click.option("--encoder", "encoder_name", default=None)
@click.option("--gallery-image", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--query-image", type=click.Path(exists=True, path_type=Path))
@click.option("--prompt-number", type=int, help="Jersey number to localise instead of a query image.")
@click.option("--layer", "layer_tag", required=True, help="Activation layer tag (see encoder docs).")
@click.option("--chunk", default=8, show_default=True)
@click.option("--out-prefix", required=True, type=click.Path(path_type=Path))
@click.option("--overwrite", is_flag=True)
def explain(checkpoint, encoder_name, gallery_image, query_image, prompt_number, layer_tag, chunk, out_prefix, overwrite):
    """Score-CAM saliency: image-image similarity or prompt localisation."""
    if (query_image is None) == (prompt_number is None):
        raise ConfigError("pass exactly one of --query-image or --prompt-number")
    out_prefix = Path(out_prefix)
    _refuse_existing(out_prefix.with_name(out_prefix.name + ".png"), overwrite)

    keep_projection = prompt_number is not None
    encoder, ckpt_ref = _load_encoder(encoder_name, checkpoint, not keep_projection)
    cam_cfg = ScoreCamConfig(layer_tag=layer_tag, batch_chunk=chunk)
    gallery_pixels = load_image(gallery_image)

    if prompt_number is not None:
        provider = text_provider_for(encoder)  # refuses fine-tuned towers
        cam = localise_number(encoder, provider, gallery_pixels, prompt_number, cam_cfg)
    else:
        cam = similarity_cam(encoder, load_image(query_image), gallery_pixels, cam_cfg)

    params_hash = _params_hash(
        {
            "command": "explain",
            "encoder": encoder.name,
            "checkpoint": ckpt_ref,
            "gallery_image": str(gallery_image),
            "query_image": str(query_image) if query_image else "",
            "prompt_number": prompt_number,
            "layer": layer_tag,
            "chunk": chunk,
        }
    )
    paths = save_cam_artifacts(cam, gallery_pixels, out_prefix, metadata={"config_hash": params_hash})
    for p in paths:
        click.echo(str(p))


def run():
    try:
        main(standalone_mode=False)
    except PlayerReidError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.exceptions.Abort:
        sys.exit(130)


if __name__ == "__main__":
    run()
