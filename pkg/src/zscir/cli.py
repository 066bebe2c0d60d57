"""Unified command-line entry point.

Hyperparameters live in a TOML config; flags carry only paths and modes.
Every run echoes its fully resolved configuration to stderr as JSON.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import store
from .backbone import load_backbone
from .concepts import (ConceptVocabulary, GENERATION_MANIFEST, assign_concepts,
                       ingest_phrase_bank, load_vocabulary_names,
                       synthetic_phrase_bank, write_phrase_bank)
from .datasets import dataset_stats, load_dataset, save_dataset
from .errors import InputError, ParseError
from .evaluation import (QueryResult, SemanticAspect, map_at_k, map_by_aspect,
                         modality_redundancy, recall_at_k)
from .inversion_net import (PhiTrainConfig, TokenDataset, load_phi, phi_forward,
                            save_phi, train_phi)
from .oti import OtiConfig, invert_images
from .retrieval import RetrievalIndex, build_index, search


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _echo_config(config: dict) -> None:
    print(json.dumps({"resolved_config": config}, default=str), file=sys.stderr)


def _backbone_from(config: dict):
    model_ref = config.get("backbone", {}).get("model_ref", "stub:base:64")
    return load_backbone(model_ref), model_ref


def _oti_config(config: dict) -> OtiConfig:
    return OtiConfig(**config.get("oti", {}))


def _phi_config(config: dict) -> PhiTrainConfig:
    return PhiTrainConfig(**config.get("phi", {}))


def _read_manifest(path: str) -> dict[str, Path]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    root = Path(payload.get("root", ".")) if isinstance(payload, dict) else Path(".")
    images = payload["images"] if isinstance(payload, dict) else payload
    out = {}
    for rec in images:
        out[rec["id"]] = root / rec["path"]
    return out


@click.group()
@click.option("--log-level", default="INFO", show_default=True)
@click.pass_context
def main(ctx, log_level):
    logging.basicConfig(level=getattr(logging, log_level.upper(), logging.INFO))
    ctx.ensure_object(dict)


@main.command("embed-images")
@click.option("--images", "manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
def embed_images(manifest, out, config_path):
    """Encode an image manifest into an embedding store."""
    config = _load_config(config_path)
    backbone, model_ref = _backbone_from(config)
    _echo_config({"backbone": model_ref, "images": manifest, "out": out})
    images = _read_manifest(manifest)
    embeddings = {rid: backbone.encode_image(path).numpy()
                  for rid, path in sorted(images.items())}
    store.write_embeddings(out, embeddings, backbone.embed_dim)
    click.echo(json.dumps({"embedded": len(embeddings), "dim": backbone.embed_dim}))


@main.command("invert-oti")
@click.option("--images", "manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--phrase-bank", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
def invert_oti(manifest, out, vocab, phrase_bank, config_path):
    """Optimization-based inversion over a manifest; writes a token store."""
    config = _load_config(config_path)
    backbone, model_ref = _backbone_from(config)
    cfg = _oti_config(config)
    _echo_config({"backbone": model_ref, "oti": asdict(cfg), "out": out})
    vocabulary = ConceptVocabulary.from_backbone(
        load_vocabulary_names(vocab), backbone)
    bank = ingest_phrase_bank(phrase_bank)
    images = _read_manifest(manifest)
    results = invert_images(images, backbone, vocabulary, bank, cfg)
    store.write_token_store(
        out, {rid: r.token.numpy() for rid, r in results.items()},
        backbone.token_dim)
    click.echo(json.dumps({"inverted": len(results)}))


@main.command("phrase-gen")
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--count", default=256, show_default=True)
@click.option("--synthetic", is_flag=True,
              help="Use the deterministic offline generator instead of an LM.")
@click.option("--command", "lm_command",
              help="Shell command template; '{prompt}' is substituted.")
@click.option("--seed", default=0, show_default=True)
def phrase_gen(vocab, out, count, synthetic, lm_command, seed):
    """Populate the phrase bank for every vocabulary concept."""
    names = load_vocabulary_names(vocab)
    manifest = dict(GENERATION_MANIFEST, phrases_per_concept=count)
    _echo_config({"generation_manifest": manifest, "synthetic": synthetic})
    if synthetic:
        bank = synthetic_phrase_bank(names, phrases_per_concept=count, seed=seed)
    elif lm_command:
        import subprocess
        from .concepts import CONCEPT_PROMPT, PhraseBank
        bank = PhraseBank(phrases_per_concept=count)
        for concept in names:
            prompt = CONCEPT_PROMPT.format(concept=concept)
            proc = subprocess.run(lm_command.format(prompt=prompt), shell=True,
                                  capture_output=True, text=True, check=True)
            phrases = [l for l in proc.stdout.splitlines() if l.strip()][:count]
            bank.add(concept, phrases)
    else:
        raise click.UsageError("need --synthetic or --command")
    write_phrase_bank(bank, out)
    click.echo(json.dumps({"concepts": len(bank.phrases), "manifest": manifest}))


@main.command("concept-assign")
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--k", default=15, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
def concept_assign(image, vocab, k, config_path):
    """Zero-shot concept assignment for a single image."""
    config = _load_config(config_path)
    backbone, model_ref = _backbone_from(config)
    _echo_config({"backbone": model_ref, "k": k})
    vocabulary = ConceptVocabulary.from_backbone(
        load_vocabulary_names(vocab), backbone)
    x = backbone.encode_image(image).numpy()
    click.echo(json.dumps({"concepts": assign_concepts(x, vocabulary, k)}))


@main.command("train-phi")
@click.option("--tokens", required=True, type=click.Path(exists=True))
@click.option("--embeddings", required=True, type=click.Path(exists=True))
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--phrase-bank", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
def train_phi_cmd(tokens, embeddings, vocab, phrase_bank, out, config_path):
    """Distill a token store into the feed-forward inversion network."""
    config = _load_config(config_path)
    backbone, model_ref = _backbone_from(config)
    cfg = _phi_config(config)
    _echo_config({"backbone": model_ref, "phi": asdict(cfg), "out": out})
    _, token_records = store.read_token_store(tokens)
    _, emb_records = store.read_embeddings(embeddings)
    ids = sorted(set(token_records) & set(emb_records))
    if not ids:
        raise click.ClickException("no overlapping ids between stores")
    dataset = TokenDataset.build(
        ids, np.stack([emb_records[i] for i in ids]),
        np.stack([token_records[i] for i in ids]),
        cluster_count=cfg.cluster_count, seed=cfg.seed)
    vocabulary = ConceptVocabulary.from_backbone(
        load_vocabulary_names(vocab), backbone)
    bank = ingest_phrase_bank(phrase_bank)
    net = train_phi(dataset, backbone, bank, vocabulary, cfg)
    save_phi(net, out, cfg)
    click.echo(json.dumps({"trained_on": len(ids), "checkpoint": out}))


@main.command("invert")
@click.option("--phi", "phi_path", required=True, type=click.Path(exists=True))
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(),
              help="Token store to write; defaults to JSON on stdout.")
@click.option("--id", "image_id", default=None)
@click.option("--config", "config_path", type=click.Path(exists=True))
def invert(phi_path, image, out, image_id, config_path):
    """Single forward-pass inversion of one image."""
    config = _load_config(config_path)
    backbone, model_ref = _backbone_from(config)
    _echo_config({"backbone": model_ref, "phi": phi_path})
    net, _ = load_phi(phi_path)
    x = backbone.encode_image(image)
    token = phi_forward(x, net).numpy()
    image_id = image_id or Path(image).stem
    if out:
        store.write_token_store(out, {image_id: token}, net.token_dim)
        click.echo(json.dumps({"id": image_id, "out": out}))
    else:
        click.echo(json.dumps({"id": image_id, "token": token.tolist()}))


@main.command("build-index")
@click.option("--embeddings", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def build_index_cmd(embeddings, out):
    """Normalize an embedding store into a persisted retrieval index."""
    _echo_config({"embeddings": embeddings, "out": out})
    _, records = store.read_embeddings(embeddings)
    index = build_index(records)
    index.save(out)
    click.echo(json.dumps({"indexed": len(index), "dim": index.dim}))


@main.command("search")
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--query-json", required=True, type=click.Path(exists=True),
              help='JSON {"vector": [...]} or {"caption": "..."}')
@click.option("--k", default=50, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
def search_cmd(index_path, query_json, k, config_path):
    """Exact top-K cosine search."""
    _echo_config({"index": index_path, "k": k})
    index = RetrievalIndex.load(index_path)
    query = json.loads(Path(query_json).read_text(encoding="utf-8"))
    if "vector" in query:
        vec = np.asarray(query["vector"], dtype=np.float32)
    elif "caption" in query:
        backbone, _ = _backbone_from(_load_config(config_path))
        with torch.no_grad():
            vec = backbone.encode_text(query["caption"]).numpy()
    else:
        raise click.UsageError("query JSON needs 'vector' or 'caption'")
    hits = search(vec, index, min(k, len(index)))
    click.echo(json.dumps({"results": [
        {"id": rid, "score": score} for rid, score in hits]}))


def _load_results_jsonl(path: str) -> list[QueryResult]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(QueryResult(
                    query_id=str(rec["query_id"]),
                    ranked_ids=rec["ranked_ids"],
                    ground_truth=set(rec["gts"]),
                    semantic_aspects={SemanticAspect(a)
                                      for a in rec.get("aspects", [])}))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ParseError(f"bad results record: {exc}", line=lineno) from exc
    return out


@main.command("evaluate")
@click.option("--results", required=True, type=click.Path(exists=True))
@click.option("--metric", type=click.Choice(["map", "recall"]), default="map",
              show_default=True)
@click.option("--k", "k_spec", default="5,10,25,50", show_default=True)
@click.option("--by-aspect", is_flag=True)
def evaluate(results, metric, k_spec, by_aspect):
    """Metrics over a JSONL results file."""
    _echo_config({"results": results, "metric": metric, "k": k_spec})
    rows = _load_results_jsonl(results)
    ks = [int(k) for k in k_spec.split(",")]
    fn = map_at_k if metric == "map" else recall_at_k
    report = {"metric": metric, "num_queries": len(rows),
              "values": {str(k): fn(rows, k) for k in ks}}
    if by_aspect:
        report["by_aspect"] = {
            str(k): {a.value: v for a, v in map_by_aspect(rows, k).items()}
            for k in ks}
    click.echo(json.dumps(report))
    name = "mAP" if metric == "map" else "Recall"
    for k in ks:
        print(f"{name}@{k:<4d} {report['values'][str(k)]:.4f}", file=sys.stderr)


@main.command("redundancy")
@click.option("--dataset", "dataset_path", required=True,
              type=click.Path(exists=True))
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--k", "k_spec", default="1,5,10,50", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
def redundancy(dataset_path, index_path, k_spec, config_path):
    """Text-to-image vs image-to-image recall curves on single-GT queries."""
    config = _load_config(config_path)
    backbone, model_ref = _backbone_from(config)
    _echo_config({"backbone": model_ref, "dataset": dataset_path, "k": k_spec})
    queries = load_dataset(dataset_path, schema="triplet")
    index = RetrievalIndex.load(index_path)
    ks = [int(k) for k in k_spec.split(",")]
    curves = modality_redundancy(queries, index, backbone, ks)
    click.echo(json.dumps(curves))


@main.command("validate-dataset")
@click.option("--dataset", "dataset_path", required=True,
              type=click.Path(exists=True))
@click.option("--schema", type=click.Choice(["triplet", "multi_gt"]),
              default="multi_gt", show_default=True)
@click.option("--stats", is_flag=True)
def validate_dataset(dataset_path, schema, stats):
    """Validate a dataset split; nonzero exit on violation."""
    _echo_config({"dataset": dataset_path, "schema": schema})
    try:
        queries = load_dataset(dataset_path, schema=schema)
    except (ParseError, InputError) as exc:
        click.echo(json.dumps({"valid": False, "error": str(exc)}))
        sys.exit(1)
    payload = {"valid": True, "num_queries": len(queries)}
    if stats:
        payload["stats"] = dataset_stats(queries)
    click.echo(json.dumps(payload))


@main.command("serve-annotation")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--port", default=None, type=int)
def serve_annotation(config_path, port):
    """Run the annotation workbench backend."""
    import uvicorn

    from .annotation import AnnotationStore, Inverter, create_app

    config = _load_config(config_path)
    backbone, model_ref = _backbone_from(config)
    ann = config.get("annotation", {})
    _echo_config({"backbone": model_ref, "annotation": ann})
    index = RetrievalIndex.load(ann["index"])
    token_cache = None
    phi = None
    if ann.get("tokens"):
        _, token_cache = store.read_token_store(ann["tokens"])
    if ann.get("phi"):
        phi, _ = load_phi(ann["phi"])
    inverter = Inverter(token_cache=token_cache, phi=phi) \
        if (token_cache or phi) else None
    store_obj = AnnotationStore(
        index, backbone, inverter,
        dedup_threshold=ann.get("dedup_threshold", 0.92))
    app = create_app(store_obj)
    uvicorn.run(app, host=ann.get("host", "127.0.0.1"),
                port=port or ann.get("port", 8000))


if __name__ == "__main__":
    main()
