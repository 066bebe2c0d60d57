"""Self-retrieval experiment: invert a synthetic corpus and query each
pseudo-word token as "a photo of S*" against the corpus index.

Usage: python scripts/self_retrieval_experiment.py --num-images 200
"""

import json
import time

import click
import numpy as np
import torch

from zscir.backbone import load_backbone, pseudo_word_label
from zscir.concepts import ConceptVocabulary, synthetic_phrase_bank
from zscir.evaluation import QueryResult, recall_at_k
from zscir.oti import OtiConfig, invert_image
from zscir.retrieval import build_index, search


@click.command()
@click.option("--num-images", default=200, show_default=True)
@click.option("--iterations", default=500, show_default=True)
@click.option("--k-concepts", default=3, show_default=True)
@click.option("--backbone", "model_ref", default="stub:base:64",
              show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), help="Optional JSON report path.")
def main(num_images, iterations, k_concepts, model_ref, seed, out):
    bb = load_backbone(model_ref)
    concepts = [f"subject {i}" for i in range(10)]
    vocab = ConceptVocabulary.from_backbone(concepts, bb)
    bank = synthetic_phrase_bank(concepts)
    rng = np.random.default_rng(seed)
    images = {f"img{i:03d}": rng.random((8, 8, 3), dtype=np.float32)
              for i in range(num_images)}
    embeddings = {k: bb.encode_image(v).numpy() for k, v in images.items()}
    index = build_index(embeddings)

    label = pseudo_word_label(0)
    results = []
    start = time.time()
    for i, (k, feats) in enumerate(sorted(embeddings.items())):
        cfg = OtiConfig(iterations=iterations, k_concepts=k_concepts,
                        seed=seed + i)
        token = invert_image(None, bb, vocab, bank, cfg,
                             image_features=torch.from_numpy(feats)).token
        vec = bb.encode_text(f"a photo of {label}", {label: token})
        ranked = [rid for rid, _ in search(vec.detach(), index, 5)]
        results.append(QueryResult(k, ranked, {k}))
    report = {
        "num_images": num_images,
        "iterations": iterations,
        "recall_at_1": recall_at_k(results, 1),
        "recall_at_5": recall_at_k(results, 5),
        "seconds": round(time.time() - start, 1),
    }
    click.echo(json.dumps(report, indent=2))
    if out:
        with open(out, "w") as f:
            json.dump(report, f, indent=2)


if __name__ == "__main__":
    main()
