"""Distillation experiment: pre-generate optimized pseudo-word tokens for a
synthetic corpus, train the feed-forward inversion network on them, and
report the held-out cosine improvement and the self-retrieval gap.

Usage: python scripts/distillation_experiment.py --num-train 500 --num-held 60
"""

import json
import time

import click
import numpy as np
import torch

from zscir.backbone import load_backbone, pseudo_word_label
from zscir.concepts import ConceptVocabulary, synthetic_phrase_bank
from zscir.evaluation import QueryResult, recall_at_k
from zscir.inversion_net import (PhiNetwork, PhiTrainConfig, TokenDataset,
                                 phi_forward, train_phi)
from zscir.oti import OtiConfig, invert_image
from zscir.retrieval import build_index, search


def self_retrieval_r5(bb, index, ids, token_of):
    label = pseudo_word_label(0)
    results = []
    for k in ids:
        vec = bb.encode_text(f"a photo of {label}", {label: token_of(k)})
        ranked = [rid for rid, _ in search(vec.detach(), index, 5)]
        results.append(QueryResult(k, ranked, {k}))
    return recall_at_k(results, 5)


@click.command()
@click.option("--num-train", default=500, show_default=True)
@click.option("--num-held", default=60, show_default=True)
@click.option("--oti-iterations", default=300, show_default=True)
@click.option("--epochs", default=60, show_default=True)
@click.option("--learning-rate", default=1e-3, show_default=True)
@click.option("--backbone", "model_ref", default="stub:base:64",
              show_default=True)
@click.option("--seed", default=0, show_default=True)
def main(num_train, num_held, oti_iterations, epochs, learning_rate,
         model_ref, seed):
    bb = load_backbone(model_ref)
    concepts = [f"subject {i}" for i in range(10)]
    vocab = ConceptVocabulary.from_backbone(concepts, bb)
    bank = synthetic_phrase_bank(concepts)
    rng = np.random.default_rng(seed)
    n = num_train + num_held
    ids = [f"img{i:03d}" for i in range(n)]
    embeddings = {k: bb.encode_image(
        rng.random((8, 8, 3), dtype=np.float32)).numpy() for k in ids}

    start = time.time()
    tokens = {}
    for i, k in enumerate(ids):
        cfg = OtiConfig(iterations=oti_iterations, k_concepts=3, seed=seed + i)
        tokens[k] = invert_image(
            None, bb, vocab, bank, cfg,
            image_features=torch.from_numpy(embeddings[k])).token
    oti_seconds = time.time() - start

    train_ids, held_ids = ids[:num_train], ids[num_train:]
    ds = TokenDataset.build(train_ids,
                            np.stack([embeddings[k] for k in train_ids]),
                            np.stack([tokens[k].numpy() for k in train_ids]),
                            seed=seed)
    cfg = PhiTrainConfig(epochs=epochs, learning_rate=learning_rate,
                         batch_size=min(50, num_train), k_concepts=3,
                         ema_decay=0.99, dropout=0.2, seed=seed)
    start = time.time()
    net = train_phi(ds, bb, bank, vocab, cfg)
    train_seconds = time.time() - start
    untrained = PhiNetwork(bb.embed_dim, bb.token_dim, dropout=cfg.dropout,
                           seed=cfg.seed)

    def mean_cos(model):
        vals = []
        for k in held_ids:
            pred = phi_forward(torch.from_numpy(embeddings[k]), model)
            ref = tokens[k]
            vals.append(float(pred @ ref / (pred.norm() * ref.norm())))
        return float(np.mean(vals))

    corpus_ids = ids[:200]
    index = build_index({k: embeddings[k] for k in corpus_ids})
    report = {
        "held_out_cos_untrained": mean_cos(untrained),
        "held_out_cos_trained": mean_cos(net),
        "self_retrieval_r5_optimized": self_retrieval_r5(
            bb, index, corpus_ids, lambda k: tokens[k]),
        "self_retrieval_r5_network": self_retrieval_r5(
            bb, index, corpus_ids,
            lambda k: phi_forward(torch.from_numpy(embeddings[k]), net)),
        "oti_seconds": round(oti_seconds, 1),
        "train_seconds": round(train_seconds, 1),
    }
    click.echo(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
