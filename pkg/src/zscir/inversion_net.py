"""Feed-forward textual inversion network and its distillation training.

A small MLP maps image features to pseudo-word tokens. It is trained to
reproduce tokens pre-generated by the optimization-based inversion, using a
symmetric contrastive distillation loss, the same phrase regularization loss
as the optimizer, and a squared-norm penalty on the predictions. Batches mix
a fraction of hard negatives drawn from one K-means cluster of the image
features with uniformly sampled fillers.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import pseudo_word_label
from .concepts import (ConceptVocabulary, PhraseBank, assign_concepts,
                       sample_regularization_phrase, substitute_pseudo_word)
from .errors import DegenerateInputError, InputError, ParseError
from .oti import gpt_loss

logger = logging.getLogger(__name__)


class PhiNetwork(torch.nn.Module):
    """Three affine layers, each followed by GELU and dropout."""

    def __init__(self, embed_dim: int, token_dim: int, hidden1: int | None = None,
                 hidden2: int | None = None, dropout: float = 0.5, seed: int = 0):
        super().__init__()
        hidden1 = hidden1 or 4 * token_dim
        hidden2 = hidden2 or 4 * token_dim
        self.embed_dim = embed_dim
        self.token_dim = token_dim
        self.hidden1 = hidden1
        self.hidden2 = hidden2
        self.dropout_rate = dropout
        torch.manual_seed(seed)
        self.layers = torch.nn.Sequential(
            torch.nn.Linear(embed_dim, hidden1),
            torch.nn.GELU(),
            torch.nn.Dropout(dropout),
            torch.nn.Linear(hidden1, hidden2),
            torch.nn.GELU(),
            torch.nn.Dropout(dropout),
            torch.nn.Linear(hidden2, token_dim),
            torch.nn.GELU(),
            torch.nn.Dropout(dropout),
        )
        # The contrastive objective only constrains token directions, so the
        # output magnitude is a free parameter calibrated after training.
        self.register_buffer("output_scale", torch.ones(()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.embed_dim:
            raise InputError(
                f"input width {x.shape[-1]} does not match embed_dim {self.embed_dim}")
        return self.layers(x) * self.output_scale


def phi_forward(x: torch.Tensor, net: PhiNetwork) -> torch.Tensor:
    """Deterministic single-vector prediction (dropout off)."""
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return net(x)
    finally:
        net.train(was_training)


@dataclass
class PhiTrainConfig:
    epochs: int = 115
    learning_rate: float = 1e-4
    batch_size: int = 256
    lambda_distil: float = 1.0
    lambda_gpt: float = 0.75
    lambda_pen: float = 3e-3  # 1e-2 for the large backbone
    temperature: float = 0.25
    hard_fraction: float = 0.5
    cluster_count: int | None = None  # default: ceil(N / 256)
    weight_decay: float = 0.01
    ema_decay: float = 0.999
    k_concepts: int = 150
    hidden1: int | None = None
    hidden2: int | None = None
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise InputError("temperature must be positive")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise InputError("hard_fraction must be in [0, 1]")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")


@dataclass
class TokenDataset:
    ids: list[str]
    embeddings: np.ndarray  # (N, d) image features
    tokens: np.ndarray      # (N, token_dim) pre-generated pseudo-word tokens
    cluster_ids: np.ndarray  # (N,) in [0, cluster_count)
    cluster_count: int

    def __post_init__(self):
        n = len(self.ids)
        if not (self.embeddings.shape[0] == self.tokens.shape[0]
                == self.cluster_ids.shape[0] == n):
            raise InputError("record count mismatch across dataset fields")
        if n and (self.cluster_ids.min() < 0
                  or self.cluster_ids.max() >= self.cluster_count):
            raise InputError("cluster ids out of range")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, ids: list[str], embeddings: np.ndarray, tokens: np.ndarray,
              cluster_count: int | None = None, seed: int = 0) -> "TokenDataset":
        n = len(ids)
        if cluster_count is None:
            cluster_count = max(1, math.ceil(n / 256))
        cluster_ids = cluster_dataset(embeddings, cluster_count, seed)
        return cls(list(ids), np.asarray(embeddings, dtype=np.float32),
                   np.asarray(tokens, dtype=np.float32), cluster_ids, cluster_count)


# -- losses ------------------------------------------------------------


def _normalized(batch: torch.Tensor, name: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(batch, dim=1, keepdim=True)
    if (norms == 0).any():
        raise DegenerateInputError(f"zero-norm token in {name} batch")
    return batch / norms


def distil_loss(v_bar: torch.Tensor, v: torch.Tensor,
                tau: float) -> torch.Tensor:
    """Symmetric contrastive distillation over a batch of token pairs.

    For each pair, the positive logit is the cross cosine similarity; the
    denominator adds all cross pairs of the anchor plus the anchor's
    within-set similarities to the other batch members.
    """
    if v_bar.shape != v.shape:
        raise InputError("batch shape mismatch")
    b = v_bar.shape[0]
    nb, nv = _normalized(v_bar, "teacher"), _normalized(v, "student")
    cross = nb @ nv.T / tau          # cross[i, j] = c(v_bar_i, v_j) / tau
    within_v = nv @ nv.T / tau
    within_b = nb @ nb.T / tau
    off_diag = ~torch.eye(b, dtype=torch.bool)

    def direction(anchor_cross, within):
        # anchor_cross[i, j]: anchor_i against all B partners of the other set
        logits = torch.cat(
            [anchor_cross, within.masked_fill(~off_diag, -torch.inf)], dim=1)
        return -(torch.diagonal(anchor_cross)
                 - torch.logsumexp(logits, dim=1))

    losses = direction(cross, within_v) + direction(cross.T, within_b)
    return losses.mean()


def distil_loss_bruteforce(v_bar: torch.Tensor, v: torch.Tensor,
                           tau: float) -> float:
    """Literal double-loop oracle over every pairwise term."""
    b = v_bar.shape[0]

    def c(a, x):
        return float(a @ x / (a.norm() * x.norm()))

    total = 0.0
    for i in range(b):
        denom1 = sum(math.exp(c(v_bar[i], v[j]) / tau) for j in range(b))
        denom1 += sum(math.exp(c(v[i], v[j]) / tau) for j in range(b) if j != i)
        denom2 = sum(math.exp(c(v[i], v_bar[j]) / tau) for j in range(b))
        denom2 += sum(math.exp(c(v_bar[i], v_bar[j]) / tau)
                      for j in range(b) if j != i)
        num = math.exp(c(v_bar[i], v[i]) / tau)
        total += -math.log(num / denom1) - math.log(
            math.exp(c(v[i], v_bar[i]) / tau) / denom2)
    return total / b


def pen_loss(v: torch.Tensor) -> torch.Tensor:
    """Mean squared Euclidean norm of the predicted tokens."""
    if v.shape[0] == 0:
        raise InputError("empty batch")
    return (v ** 2).sum(dim=1).mean()


def phi_total_loss(l_distil, l_gpt, l_pen, cfg: PhiTrainConfig):
    return (cfg.lambda_distil * l_distil + cfg.lambda_gpt * l_gpt
            + cfg.lambda_pen * l_pen)


# -- clustering and batch composition ----------------------------------


def cluster_dataset(embeddings: np.ndarray, cluster_count: int,
                    seed: int, max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Lloyd's K-means on image features; empty clusters re-seeded from the
    points farthest from their assigned centroid."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if cluster_count < 1:
        raise InputError("cluster_count must be >= 1")
    if n < cluster_count:
        raise InputError(f"need at least {cluster_count} records, got {n}")
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(n, size=cluster_count, replace=False)].copy()
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        # re-seed empty clusters from the currently worst-fit points
        for c in range(cluster_count):
            if not (new_assign == c).any():
                worst = dists[np.arange(n), new_assign].argmax()
                new_assign[worst] = c
                dists[worst] = np.inf
                dists[worst, c] = 0.0
        shift = 0.0
        for c in range(cluster_count):
            members = x[new_assign == c]
            new_centroid = members.mean(axis=0)
            shift = max(shift, float(np.abs(new_centroid - centroids[c]).max()))
            centroids[c] = new_centroid
        if (new_assign == assign).all() or shift < tol:
            assign = new_assign
            break
        assign = new_assign
    return assign


def compose_batch(dataset: TokenDataset, cfg: PhiTrainConfig,
                  rng: np.random.Generator) -> list[int]:
    """Indices for one batch: ceil(alpha*B) from one cluster, rest uniform."""
    b = cfg.batch_size
    n = len(dataset)
    if b > n:
        raise InputError(f"batch_size {b} exceeds dataset size {n}")
    n_hard = math.ceil(cfg.hard_fraction * b)
    chosen: list[int] = []
    if n_hard > 0:
        sizes = np.bincount(dataset.cluster_ids, minlength=dataset.cluster_count)
        eligible = np.flatnonzero(sizes >= n_hard)
        if len(eligible) == 0:
            logger.warning(
                "no cluster has >= %d members; falling back to a random batch",
                n_hard)
        else:
            cluster = int(eligible[int(rng.integers(len(eligible)))])
            members = np.flatnonzero(dataset.cluster_ids == cluster)
            chosen = list(rng.choice(members, size=n_hard, replace=False))
    remaining = np.setdiff1d(np.arange(n), np.array(chosen, dtype=int))
    fill = rng.choice(remaining, size=b - len(chosen), replace=False)
    return [int(i) for i in chosen] + [int(i) for i in fill]


# -- training ----------------------------------------------------------


def train_phi(dataset: TokenDataset, backbone, bank: PhraseBank,
              vocab: ConceptVocabulary, cfg: PhiTrainConfig,
              loss_log: list[dict] | None = None) -> PhiNetwork:
    """Distillation training loop; returns the EMA-weighted network."""
    rng = np.random.default_rng(cfg.seed)
    net = PhiNetwork(backbone.embed_dim, backbone.token_dim,
                     hidden1=cfg.hidden1, hidden2=cfg.hidden2,
                     dropout=cfg.dropout, seed=cfg.seed)
    net.train()
    optimizer = torch.optim.AdamW(net.parameters(), lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    ema_params = [p.detach().clone() for p in net.parameters()]

    k = min(cfg.k_concepts, len(vocab))
    concepts_per_record = [assign_concepts(dataset.embeddings[i], vocab, k)
                           for i in range(len(dataset))]
    x_all = torch.from_numpy(dataset.embeddings)
    tokens_all = torch.from_numpy(dataset.tokens)
    label = pseudo_word_label(0)
    phrase_cache: dict[str, torch.Tensor] = {}

    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    step = 0
    for _epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            idx = compose_batch(dataset, cfg, rng)
            x = x_all[idx]
            v_bar = tokens_all[idx]
            v = net(x)

            l_distil = distil_loss(v_bar, v, cfg.temperature)
            l_gpt = torch.zeros(())
            for row, i in enumerate(idx):
                phrase, concept = sample_regularization_phrase(
                    concepts_per_record[i], bank, rng)
                if phrase not in phrase_cache:
                    with torch.no_grad():
                        phrase_cache[phrase] = backbone.encode_text(phrase)
                phrase_star = substitute_pseudo_word(phrase, concept, label)
                y_star = backbone.encode_text(phrase_star, {label: v[row]})
                l_gpt = l_gpt + gpt_loss(phrase_cache[phrase], y_star)
            l_gpt = l_gpt / len(idx)
            l_pen = pen_loss(v)
            loss = phi_total_loss(l_distil, l_gpt, l_pen, cfg)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at step {step}: distil={float(l_distil)}, "
                    f"gpt={float(l_gpt)}, pen={float(l_pen)}")

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            with torch.no_grad():
                for ema_p, p in zip(ema_params, net.parameters()):
                    ema_p.mul_(cfg.ema_decay).add_(p, alpha=1 - cfg.ema_decay)
            if loss_log is not None:
                loss_log.append({"step": step, "epoch": _epoch,
                                 "total": loss.item(),
                                 "distil": l_distil.item(),
                                 "gpt": l_gpt.item(), "pen": l_pen.item()})
            step += 1

    result = PhiNetwork(backbone.embed_dim, backbone.token_dim,
                        hidden1=cfg.hidden1, hidden2=cfg.hidden2,
                        dropout=cfg.dropout, seed=cfg.seed)
    with torch.no_grad():
        for target, ema_p in zip(result.parameters(), ema_params):
            target.copy_(ema_p)
    result.eval()
    # The distillation term is invariant to the prediction scale and the norm
    # penalty only shrinks it, so the magnitude the text encoder sees is
    # underdetermined. Pin it by matching the mean predicted norm to the mean
    # norm of the distillation targets.
    with torch.no_grad():
        mean_pred = torch.linalg.vector_norm(result(x_all), dim=1).mean()
        mean_target = torch.linalg.vector_norm(tokens_all, dim=1).mean()
        if mean_pred > 0 and mean_target > 0:
            result.output_scale.fill_(mean_target / mean_pred)
    return result


# -- checkpoint format -------------------------------------------------

_CKPT_MAGIC = b"PHIC"
_CKPT_HEADER = struct.Struct("<4sHIIIII")


def save_phi(net: PhiNetwork, path: str | Path,
             train_config: PhiTrainConfig | None = None) -> None:
    cfg_echo = json.dumps(
        train_config.__dict__ if train_config else {}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(_CKPT_MAGIC, 1, net.embed_dim, net.token_dim,
                                  net.hidden1, net.hidden2, len(cfg_echo)))
        f.write(cfg_echo)
        for _, tensor in sorted(net.state_dict().items()):
            f.write(tensor.detach().numpy().astype("<f4").tobytes())


def load_phi(path: str | Path) -> tuple[PhiNetwork, dict]:
    data = Path(path).read_bytes()
    magic, version, d, token_dim, h1, h2, cfg_len = _CKPT_HEADER.unpack_from(data)
    if magic != _CKPT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic {magic!r}")
    if version != 1:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    off = _CKPT_HEADER.size
    cfg_echo = json.loads(data[off:off + cfg_len].decode("utf-8")) if cfg_len else {}
    off += cfg_len
    net = PhiNetwork(d, token_dim, hidden1=h1, hidden2=h2,
                     dropout=cfg_echo.get("dropout", 0.5))
    state = net.state_dict()
    for name, tensor in sorted(state.items()):
        count = tensor.numel()
        block = np.frombuffer(data, dtype="<f4", count=count, offset=off).copy()
        state[name] = torch.from_numpy(block).reshape(tensor.shape)
        off += 4 * count
    if off != len(data):
        raise ParseError(f"{path}: {len(data) - off} trailing bytes")
    net.load_state_dict(state)
    net.eval()
    return net, cfg_echo
