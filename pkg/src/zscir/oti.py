"""Optimization-based textual inversion.

One pseudo-word token per image, optimized so that (a) templated text
containing the pseudo-word matches the image features under a cosine loss
with Gaussian noise added to the text side, and (b) pre-generated phrases
with the concept swapped for the pseudo-word stay close to the originals.
AdamW with decoupled weight decay steps the token; an EMA copy is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import pseudo_word_label
from .concepts import (ConceptVocabulary, PhraseBank, assign_concepts,
                       sample_regularization_phrase, substitute_pseudo_word)
from .errors import DegenerateInputError, InputError

# Neutral prompt templates with a single pseudo-word slot, fixed and versioned.
TEMPLATE_SET = [
    "a photo of {}",
    "a cropped photo of {}",
    "a good photo of {}",
    "a close-up photo of {}",
    "a bright photo of {}",
    "a photo of one {}",
    "a rendition of {}",
    "a photo of the {}",
]


@dataclass
class OtiConfig:
    iterations: int = 500
    learning_rate: float = 2e-2
    lambda_content: float = 1.0
    lambda_gpt: float = 0.5
    noise_std: float = 0.64  # 0.16 for the large backbone
    weight_decay: float = 0.01
    ema_decay: float = 0.99
    k_concepts: int = 15
    template_set: list[str] = field(default_factory=lambda: list(TEMPLATE_SET))
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise InputError("iterations must be >= 0")
        for name in ("learning_rate", "lambda_content", "lambda_gpt",
                     "noise_std", "weight_decay", "ema_decay"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be nonnegative")
        if not self.template_set:
            raise InputError("template_set must be nonempty")


@dataclass
class OtiResult:
    token: torch.Tensor  # EMA-smoothed final pseudo-word token
    loss_trace: list[tuple[float, float, float]]  # (total, content, gpt)
    concepts_used: list[str]


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        raise DegenerateInputError("cosine undefined for zero-norm vector")
    return (a @ b) / (na * nb)


def content_loss(x: torch.Tensor, y: torch.Tensor,
                 noise: torch.Tensor) -> torch.Tensor:
    """1 - cos(x, y + n). Range [0, 2]."""
    return 1.0 - _cosine(x, y + noise)


def gpt_loss(y_hat: torch.Tensor, y_hat_star: torch.Tensor) -> torch.Tensor:
    """1 - cos between the original and pseudo-word-substituted phrase features."""
    return 1.0 - _cosine(y_hat, y_hat_star)


def sample_noise(gamma: float, d: int, rng: np.random.Generator) -> torch.Tensor:
    if gamma < 0:
        raise InputError("noise std must be nonnegative")
    if gamma == 0:
        return torch.zeros(d)
    return torch.from_numpy(rng.normal(0.0, gamma, size=d).astype(np.float32))


def oti_total_loss(l_content, l_gpt, cfg: OtiConfig):
    return cfg.lambda_content * l_content + cfg.lambda_gpt * l_gpt


def init_token(backbone, rng: np.random.Generator) -> torch.Tensor:
    """Gaussian init on the scale of the backbone's word-embedding table."""
    std = backbone.token_embedding_std()
    return torch.from_numpy(
        rng.normal(0.0, std, size=backbone.token_dim).astype(np.float32))


def invert_image(image, backbone, vocab: ConceptVocabulary, bank: PhraseBank,
                 cfg: OtiConfig, *, image_features: torch.Tensor | None = None,
                 label: str | None = None) -> OtiResult:
    """Run the full per-image optimization loop.

    ``image_features`` may be supplied to skip re-encoding (batch drivers
    cache them); ``label`` overrides the pseudo-word label.
    """
    rng = np.random.default_rng(cfg.seed)
    label = label or pseudo_word_label(0)

    x = image_features if image_features is not None else backbone.encode_image(image)
    x = x.detach()
    concepts = assign_concepts(x.numpy(), vocab, cfg.k_concepts)

    token = torch.nn.Parameter(init_token(backbone, rng))
    ema = token.detach().clone()
    optimizer = torch.optim.AdamW(
        [token], lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    trace: list[tuple[float, float, float]] = []
    for _ in range(cfg.iterations):
        template = cfg.template_set[int(rng.integers(len(cfg.template_set)))]
        prompt = template.format(label)
        y = backbone.encode_text(prompt, {label: token})
        noise = sample_noise(cfg.noise_std, backbone.embed_dim, rng)
        l_content = content_loss(x, y, noise)

        phrase, concept = sample_regularization_phrase(concepts, bank, rng)
        phrase_star = substitute_pseudo_word(phrase, concept, label)
        with torch.no_grad():
            y_hat = backbone.encode_text(phrase)
        y_hat_star = backbone.encode_text(phrase_star, {label: token})
        l_gpt = gpt_loss(y_hat, y_hat_star)

        loss = oti_total_loss(l_content, l_gpt, cfg)
        if not torch.isfinite(loss):
            raise FloatingPointError(
                f"non-finite OTI loss at iteration {len(trace)}: "
                f"content={float(l_content)}, gpt={float(l_gpt)}; "
                f"trace so far: {trace[-5:]}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        with torch.no_grad():
            if not torch.isfinite(token).all():
                raise FloatingPointError(
                    f"non-finite token after iteration {len(trace)}")
            ema.mul_(cfg.ema_decay).add_(token.detach(), alpha=1 - cfg.ema_decay)
        trace.append((loss.item(), l_content.item(), l_gpt.item()))

    final = ema if cfg.iterations > 0 else token.detach().clone()
    return OtiResult(token=final, loss_trace=trace, concepts_used=concepts)


def invert_images(images: dict[str, object], backbone, vocab, bank,
                  cfg: OtiConfig) -> dict[str, OtiResult]:
    """Sequential batch driver; each image gets an independent seeded run."""
    results = {}
    for i, (image_id, image) in enumerate(sorted(images.items())):
        per_image = OtiConfig(**{**cfg.__dict__, "seed": cfg.seed + i,
                                 "template_set": list(cfg.template_set)})
        results[image_id] = invert_image(image, backbone, vocab, bank, per_image)
    return results
