"""Embedding index, query templating, baselines, and exact top-K search.

All index rows and query vectors are unit-normalized; search is an exact
dense cosine ranking with ties broken by index order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import store
from .backbone import pseudo_word_label
from .errors import InputError

CIR_TEMPLATE = "a photo of {pseudo} that {caption}"
DOMAIN_TEMPLATE = "{domain} of {pseudo}"
ANNOTATION_TEMPLATE = "a photo of {concept} {pseudo} that {caption}"


@dataclass
class ComposedQuery:
    reference_image_id: str
    relative_caption: str
    second_caption: str | None = None
    shared_concept: str | None = None

    def __post_init__(self):
        if not self.relative_caption.strip():
            raise InputError("relative_caption must be nonempty")


class RetrievalIndex:
    def __init__(self, ids: list[str], matrix: np.ndarray,
                 metadata: str = ""):
        if len(ids) != len(set(ids)):
            raise InputError("index ids must be unique")
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.shape[0] != len(ids):
            raise InputError("row count does not match id count")
        if not np.isfinite(matrix).all():
            raise InputError("index matrix contains non-finite entries")
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if (norms == 0).any():
            raise InputError("index contains a zero-norm row")
        self.ids = list(ids)
        self.matrix = matrix / norms
        self.metadata = metadata
        self._pos = {rid: i for i, rid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._pos

    def vector(self, image_id: str) -> np.ndarray:
        return self.matrix[self._pos[image_id]]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def save(self, path: str | Path) -> None:
        store.write_embeddings(
            path, {rid: self.matrix[i] for i, rid in enumerate(self.ids)},
            self.dim)

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalIndex":
        _, records = store.read_embeddings(path)
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        return cls(list(records), np.stack(list(records.values())),
                   metadata=digest)


def build_index(embeddings: dict[str, np.ndarray],
                metadata: str = "") -> RetrievalIndex:
    if not embeddings:
        raise InputError("cannot build an empty index")
    return RetrievalIndex(list(embeddings), np.stack(list(embeddings.values())),
                          metadata=metadata)


def search(query_vec, index: RetrievalIndex,
           k: int) -> list[tuple[str, float]]:
    """Exact top-k by cosine, descending; ties broken by index order."""
    if len(index) == 0:
        raise InputError("empty index")
    if k > len(index):
        raise InputError(f"k={k} exceeds index size {len(index)}")
    q = np.asarray(_to_numpy(query_vec), dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise InputError("zero-norm query")
    scores = index.matrix.astype(np.float64) @ (q / norm)
    order = np.argsort(-scores, kind="stable")[:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def _to_numpy(vec) -> np.ndarray:
    if isinstance(vec, torch.Tensor):
        return vec.detach().numpy()
    return np.asarray(vec)


def _normalize(vec: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(vec)
    if float(norm) == 0:
        raise InputError("zero-norm feature vector")
    return vec / norm


def compose_cir_query(q: ComposedQuery, token: torch.Tensor,
                      backbone) -> torch.Tensor:
    """Encode "a photo of S* that {caption}"; with two captions, average the
    features of both "and"-joined concatenation orders and renormalize."""
    label = pseudo_word_label(0)
    with torch.no_grad():
        if q.second_caption is None:
            prompt = CIR_TEMPLATE.format(pseudo=label, caption=q.relative_caption)
            return _normalize(backbone.encode_text(prompt, {label: token}))
        if not q.second_caption.strip():
            raise InputError("second_caption must be nonempty when present")
        pair = sorted([q.relative_caption, q.second_caption])
        feats = []
        for a, b in [(pair[0], pair[1]), (pair[1], pair[0])]:
            prompt = CIR_TEMPLATE.format(pseudo=label, caption=f"{a} and {b}")
            feats.append(_normalize(backbone.encode_text(prompt, {label: token})))
        return _normalize((feats[0] + feats[1]) / 2)


def compose_domain_query(token: torch.Tensor, domain: str,
                         backbone) -> torch.Tensor:
    if not domain.strip():
        raise InputError("domain must be nonempty")
    label = pseudo_word_label(0)
    prompt = DOMAIN_TEMPLATE.format(domain=domain, pseudo=label)
    with torch.no_grad():
        return _normalize(backbone.encode_text(prompt, {label: token}))


def compose_object_query(token: torch.Tensor, objects: list[str],
                         backbone) -> torch.Tensor:
    if not objects:
        raise InputError("object list must be nonempty")
    label = pseudo_word_label(0)
    if len(objects) == 1:
        prompt = f"a photo of {label}, {objects[0]}"
    else:
        prompt = f"a photo of {label}, " + ", ".join(objects[:-1]) \
            + f" and {objects[-1]}"
    with torch.no_grad():
        return _normalize(backbone.encode_text(prompt, {label: token}))


def compose_annotation_query(token: torch.Tensor, shared_concept: str,
                             caption: str, backbone) -> torch.Tensor:
    """Annotation-time template that also includes the shared concept."""
    if not shared_concept.strip():
        raise InputError("shared_concept must be nonempty")
    label = pseudo_word_label(0)
    prompt = ANNOTATION_TEMPLATE.format(
        concept=shared_concept, pseudo=label, caption=caption)
    with torch.no_grad():
        return _normalize(backbone.encode_text(prompt, {label: token}))


def baseline_query(mode: str, backbone, *, image=None,
                   image_features: torch.Tensor | None = None,
                   caption: str | None = None) -> torch.Tensor:
    """Zero-shot baselines: image only, text only, or normalized sum."""
    def image_feat():
        if image_features is not None:
            return image_features
        if image is None:
            raise InputError(f"mode {mode!r} requires an image")
        return backbone.encode_image(image)

    def text_feat():
        if caption is None:
            raise InputError(f"mode {mode!r} requires a caption")
        with torch.no_grad():
            return backbone.encode_text(caption)

    if mode == "image_only":
        return _normalize(image_feat())
    if mode == "text_only":
        return _normalize(text_feat())
    if mode == "image_plus_text":
        return _normalize(_normalize(image_feat()) + _normalize(text_feat()))
    raise InputError(f"unknown baseline mode {mode!r}")
