"""Frozen vision-language backbone adapters.

Two implementations share one interface: a deterministic stub encoder that
needs no model downloads (used throughout the test suite) and an adapter over
a pretrained CLIP model from ``transformers``. Both expose image encoding,
text encoding with pseudo-word token injection, and a tokenizer probe.

Pseudo-words are reserved labels of the form ``<|pw0|>`` that cannot collide
with real vocabulary words. When a prompt contains such a label, the caller
must supply the token vector to inject at that slot; gradients flow back to
the injected vector so it can be optimized.
"""

from __future__ import annotations

import functools
import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from PIL import Image

from .errors import InputError, PromptOverflowError

PSEUDO_WORD_RE = re.compile(r"<\|pw\d+\|>")


def pseudo_word_label(i: int = 0) -> str:
    return f"<|pw{i}|>"


def _seed_from(model_id: str, salt: str) -> int:
    digest = hashlib.sha256(f"{model_id}/{salt}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class BackboneInfo:
    embed_dim: int
    token_dim: int
    model_id: str
    context_length: int


class StubBackbone:
    """Deterministic random-projection encoder pair for tests.

    Images are reduced to pixel statistics and text to hashed-token embedding
    sums; both are pushed through fixed random projections with a tanh
    nonlinearity. Everything is seeded from ``model_id``, so two handles with
    the same id are bitwise-identical.
    """

    _VOCAB_BUCKETS = 4096
    _IMAGE_PATCH = 8  # images reduced to an 8x8 RGB thumbnail

    def __init__(self, embed_dim: int = 64, token_dim: int = 64,
                 context_length: int = 77, model_id: str = "stub-base"):
        if embed_dim <= 0 or token_dim <= 0:
            raise InputError("embed_dim and token_dim must be positive")
        self.info = BackboneInfo(embed_dim, token_dim, model_id, context_length)

        g = torch.Generator().manual_seed(_seed_from(model_id, "tables"))
        self._embedding_table = torch.randn(
            self._VOCAB_BUCKETS, token_dim, generator=g) * 0.05
        self._text_proj = torch.randn(embed_dim, token_dim, generator=g) / token_dim ** 0.5
        self._text_mix = torch.randn(embed_dim, embed_dim, generator=g) / embed_dim ** 0.5
        self._pos_weights = 0.5 + torch.rand(context_length, generator=g)
        feat_dim = self._IMAGE_PATCH * self._IMAGE_PATCH * 3 + 4
        self._image_proj = torch.randn(embed_dim, feat_dim, generator=g) / feat_dim ** 0.5

    # -- properties -----------------------------------------------------
    @property
    def embed_dim(self) -> int:
        return self.info.embed_dim

    @property
    def token_dim(self) -> int:
        return self.info.token_dim

    @property
    def context_length(self) -> int:
        return self.info.context_length

    def token_embedding_std(self) -> float:
        return float(self._embedding_table.std())

    def word_embedding(self, word: str) -> torch.Tensor:
        return self._embedding_table[self._bucket(word)].clone()

    # -- tokenization ---------------------------------------------------
    @staticmethod
    def _split(prompt: str) -> list[str]:
        out: list[str] = []
        pos = 0
        for m in PSEUDO_WORD_RE.finditer(prompt):
            out.extend(re.findall(r"[a-z0-9]+", prompt[pos:m.start()].lower()))
            out.append(m.group())
            pos = m.end()
        out.extend(re.findall(r"[a-z0-9]+", prompt[pos:].lower()))
        return out

    @staticmethod
    def _bucket(word: str) -> int:
        h = hashlib.sha256(word.encode()).digest()
        return int.from_bytes(h[:4], "little") % StubBackbone._VOCAB_BUCKETS

    @functools.lru_cache(maxsize=4096)
    def _token_ids(self, prompt: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """Returns (bucket ids incl. sentinels, positions of pseudo-word slots)."""
        words = self._split(prompt)
        ids = [self._bucket("<bos>")]
        slots = []
        for w in words:
            if PSEUDO_WORD_RE.fullmatch(w):
                slots.append(len(ids))
                ids.append(-1)  # placeholder, replaced at encode time
            else:
                ids.append(self._bucket(w))
        ids.append(self._bucket("<eos>"))
        return tuple(ids), tuple(slots)

    def tokenize_probe(self, prompt: str) -> int:
        ids, _ = self._token_ids(prompt)
        return len(ids)

    # -- encoding -------------------------------------------------------
    def encode_text(self, prompt: str,
                    injections: Mapping[str, torch.Tensor] | None = None) -> torch.Tensor:
        injections = injections or {}
        labels = PSEUDO_WORD_RE.findall(prompt)
        missing = [l for l in labels if l not in injections]
        if missing:
            raise InputError(f"no injection provided for pseudo-word(s) {missing}")
        ids, slots = self._token_ids(prompt)
        if len(ids) > self.context_length:
            raise PromptOverflowError(
                f"prompt tokenizes to {len(ids)} tokens "
                f"(context length {self.context_length})")

        rows = [self._embedding_table[i] for i in ids]
        for slot, label in zip(slots, labels):
            vec = injections[label]
            if vec.shape != (self.token_dim,):
                raise InputError(
                    f"injected token for {label} has shape {tuple(vec.shape)}, "
                    f"expected ({self.token_dim},)")
            rows[slot] = vec
        emb = torch.stack(rows)
        pooled = (self._pos_weights[: len(ids), None] * emb).sum(dim=0)
        # gain keeps feature norms on the same order as real CLIP features
        return 10.0 * (self._text_mix @ torch.tanh(self._text_proj @ pooled))

    def encode_image(self, image) -> torch.Tensor:
        arr = _load_image_array(image, self._IMAGE_PATCH)
        stats = np.array([arr.mean(), arr.std(), arr.min(), arr.max()], dtype=np.float32)
        # center pixels so distinct images are not dominated by a shared mean
        feat = torch.from_numpy(np.concatenate([arr.ravel() - 0.5, stats]))
        with torch.no_grad():
            return 10.0 * torch.tanh(self._image_proj @ feat)


def _load_image_array(image, patch: int) -> np.ndarray:
    """Decode to a small float32 RGB thumbnail in [0, 1]."""
    if isinstance(image, (str, Path)):
        try:
            image = Image.open(image)
        except Exception as exc:
            raise InputError(f"cannot decode image {image!r}: {exc}") from exc
    if isinstance(image, Image.Image):
        image = np.asarray(image.convert("RGB").resize((patch, patch)))
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise InputError(f"expected an RGB image, got array shape {arr.shape}")
    if arr.shape[:2] != (patch, patch):
        arr = np.asarray(Image.fromarray(
            arr.astype(np.uint8)).resize((patch, patch)), dtype=np.float32)
    if arr.max() > 1.0:
        arr = arr / 255.0
    return arr.astype(np.float32)


class ClipBackbone:
    """Adapter over a ``transformers`` CLIP model.

    Injection works by tokenizing the prompt around each pseudo-word label,
    placing a dummy token id at the slot, and swapping in the supplied token
    vector at the embedding layer via a forward hook. The model stays frozen;
    gradients reach only the injected vectors.
    """

    def __init__(self, model, tokenizer, model_id: str = "clip",
                 pad_ratio: float = 1.25):
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model
        self.tokenizer = tokenizer
        self.pad_ratio = pad_ratio
        cfg = model.config
        # Text pooling picks the hidden state at the eos position by id; a
        # tokenizer/config mismatch would silently pool the wrong slot.
        if tokenizer.eos_token_id is not None:
            cfg.text_config.eos_token_id = tokenizer.eos_token_id
            if hasattr(model.text_model, "eos_token_id"):
                model.text_model.eos_token_id = tokenizer.eos_token_id
        self.info = BackboneInfo(
            embed_dim=cfg.projection_dim,
            token_dim=cfg.text_config.hidden_size,
            model_id=model_id,
            context_length=cfg.text_config.max_position_embeddings,
        )

    @classmethod
    def from_pretrained(cls, model_ref: str = "openai/clip-vit-base-patch32",
                        pad_ratio: float = 1.25) -> "ClipBackbone":
        from transformers import CLIPModel, CLIPProcessor
        model = CLIPModel.from_pretrained(model_ref)
        processor = CLIPProcessor.from_pretrained(model_ref)
        bb = cls(model, processor.tokenizer, model_id=model_ref, pad_ratio=pad_ratio)
        bb.image_processor = processor.image_processor
        return bb

    @property
    def embed_dim(self) -> int:
        return self.info.embed_dim

    @property
    def token_dim(self) -> int:
        return self.info.token_dim

    @property
    def context_length(self) -> int:
        return self.info.context_length

    def token_embedding_std(self) -> float:
        table = self.model.text_model.embeddings.token_embedding.weight
        return float(table.std())

    def word_embedding(self, word: str) -> torch.Tensor:
        ids = self.tokenizer(word, add_special_tokens=False).input_ids
        if len(ids) != 1:
            raise InputError(f"{word!r} is not a single token in this vocabulary")
        return self.model.text_model.embeddings.token_embedding.weight[ids[0]].clone()

    def _assemble_ids(self, prompt: str) -> tuple[list[int], list[int], list[str]]:
        pieces: list[int] = []
        slots: list[int] = []
        labels: list[str] = []
        pos = 0
        dummy = self.tokenizer.bos_token_id
        for m in PSEUDO_WORD_RE.finditer(prompt):
            pieces.extend(self.tokenizer(
                prompt[pos:m.start()].strip(), add_special_tokens=False).input_ids)
            slots.append(len(pieces) + 1)  # +1 for the bos prepended below
            labels.append(m.group())
            pieces.append(dummy)
            pos = m.end()
        pieces.extend(self.tokenizer(
            prompt[pos:].strip(), add_special_tokens=False).input_ids)
        ids = [self.tokenizer.bos_token_id] + pieces + [self.tokenizer.eos_token_id]
        return ids, slots, labels

    def tokenize_probe(self, prompt: str) -> int:
        ids, _, _ = self._assemble_ids(prompt)
        return len(ids)

    def encode_text(self, prompt: str,
                    injections: Mapping[str, torch.Tensor] | None = None) -> torch.Tensor:
        injections = injections or {}
        ids, slots, labels = self._assemble_ids(prompt)
        missing = [l for l in labels if l not in injections]
        if missing:
            raise InputError(f"no injection provided for pseudo-word(s) {missing}")
        if len(ids) > self.context_length:
            raise PromptOverflowError(
                f"prompt tokenizes to {len(ids)} tokens "
                f"(context length {self.context_length})")

        vectors = []
        for slot, label in zip(slots, labels):
            vec = injections[label]
            if vec.shape != (self.token_dim,):
                raise InputError(
                    f"injected token for {label} has shape {tuple(vec.shape)}, "
                    f"expected ({self.token_dim},)")
            vectors.append((slot, vec))

        def swap(module, args, output):
            if not vectors:
                return output
            output = output.clone()
            for slot, vec in vectors:
                output[0, slot] = vec.to(output.dtype)
            return output

        embedding = self.model.text_model.embeddings.token_embedding
        handle = embedding.register_forward_hook(swap)
        try:
            input_ids = torch.tensor([ids])
            feats = self.model.get_text_features(input_ids=input_ids)
        finally:
            handle.remove()
        return _pooled(feats)[0]

    def _preprocess(self, image) -> torch.Tensor:
        if isinstance(image, (str, Path)):
            try:
                image = Image.open(image)
            except Exception as exc:
                raise InputError(f"cannot decode image {image!r}: {exc}") from exc
        if isinstance(image, np.ndarray):
            image = Image.fromarray(image.astype(np.uint8))
        image = _target_pad(image.convert("RGB"), self.pad_ratio)
        proc = getattr(self, "image_processor", None)
        if proc is not None:
            return proc(images=image, return_tensors="pt").pixel_values
        # no processor configured (e.g. randomly initialized test model)
        size = self.model.config.vision_config.image_size
        arr = np.asarray(image.resize((size, size)), dtype=np.float32) / 255.0
        return torch.from_numpy(arr).permute(2, 0, 1)[None]

    def encode_image(self, image) -> torch.Tensor:
        pixel_values = self._preprocess(image)
        with torch.no_grad():
            feats = self.model.get_image_features(pixel_values=pixel_values)
        return _pooled(feats)[0]


def _pooled(feats) -> torch.Tensor:
    """Feature getters return a bare tensor or an output object whose
    ``pooler_output`` holds the projected features, depending on the
    ``transformers`` version."""
    if isinstance(feats, torch.Tensor):
        return feats
    return feats.pooler_output


def _target_pad(image: Image.Image, target_ratio: float) -> Image.Image:
    """Pad with zeros so the aspect ratio does not exceed ``target_ratio``."""
    w, h = image.size
    ratio = max(w, h) / min(w, h)
    if ratio <= target_ratio:
        return image
    side = max(w, h)
    canvas = Image.new("RGB", (side, side))
    canvas.paste(image, ((side - w) // 2, (side - h) // 2))
    return canvas


def load_backbone(model_ref: str) -> StubBackbone | ClipBackbone:
    """Resolve the ``backbone.model_ref`` config key.

    ``stub:<id>[:d[,token_dim]]`` yields the deterministic stub; anything else
    is treated as a ``transformers`` checkpoint reference.
    """
    if model_ref.startswith("stub"):
        parts = model_ref.split(":")
        model_id = parts[1] if len(parts) > 1 and parts[1] else "stub-base"
        dims = parts[2].split(",") if len(parts) > 2 else []
        d = int(dims[0]) if dims else 64
        token_dim = int(dims[1]) if len(dims) > 1 else d
        return StubBackbone(embed_dim=d, token_dim=token_dim,
                            model_id=f"stub-{model_id}")
    return ClipBackbone.from_pretrained(model_ref)
