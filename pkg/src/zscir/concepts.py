"""Concept vocabulary, zero-shot concept assignment, and the phrase bank.

The vocabulary is a list of class names embedded once through the prompt
"a photo of {concept}". Each image is assigned its k most similar distinct
concepts by cosine similarity. The phrase bank maps every concept to
pre-generated continuations of "a photo of {concept}" produced by an external
autoregressive LM; substituting the concept with a pseudo-word label yields
the regularization phrases.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError

CONCEPT_PROMPT = "a photo of {concept}"

# Audit manifest for any external phrase-generation run.
GENERATION_MANIFEST = {
    "prompt": CONCEPT_PROMPT,
    "phrases_per_concept": 256,
    "temperature": 0.5,
    "max_new_tokens": 35,
}


@dataclass
class ConceptVocabulary:
    entries: list[str]
    text_embeddings: np.ndarray  # (|entries|, d), rows unit-normalized

    def __post_init__(self):
        if len(self.entries) != len(set(self.entries)):
            raise InputError("vocabulary entries must be unique")
        if self.text_embeddings.shape[0] != len(self.entries):
            raise InputError("embedding row count does not match entry count")
        norms = np.linalg.norm(self.text_embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise InputError("vocabulary embeddings must be row-normalized")

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_backbone(cls, entries: list[str], backbone) -> "ConceptVocabulary":
        entries = _dedupe(entries)
        rows = []
        for concept in entries:
            vec = backbone.encode_text(CONCEPT_PROMPT.format(concept=concept))
            rows.append(vec.detach().numpy())
        mat = np.stack(rows).astype(np.float32)
        mat /= np.linalg.norm(mat, axis=1, keepdims=True)
        return cls(entries, mat)


def _dedupe(entries: list[str]) -> list[str]:
    """Distinctness by lowercased/trimmed string identity, keeping first."""
    seen: set[str] = set()
    out = []
    for e in entries:
        key = e.strip().lower()
        if key and key not in seen:
            seen.add(key)
            out.append(e.strip())
    return out


def load_vocabulary_names(path: str | Path) -> list[str]:
    """One class name per line."""
    return _dedupe(Path(path).read_text(encoding="utf-8").splitlines())


def assign_concepts(x: np.ndarray, vocab: ConceptVocabulary, k: int) -> list[str]:
    """The k distinct concepts most cosine-similar to x, descending.

    Ties break toward the lower vocabulary index.
    """
    if k > len(vocab):
        raise InputError(f"k={k} exceeds vocabulary size {len(vocab)}")
    if k <= 0:
        raise InputError("k must be positive")
    x = np.asarray(x, dtype=np.float64)
    sims = vocab.text_embeddings.astype(np.float64) @ (x / np.linalg.norm(x))
    # stable sort on -sims preserves vocabulary order within ties
    order = np.argsort(-sims, kind="stable")[:k]
    return [vocab.entries[i] for i in order]


@dataclass
class PhraseBank:
    phrases: dict[str, list[str]] = field(default_factory=dict)
    phrases_per_concept: int | None = None

    def __contains__(self, concept: str) -> bool:
        return concept in self.phrases

    def add(self, concept: str, phrase_list: list[str], line: int | None = None):
        prefix = CONCEPT_PROMPT.format(concept=concept)
        for p in phrase_list:
            if not p.startswith(prefix):
                raise ParseError(
                    f"phrase {p!r} does not start with {prefix!r}", line=line)
        if self.phrases_per_concept is not None and \
                len(phrase_list) != self.phrases_per_concept:
            raise ParseError(
                f"concept {concept!r} has {len(phrase_list)} phrases, "
                f"expected {self.phrases_per_concept}", line=line)
        self.phrases[concept] = list(phrase_list)

    def get(self, concept: str) -> list[str]:
        if concept not in self.phrases:
            raise KeyError(f"concept {concept!r} not in phrase bank")
        return self.phrases[concept]


def sample_regularization_phrase(concepts: list[str], bank: PhraseBank,
                                 rng: np.random.Generator) -> tuple[str, str]:
    """Uniformly pick a concept, then uniformly one of its phrases."""
    concept = concepts[int(rng.integers(len(concepts)))]
    phrase_list = bank.get(concept)
    phrase = phrase_list[int(rng.integers(len(phrase_list)))]
    return phrase, concept


def substitute_pseudo_word(phrase: str, concept: str, label: str) -> str:
    """Replace the first occurrence of the concept with the pseudo-word label."""
    idx = phrase.find(concept)
    if idx < 0:
        raise InputError(f"concept {concept!r} not found in phrase {phrase!r}")
    return phrase[:idx] + label + phrase[idx + len(concept):]


def ingest_phrase_bank(path: str | Path,
                       phrases_per_concept: int | None = None) -> PhraseBank:
    """Line-delimited JSON records {"concept": str, "phrases": [str, ...]}."""
    bank = PhraseBank(phrases_per_concept=phrases_per_concept)
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                concept, phrase_list = rec["concept"], rec["phrases"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed phrase-bank record: {exc}",
                                 line=lineno) from exc
            bank.add(concept, phrase_list, line=lineno)
    return bank


def write_phrase_bank(bank: PhraseBank, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for concept, phrase_list in bank.phrases.items():
            f.write(json.dumps({"concept": concept, "phrases": phrase_list}) + "\n")


def synthetic_phrase_bank(concepts: list[str], phrases_per_concept: int = 8,
                          seed: int = 0) -> PhraseBank:
    """Deterministic stand-in continuations for tests and offline fixtures."""
    rng = np.random.default_rng(seed)
    suffixes = [
        "that is {verb} in front of a {place}",
        "that is {verb} next to a {place}",
        "that looks {adj} near the {place}",
        "that is {adj} and {verb}",
        "that is {verb} under a {place}",
        "that appears {adj} by the {place}",
    ]
    verbs = ["sitting", "standing", "resting", "moving", "waiting", "playing"]
    adjs = ["small", "bright", "old", "quiet", "colorful", "large"]
    places = ["window", "tree", "building", "river", "table", "road"]
    bank = PhraseBank(phrases_per_concept=phrases_per_concept)
    for concept in concepts:
        prefix = CONCEPT_PROMPT.format(concept=concept)
        seen: set[str] = set()
        phrase_list = []
        while len(phrase_list) < phrases_per_concept:
            suffix = suffixes[int(rng.integers(len(suffixes)))].format(
                verb=verbs[int(rng.integers(len(verbs)))],
                adj=adjs[int(rng.integers(len(adjs)))],
                place=places[int(rng.integers(len(places)))],
            )
            if suffix in seen:
                continue
            seen.add(suffix)
            phrase_list.append(f"{prefix} {suffix}")
        bank.add(concept, phrase_list)
    return bank
