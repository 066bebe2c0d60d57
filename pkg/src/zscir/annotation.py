"""Model-assisted, three-phase dataset annotation service.

Phase 1 builds triplets from curated candidate galleries, phase 2 extends
each triplet with additional ground truths mined by the inversion model, and
phase 3 collects per-annotator semantic-aspect votes resolved by majority.
State is an append-only event log plus materialized views; every mutation is
replayable from the log.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from fastapi import FastAPI, HTTPException, Request

from .concepts import ConceptVocabulary, assign_concepts
from .datasets import MultiGtQuery
from .errors import InputError
from .evaluation import SemanticAspect
from .inversion_net import PhiNetwork, phi_forward
from .retrieval import RetrievalIndex, compose_annotation_query, search

SUPERCATEGORIES = [
    "person", "animal", "sports", "vehicle", "food", "accessory",
    "electronic", "kitchen", "furniture", "indoor", "outdoor", "appliance",
]

CAPTION_PREFIX = "Unlike the provided image, I want a photo of {shared_concept} that"

TARGET_GALLERY_SIZE = 50
MODEL_GALLERY_SIZE = 100
VISUAL_GALLERY_SIZE = 50
DEDUP_THRESHOLD = 0.92


@dataclass
class GalleryCandidate:
    image_id: str
    similarity: float
    provenance: list[str]
    known_gt: bool = False

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "similarity": self.similarity,
                "provenance": self.provenance, "known_gt": self.known_gt}


def build_target_gallery(reference_id: str, index: RetrievalIndex,
                         size: int = TARGET_GALLERY_SIZE,
                         dedup_threshold: float = DEDUP_THRESHOLD
                         ) -> tuple[list[GalleryCandidate], bool]:
    """Top candidates by visual similarity to the reference, excluding the
    reference itself and near-duplicates. Returns (gallery, truncated_notice)."""
    if reference_id not in index:
        raise InputError(f"reference {reference_id!r} not indexed")
    ranked = search(index.vector(reference_id), index, len(index))
    gallery = [GalleryCandidate(rid, sim, ["visual_similarity"])
               for rid, sim in ranked
               if rid != reference_id and sim <= dedup_threshold]
    truncated = len(gallery) < size
    return gallery[:size], truncated


class Inverter:
    """Resolves pseudo-word tokens, preferring a pre-generated token cache
    and falling back to the feed-forward network."""

    def __init__(self, token_cache: dict[str, np.ndarray] | None = None,
                 phi: PhiNetwork | None = None):
        if token_cache is None and phi is None:
            raise InputError("need a token cache or an inversion network")
        self.token_cache = token_cache or {}
        self.phi = phi

    def token_for(self, image_id: str, image_features: np.ndarray) -> torch.Tensor:
        if image_id in self.token_cache:
            return torch.from_numpy(np.asarray(self.token_cache[image_id],
                                               dtype=np.float32))
        if self.phi is None:
            raise InputError(f"no cached token for {image_id!r} and no network")
        return phi_forward(torch.from_numpy(
            np.asarray(image_features, dtype=np.float32)), self.phi)


def build_multigt_gallery(query: MultiGtQuery, index: RetrievalIndex,
                          inverter: Inverter, backbone) -> list[GalleryCandidate]:
    """Union of model-retrieved candidates for the annotation-time query and
    the images most visually similar to the target."""
    if not query.shared_concept:
        raise InputError("multi-GT gallery requires a shared concept")
    token = inverter.token_for(query.reference_id,
                               index.vector(query.reference_id))
    query_vec = compose_annotation_query(
        token, query.shared_concept, query.relative_caption, backbone)

    merged: dict[str, GalleryCandidate] = {}
    model_hits = search(query_vec, index, min(MODEL_GALLERY_SIZE, len(index)))
    for rid, sim in model_hits:
        merged[rid] = GalleryCandidate(rid, sim, ["model_retrieval"])
    visual_hits = search(index.vector(query.target_id), index,
                         min(VISUAL_GALLERY_SIZE, len(index)))
    for rid, sim in visual_hits:
        if rid in merged:
            merged[rid].provenance.append("visual_similarity")
        else:
            merged[rid] = GalleryCandidate(rid, sim, ["visual_similarity"])
    if query.target_id in merged:
        merged[query.target_id].known_gt = True
    return list(merged.values())


def finalize_aspects(votes: dict[str, set[SemanticAspect]]) -> set[SemanticAspect]:
    """Majority rule: an aspect is kept iff at least half of the distinct
    voters marked it."""
    if not votes:
        raise InputError("no votes recorded")
    quorum = math.ceil(len(votes) / 2)
    counts: dict[SemanticAspect, int] = {}
    for marked in votes.values():
        for aspect in marked:
            counts[aspect] = counts.get(aspect, 0) + 1
    return {a for a, n in counts.items() if n >= quorum}


class ConflictError(Exception):
    """Optimistic-concurrency rejection."""


class PhaseError(Exception):
    """Action does not match the item's phase."""


@dataclass
class QueryRecord:
    query_id: str
    reference_id: str
    target_id: str
    shared_concept: str
    relative_caption: str
    caption_rule_confirmed: bool
    phase: str = "multi_gt"  # triplet phase completed on creation
    ground_truth_ids: set[str] = field(default_factory=set)
    aspect_votes: dict[str, set[SemanticAspect]] = field(default_factory=dict)
    final_aspects: set[SemanticAspect] = field(default_factory=set)
    version: int = 0


class AnnotationStore:
    """Materialized annotation state, driven purely by events so the full
    state can be replayed from the audit log."""

    def __init__(self, index: RetrievalIndex, backbone,
                 inverter: Inverter | None = None,
                 dedup_threshold: float = DEDUP_THRESHOLD,
                 supercategories: Optional[list[str]] = None):
        self.index = index
        self.backbone = backbone
        self.inverter = inverter
        self.dedup_threshold = dedup_threshold
        self.supercategories = supercategories or list(SUPERCATEGORIES)
        self.events: list[dict] = []
        self.queries: dict[str, QueryRecord] = {}
        self.skipped: set[str] = set()
        self.completed_refs: set[str] = set()
        self._query_counter = itertools.count()
        self._supercat_of = self._classify_supercategories()

    def _classify_supercategories(self) -> dict[str, str]:
        vocab = ConceptVocabulary.from_backbone(
            list(self.supercategories), self.backbone)
        return {
            rid: assign_concepts(self.index.vector(rid), vocab, 1)[0]
            for rid in self.index.ids
        }

    # -- event machinery ------------------------------------------------
    def _record(self, annotator_id: str, action: str, payload: dict) -> dict:
        event = {"ts": time.time(), "annotator_id": annotator_id,
                 "action": action, "payload": payload}
        self.events.append(event)
        return event

    def replay(self) -> "AnnotationStore":
        """Rebuild a fresh store by applying this store's audit log."""
        clone = AnnotationStore(self.index, self.backbone, self.inverter,
                                self.dedup_threshold, self.supercategories)
        for event in self.events:
            clone.apply(event["annotator_id"], event["action"],
                        event["payload"], _replaying=True)
        return clone

    def apply(self, annotator_id: str, action: str, payload: dict,
              _replaying: bool = False):
        handler = {
            "skip_reference": self._apply_skip,
            "record_triplet": self._apply_triplet,
            "record_ground_truths": self._apply_ground_truths,
            "submit_aspect_votes": self._apply_aspect_votes,
            "finalize_aspects": self._apply_finalize,
        }[action]
        result = handler(annotator_id, payload)
        if not _replaying:
            self._record(annotator_id, action, payload)
        return result

    # -- phase 1 --------------------------------------------------------
    def next_reference(self) -> str | None:
        """Round-robin over supercategories, lowest completed count first;
        ties break by the fixed supercategory order."""
        used = self.skipped | self.completed_refs
        counts = {sc: 0 for sc in self.supercategories}
        for rid in self.completed_refs:
            counts[self._supercat_of[rid]] += 1
        available: dict[str, list[str]] = {sc: [] for sc in self.supercategories}
        for rid in sorted(self.index.ids):
            if rid not in used:
                available[self._supercat_of[rid]].append(rid)
        candidates = [sc for sc in self.supercategories if available[sc]]
        if not candidates:
            return None
        best = min(candidates, key=lambda sc: (counts[sc],
                                               self.supercategories.index(sc)))
        return available[best][0]

    def target_gallery(self, reference_id: str):
        return build_target_gallery(reference_id, self.index,
                                    dedup_threshold=self.dedup_threshold)

    def _apply_skip(self, annotator_id: str, payload: dict):
        self.skipped.add(payload["reference_id"])

    def _apply_triplet(self, annotator_id: str, payload: dict) -> QueryRecord:
        ref, target = payload["reference_id"], payload["target_id"]
        if ref == target:
            raise InputError("reference and target must differ")
        if ref not in self.index or target not in self.index:
            raise InputError("reference or target not indexed")
        if not payload["shared_concept"].strip():
            raise InputError("shared concept must be nonempty")
        if not payload["relative_caption"].strip():
            raise InputError("relative caption must be nonempty")
        query_id = payload.get("query_id")
        if not query_id:
            while True:
                query_id = f"q{next(self._query_counter):05d}"
                if query_id not in self.queries:
                    break
        if query_id in self.queries:
            raise ConflictError(f"query {query_id} already exists")
        rec = QueryRecord(
            query_id=query_id,
            reference_id=ref,
            target_id=target,
            shared_concept=payload["shared_concept"],
            relative_caption=payload["relative_caption"],
            caption_rule_confirmed=bool(payload.get("caption_rule_confirmed")),
            ground_truth_ids={target},
        )
        # replayed events must regenerate identical auto-ids
        payload.setdefault("query_id", query_id)
        self.queries[query_id] = rec
        self.completed_refs.add(ref)
        return rec

    # -- phase 2 --------------------------------------------------------
    def multigt_gallery(self, query_id: str) -> list[GalleryCandidate]:
        rec = self._get(query_id)
        if rec.phase != "multi_gt":
            raise PhaseError(f"query {query_id} is in phase {rec.phase}")
        if self.inverter is None:
            raise InputError("service has no inversion model configured")
        draft = MultiGtQuery(
            query_id=rec.query_id, reference_id=rec.reference_id,
            relative_caption=rec.relative_caption, target_id=rec.target_id,
            ground_truth_ids={rec.target_id}, shared_concept=rec.shared_concept)
        return build_multigt_gallery(draft, self.index, self.inverter,
                                     self.backbone)

    def _apply_ground_truths(self, annotator_id: str, payload: dict) -> QueryRecord:
        rec = self._get(payload["query_id"])
        if rec.phase != "multi_gt":
            raise PhaseError(f"query {rec.query_id} is in phase {rec.phase}")
        if payload.get("version", rec.version) != rec.version:
            raise ConflictError(
                f"version {payload['version']} != current {rec.version}")
        gts = set(payload["ground_truth_ids"]) | {rec.target_id}
        if rec.reference_id in gts:
            raise InputError("reference image cannot be a ground truth")
        missing = gts - set(self.index.ids)
        if missing:
            raise InputError(f"unknown ground truth ids {sorted(missing)}")
        rec.ground_truth_ids = gts
        rec.phase = "aspects"
        rec.version += 1
        return rec

    # -- phase 3 --------------------------------------------------------
    def _apply_aspect_votes(self, annotator_id: str, payload: dict) -> QueryRecord:
        rec = self._get(payload["query_id"])
        if rec.phase not in ("aspects", "finalized"):
            raise PhaseError(f"query {rec.query_id} is in phase {rec.phase}")
        aspects = {SemanticAspect(a) for a in payload["aspects"]}
        rec.aspect_votes[annotator_id] = aspects  # re-vote replaces
        rec.version += 1
        return rec

    def _apply_finalize(self, annotator_id: str, payload: dict) -> QueryRecord:
        rec = self._get(payload["query_id"])
        if rec.phase not in ("aspects", "finalized"):
            raise PhaseError(f"query {rec.query_id} is in phase {rec.phase}")
        rec.final_aspects = finalize_aspects(rec.aspect_votes)
        rec.phase = "finalized"
        rec.version += 1
        return rec

    def _get(self, query_id: str) -> QueryRecord:
        if query_id not in self.queries:
            raise InputError(f"unknown query {query_id!r}")
        return self.queries[query_id]

    # -- export ---------------------------------------------------------
    def export(self) -> list[MultiGtQuery]:
        out = []
        for rec in self.queries.values():
            out.append(MultiGtQuery(
                query_id=rec.query_id,
                reference_id=rec.reference_id,
                relative_caption=rec.relative_caption,
                target_id=rec.target_id,
                ground_truth_ids=set(rec.ground_truth_ids),
                shared_concept=rec.shared_concept,
                semantic_aspects=set(rec.final_aspects),
            ))
        return out


def create_app(store: AnnotationStore):
    """HTTP+JSON API over an annotation store."""
    app = FastAPI(title="annotation-service")
    app.state.store = store

    def fail(exc: Exception):
        if isinstance(exc, ConflictError):
            return HTTPException(status_code=409, detail=str(exc))
        if isinstance(exc, PhaseError):
            return HTTPException(status_code=409, detail=str(exc))
        return HTTPException(status_code=422, detail=str(exc))

    async def annotator(request: Request) -> str:
        auth = request.headers.get("authorization", "")
        if auth.lower().startswith("bearer "):
            return auth[7:].strip()
        body = {}
        try:
            body = await request.json()
        except Exception:
            pass
        if isinstance(body, dict) and body.get("annotator_id"):
            return str(body["annotator_id"])
        raise HTTPException(status_code=401,
                            detail="missing bearer token or annotator_id")

    @app.get("/next-reference")
    def next_reference():
        rid = store.next_reference()
        if rid is None:
            return {"reference_id": None, "done": True}
        return {"reference_id": rid, "done": False,
                "supercategory": store._supercat_of[rid]}

    @app.get("/gallery/target/{reference_id}")
    def target_gallery(reference_id: str):
        try:
            gallery, truncated = store.target_gallery(reference_id)
        except (InputError, ValueError) as exc:
            raise fail(exc)
        return {"candidates": [c.to_json() for c in gallery],
                "truncated": truncated,
                "caption_prefix": CAPTION_PREFIX}

    @app.post("/triplet")
    async def post_triplet(request: Request):
        who = await annotator(request)
        body = await request.json()
        try:
            if body.get("action") == "skip":
                store.apply(who, "skip_reference",
                            {"reference_id": body["reference_id"]})
                nxt = store.next_reference()
                return {"skipped": body["reference_id"],
                        "next_reference": nxt}
            rec = store.apply(who, "record_triplet", body)
        except (InputError, ConflictError, PhaseError, KeyError) as exc:
            raise fail(exc if isinstance(exc, Exception) else ValueError(exc))
        return {"query_id": rec.query_id, "version": rec.version}

    @app.get("/gallery/multigt/{query_id}")
    def multigt_gallery(query_id: str):
        try:
            gallery = store.multigt_gallery(query_id)
        except (InputError, PhaseError) as exc:
            raise fail(exc)
        rec = store.queries[query_id]
        return {"candidates": [c.to_json() for c in gallery],
                "version": rec.version, "known_target": rec.target_id}

    @app.post("/ground-truths")
    async def post_ground_truths(request: Request):
        who = await annotator(request)
        body = await request.json()
        try:
            rec = store.apply(who, "record_ground_truths", body)
        except (InputError, ConflictError, PhaseError, KeyError) as exc:
            raise fail(exc)
        return {"query_id": rec.query_id, "version": rec.version,
                "ground_truth_count": len(rec.ground_truth_ids)}

    @app.post("/aspect-votes")
    async def post_aspect_votes(request: Request):
        who = await annotator(request)
        body = await request.json()
        try:
            rec = store.apply(who, "submit_aspect_votes", body)
        except (InputError, ConflictError, PhaseError, KeyError, ValueError) as exc:
            raise fail(exc)
        return {"query_id": rec.query_id, "version": rec.version,
                "voters": sorted(rec.aspect_votes)}

    @app.post("/finalize/{query_id}")
    async def post_finalize(query_id: str, request: Request):
        who = await annotator(request)
        try:
            rec = store.apply(who, "finalize_aspects", {"query_id": query_id})
        except (InputError, ConflictError, PhaseError) as exc:
            raise fail(exc)
        return {"query_id": rec.query_id,
                "aspects": sorted(a.value for a in rec.final_aspects),
                "version": rec.version}

    @app.get("/export")
    def export():
        queries = store.export()
        return {"queries": [
            {"query_id": q.query_id, "reference_id": q.reference_id,
             "relative_caption": q.relative_caption, "target_id": q.target_id,
             "ground_truth_ids": sorted(q.ground_truth_ids),
             "shared_concept": q.shared_concept,
             "semantic_aspects": sorted(a.value for a in q.semantic_aspects)}
            for q in queries]}

    @app.get("/aspect-rules")
    def aspect_rules():
        return {"aspects": [a.value for a in SemanticAspect]}

    return app
