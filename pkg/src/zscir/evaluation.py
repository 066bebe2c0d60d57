"""Retrieval metrics, per-aspect breakdown, modality redundancy, and the
missing-ground-truth estimator.

Metrics operate on ranked id lists only, so they are testable without any
backbone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .errors import InputError
from .retrieval import baseline_query, search


class SemanticAspect(str, enum.Enum):
    CARDINALITY = "cardinality"
    ADDITION = "addition"
    NEGATION = "negation"
    DIRECT_ADDRESSING = "direct_addressing"
    COMPARE_CHANGE = "compare_change"
    COMPARATIVE_STATEMENT = "comparative_statement"
    STATEMENT_CONJUNCTION = "statement_conjunction"
    SPATIAL_BACKGROUND = "spatial_background"
    VIEWPOINT = "viewpoint"


@dataclass
class QueryResult:
    query_id: str
    ranked_ids: list[str]
    ground_truth: set[str]
    semantic_aspects: set[SemanticAspect] = field(default_factory=set)

    def __post_init__(self):
        if not self.ground_truth:
            raise InputError(f"query {self.query_id}: ground truth set is empty")
        if len(self.ranked_ids) != len(set(self.ranked_ids)):
            raise InputError(f"query {self.query_id}: ranked ids not unique")


def recall_at_k(results: list[QueryResult], k: int) -> float:
    """Fraction of queries with at least one ground truth in the top k."""
    _check_k(results, k)
    hits = sum(1 for r in results if set(r.ranked_ids[:k]) & r.ground_truth)
    return hits / len(results)


def map_at_k(results: list[QueryResult], k: int) -> float:
    """Mean truncated average precision with per-query normalizer min(k, G)."""
    _check_k(results, k)
    total = 0.0
    for r in results:
        hits = 0
        ap = 0.0
        for rank, rid in enumerate(r.ranked_ids[:k], start=1):
            if rid in r.ground_truth:
                hits += 1
                ap += hits / rank  # P@rank at a relevant position
        total += ap / min(k, len(r.ground_truth))
    return total / len(results)


def map_by_aspect(results: list[QueryResult],
                  k: int) -> dict[SemanticAspect, float]:
    """mAP@k restricted per aspect; queries may count toward several aspects.

    Aspects with no queries are omitted.
    """
    out: dict[SemanticAspect, float] = {}
    for aspect in SemanticAspect:
        subset = [r for r in results if aspect in r.semantic_aspects]
        if subset:
            out[aspect] = map_at_k(subset, k)
    return out


def _check_k(results: list[QueryResult], k: int) -> None:
    if not results:
        raise InputError("no query results")
    if k < 1:
        raise InputError("k must be >= 1")
    for r in results:
        if k > len(r.ranked_ids):
            raise InputError(
                f"query {r.query_id}: k={k} exceeds ranked list length "
                f"{len(r.ranked_ids)}")


def modality_redundancy(queries, index, backbone,
                        k_list: list[int]) -> dict[str, dict[int, float]]:
    """Recall@K curves for text-only and image-only retrieval of the single
    annotated target of each query.

    ``queries`` is an iterable of objects with ``query_id``, ``reference_id``,
    ``relative_caption``, and ``target_id`` attributes.
    """
    k_max = max(k_list)
    t2i, i2i = [], []
    for q in queries:
        text_vec = baseline_query("text_only", backbone,
                                  caption=q.relative_caption)
        image_vec = baseline_query("image_only", backbone,
                                   image_features=_index_vec(index, q.reference_id))
        for bucket, vec in ((t2i, text_vec), (i2i, image_vec)):
            ranked = [rid for rid, _ in search(vec, index, k_max)]
            bucket.append(QueryResult(q.query_id, ranked, {q.target_id}))
    return {
        "T2I": {k: recall_at_k(t2i, k) for k in k_list},
        "I2I": {k: recall_at_k(i2i, k) for k in k_list},
    }


def _index_vec(index, image_id):
    import torch
    return torch.from_numpy(index.vector(image_id).copy())


def estimate_missing_gts(annotated_via_model: int, model_recall: float,
                         total_annotated: int) -> tuple[float, float]:
    """Extrapolate the true ground-truth total from the model-assisted count.

    estimated_total = annotated_via_model / recall; the annotated fraction is
    total_annotated / estimated_total.
    """
    if not 0.0 < model_recall <= 1.0:
        raise InputError("model recall must be in (0, 1]")
    estimated_total = annotated_via_model / model_recall
    if estimated_total == 0:
        raise InputError("cannot form a fraction with zero estimated total")
    return estimated_total, total_annotated / estimated_total


def averaged_recall(per_category: dict[str, dict[int, float]]) -> dict[int, float]:
    """Arithmetic mean of per-category Recall@K values (FashionIQ-style)."""
    if not per_category:
        raise InputError("no categories")
    ks = None
    for vals in per_category.values():
        ks = set(vals) if ks is None else ks & set(vals)
    return {k: sum(v[k] for v in per_category.values()) / len(per_category)
            for k in sorted(ks)}
