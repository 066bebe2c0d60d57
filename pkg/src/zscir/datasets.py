"""Dataset schemas, loaders, validation, and summary statistics.

The canonical interchange format is JSON per split::

    {"queries": [{"query_id": ..., "reference_id": ..., "relative_caption": ...,
                  "shared_concept": ..., "target_id": ...,
                  "ground_truth_ids": [...], "semantic_aspects": [...]}, ...]}

Triplet-style datasets (single ground truth) use the same record shape with
``ground_truth_ids`` equal to ``[target_id]``; FashionIQ-style records carry a
``second_caption``.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InputError, ParseError
from .evaluation import SemanticAspect


@dataclass
class CirTriplet:
    reference_id: str
    relative_caption: str
    target_id: str
    second_caption: str | None = None
    shared_concept: str | None = None

    def __post_init__(self):
        if self.reference_id == self.target_id:
            raise InputError("reference and target must differ")
        if not self.relative_caption.strip():
            raise InputError("relative caption must be nonempty")


@dataclass
class MultiGtQuery:
    query_id: str
    reference_id: str
    relative_caption: str
    target_id: str
    ground_truth_ids: set[str]
    shared_concept: str | None = None
    semantic_aspects: set[SemanticAspect] = field(default_factory=set)
    second_caption: str | None = None

    def __post_init__(self):
        if self.reference_id == self.target_id:
            raise InputError(
                f"query {self.query_id}: reference equals target")
        if not self.relative_caption.strip():
            raise InputError(f"query {self.query_id}: empty relative caption")
        if self.target_id not in self.ground_truth_ids:
            raise InputError(
                f"query {self.query_id}: target not in ground_truth_ids")


def _query_from_record(rec: dict, i: int, schema: str) -> MultiGtQuery:
    try:
        if schema == "triplet":
            gts = set(rec.get("ground_truth_ids") or [rec["target_id"]])
        else:
            gts = set(rec["ground_truth_ids"])
        return MultiGtQuery(
            query_id=str(rec.get("query_id", i)),
            reference_id=rec["reference_id"],
            relative_caption=rec["relative_caption"],
            target_id=rec["target_id"],
            ground_truth_ids=gts,
            shared_concept=rec.get("shared_concept"),
            semantic_aspects={SemanticAspect(a)
                              for a in rec.get("semantic_aspects", [])},
            second_caption=rec.get("second_caption"),
        )
    except KeyError as exc:
        raise ParseError(f"query record {i}: missing field {exc}") from exc
    except ValueError as exc:
        raise ParseError(f"query record {i}: {exc}") from exc


def load_dataset(path: str | Path, schema: str = "multi_gt",
                 image_ids: set[str] | None = None) -> list[MultiGtQuery]:
    """Load and validate a split; ``image_ids``, when given, is the manifest
    of resolvable images."""
    if schema not in ("triplet", "multi_gt"):
        raise InputError(f"unknown schema {schema!r}")
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(payload, dict) or "queries" not in payload:
        raise ParseError(f"{path}: expected an object with a 'queries' list")
    queries = [_query_from_record(rec, i, schema)
               for i, rec in enumerate(payload["queries"])]
    ids = {q.query_id for q in queries}
    if len(ids) != len(queries):
        raise ParseError("duplicate query ids")
    if image_ids is not None:
        for q in queries:
            dangling = ({q.reference_id} | q.ground_truth_ids) - image_ids
            if dangling:
                raise ParseError(
                    f"query {q.query_id}: dangling image ids {sorted(dangling)}")
    return queries


def save_dataset(queries: list[MultiGtQuery], path: str | Path) -> None:
    records = []
    for q in queries:
        rec = {
            "query_id": q.query_id,
            "reference_id": q.reference_id,
            "relative_caption": q.relative_caption,
            "target_id": q.target_id,
            "ground_truth_ids": sorted(q.ground_truth_ids),
            "semantic_aspects": sorted(a.value for a in q.semantic_aspects),
        }
        if q.shared_concept is not None:
            rec["shared_concept"] = q.shared_concept
        if q.second_caption is not None:
            rec["second_caption"] = q.second_caption
        records.append(rec)
    Path(path).write_text(json.dumps({"queries": records}, indent=1),
                          encoding="utf-8")


def dataset_stats(queries: list[MultiGtQuery]) -> dict:
    if not queries:
        raise InputError("empty collection")
    gt_counts = [len(q.ground_truth_ids) for q in queries]
    caption_words = [len(q.relative_caption.split()) for q in queries]
    coverage = {}
    for aspect in SemanticAspect:
        n = sum(1 for q in queries if aspect in q.semantic_aspects)
        coverage[aspect.value] = n / len(queries)
    return {
        "num_queries": len(queries),
        "total_ground_truths": sum(gt_counts),
        "mean_ground_truths": sum(gt_counts) / len(queries),
        "max_ground_truths": max(gt_counts),
        "mode_ground_truths": statistics.mode(gt_counts),
        "mean_caption_words": sum(caption_words) / len(queries),
        "aspect_coverage": coverage,
    }


def make_circo_stats_fixture() -> list[MultiGtQuery]:
    """Deterministic synthetic split reproducing the published aggregate
    statistics of the multi-ground-truth benchmark: 1020 queries, 4624 ground
    truths, mean 4.53, maximum 21, mode 2."""
    # one maximal query, 400 modal ones, and a filler mix chosen so that no
    # other count reaches the modal frequency
    counts = [21] + [2] * 400 + [5] * 301 + [7] * 300 + [11] * 18
    assert len(counts) == 1020 and sum(counts) == 4624

    aspects = list(SemanticAspect)
    queries = []
    pool = 0
    for qi, g in enumerate(counts):
        gts = {f"img{pool + j:05d}" for j in range(g)}
        target = f"img{pool:05d}"
        pool += g
        queries.append(MultiGtQuery(
            query_id=f"q{qi:04d}",
            reference_id=f"ref{qi:04d}",
            relative_caption=f"shows item {qi} with a different background",
            target_id=target,
            ground_truth_ids=gts,
            shared_concept=f"concept {qi % 50}",
            semantic_aspects={aspects[qi % len(aspects)]},
        ))
    return queries
