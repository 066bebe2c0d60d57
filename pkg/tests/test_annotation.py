import numpy as np
import pytest
import torch

from zscir.annotation import (CAPTION_PREFIX, SUPERCATEGORIES,
                              AnnotationStore, ConflictError, Inverter,
                              PhaseError, build_multigt_gallery,
                              build_target_gallery, create_app,
                              finalize_aspects)
from zscir.datasets import MultiGtQuery
from zscir.errors import InputError
from zscir.evaluation import SemanticAspect
from zscir.retrieval import build_index

A = SemanticAspect


@pytest.fixture(scope="module")
def corpus(backbone):
    rng = np.random.default_rng(21)
    images = {f"img{i:03d}": rng.random((8, 8, 3), dtype=np.float32)
              for i in range(30)}
    embeddings = {k: backbone.encode_image(v).numpy()
                  for k, v in images.items()}
    index = build_index(embeddings)
    tokens = {k: rng.normal(size=backbone.token_dim).astype(np.float32)
              for k in images}
    return index, tokens


@pytest.fixture()
def store(backbone, corpus):
    index, tokens = corpus
    return AnnotationStore(index, backbone, Inverter(token_cache=tokens))


# -- phase 1 ---------------------------------------------------------------


def test_target_gallery_excludes_reference_and_near_duplicates(corpus):
    index, _ = corpus
    ref = index.ids[0]
    gallery, truncated = build_target_gallery(ref, index, size=10,
                                              dedup_threshold=0.92)
    assert all(c.image_id != ref for c in gallery)
    assert all(c.similarity <= 0.92 for c in gallery)
    assert len(gallery) == 10 and truncated is False
    assert all(c.provenance == ["visual_similarity"] for c in gallery)


def test_target_gallery_truncation_notice(corpus):
    index, _ = corpus
    gallery, truncated = build_target_gallery(index.ids[0], index, size=100)
    assert truncated is True and len(gallery) < 100
    with pytest.raises(InputError):
        build_target_gallery("missing", index)


def test_next_reference_round_robins_supercategories(store):
    first = store.next_reference()
    assert first is not None
    cat_first = store._supercat_of[first]
    store.apply("ann1", "record_triplet", {
        "reference_id": first, "target_id": store.index.ids[5] if
        store.index.ids[5] != first else store.index.ids[6],
        "shared_concept": "dog", "relative_caption": "is outside",
        "caption_rule_confirmed": True})
    nxt = store.next_reference()
    # once a category has a completed reference, a less-served category is
    # preferred whenever one still has available references
    remaining_cats = {store._supercat_of[r] for r in store.index.ids
                      if r not in (first,)}
    if remaining_cats - {cat_first}:
        assert store._supercat_of[nxt] != cat_first


def test_skip_removes_reference_from_rotation(store):
    first = store.next_reference()
    store.apply("ann1", "skip_reference", {"reference_id": first})
    assert store.next_reference() != first


def test_triplet_validation(store):
    ids = store.index.ids
    with pytest.raises(InputError):
        store.apply("a", "record_triplet", {
            "reference_id": ids[0], "target_id": ids[0],
            "shared_concept": "x", "relative_caption": "y"})
    with pytest.raises(InputError):
        store.apply("a", "record_triplet", {
            "reference_id": ids[0], "target_id": "ghost",
            "shared_concept": "x", "relative_caption": "y"})
    with pytest.raises(InputError):
        store.apply("a", "record_triplet", {
            "reference_id": ids[0], "target_id": ids[1],
            "shared_concept": " ", "relative_caption": "y"})


# -- phase 2 ---------------------------------------------------------------


def _make_query(store, ref_i=0, tgt_i=1, concept="dog"):
    ids = store.index.ids
    rec = store.apply("ann1", "record_triplet", {
        "reference_id": ids[ref_i], "target_id": ids[tgt_i],
        "shared_concept": concept, "relative_caption": "is in the garden",
        "caption_rule_confirmed": True})
    return rec


def test_multigt_gallery_merges_provenance(backbone, corpus):
    index, tokens = corpus
    inverter = Inverter(token_cache=tokens)
    query = MultiGtQuery(
        query_id="q", reference_id=index.ids[0], relative_caption="is red",
        target_id=index.ids[1], ground_truth_ids={index.ids[1]},
        shared_concept="dog")
    gallery = build_multigt_gallery(query, index, inverter, backbone)
    provs = {tuple(sorted(c.provenance)) for c in gallery}
    assert ("model_retrieval",) in provs or \
        ("model_retrieval", "visual_similarity") in provs
    assert ("visual_similarity",) in provs or \
        ("model_retrieval", "visual_similarity") in provs
    flagged = [c for c in gallery if c.known_gt]
    assert [c.image_id for c in flagged] == [index.ids[1]]


def test_multigt_gallery_requires_shared_concept(backbone, corpus):
    index, tokens = corpus
    q = MultiGtQuery(query_id="q", reference_id=index.ids[0],
                     relative_caption="c", target_id=index.ids[1],
                     ground_truth_ids={index.ids[1]})
    with pytest.raises(InputError):
        build_multigt_gallery(q, index, Inverter(token_cache=tokens), backbone)


def test_inverter_prefers_cache_then_network(backbone, corpus):
    index, tokens = corpus
    from zscir.inversion_net import PhiNetwork
    phi = PhiNetwork(backbone.embed_dim, backbone.token_dim, seed=0)
    inv = Inverter(token_cache={"a": np.ones(backbone.token_dim)}, phi=phi)
    cached = inv.token_for("a", index.vector(index.ids[0]))
    assert torch.equal(cached, torch.ones(backbone.token_dim))
    predicted = inv.token_for("b", index.vector(index.ids[0]))
    assert predicted.shape == (backbone.token_dim,)
    with pytest.raises(InputError):
        Inverter()
    with pytest.raises(InputError):
        Inverter(token_cache={}).token_for("b", index.vector(index.ids[0]))


def test_ground_truths_union_target_and_advance_phase(store):
    rec = _make_query(store)
    ids = store.index.ids
    store.apply("ann2", "record_ground_truths", {
        "query_id": rec.query_id, "version": rec.version,
        "ground_truth_ids": [ids[2], ids[3]]})
    rec = store.queries[rec.query_id]
    assert rec.ground_truth_ids == {ids[1], ids[2], ids[3]}
    assert rec.phase == "aspects"


def test_ground_truths_reject_reference_and_unknown_ids(store):
    rec = _make_query(store)
    with pytest.raises(InputError):
        store.apply("a", "record_ground_truths", {
            "query_id": rec.query_id, "ground_truth_ids": [rec.reference_id]})
    with pytest.raises(InputError):
        store.apply("a", "record_ground_truths", {
            "query_id": rec.query_id, "ground_truth_ids": ["ghost"]})


def test_stale_version_is_rejected(store):
    rec = _make_query(store)
    with pytest.raises(ConflictError):
        store.apply("a", "record_ground_truths", {
            "query_id": rec.query_id, "version": rec.version + 1,
            "ground_truth_ids": []})


def test_phase_gating(store):
    rec = _make_query(store)
    with pytest.raises(PhaseError):
        store.apply("a", "submit_aspect_votes", {
            "query_id": rec.query_id, "aspects": ["addition"]})
    store.apply("a", "record_ground_truths", {
        "query_id": rec.query_id, "ground_truth_ids": []})
    with pytest.raises(PhaseError):
        store.apply("a", "record_ground_truths", {
            "query_id": rec.query_id, "ground_truth_ids": []})
    with pytest.raises(PhaseError):
        store.multigt_gallery(rec.query_id)


# -- phase 3: majority voting ------------------------------------------


def test_majority_three_of_five_kept():
    votes = {f"a{i}": {A.ADDITION} for i in range(3)}
    votes.update({f"b{i}": set() for i in range(2)})
    assert finalize_aspects(votes) == {A.ADDITION}


def test_majority_two_of_five_dropped():
    votes = {f"a{i}": {A.NEGATION} for i in range(2)}
    votes.update({f"b{i}": set() for i in range(3)})
    assert finalize_aspects(votes) == set()


def test_majority_one_of_two_kept():
    votes = {"a": {A.VIEWPOINT}, "b": set()}
    assert finalize_aspects(votes) == {A.VIEWPOINT}
    with pytest.raises(InputError):
        finalize_aspects({})


def test_revote_replaces_previous_ballot(store):
    rec = _make_query(store)
    store.apply("x", "record_ground_truths", {
        "query_id": rec.query_id, "ground_truth_ids": []})
    store.apply("voter", "submit_aspect_votes", {
        "query_id": rec.query_id, "aspects": ["addition", "negation"]})
    store.apply("voter", "submit_aspect_votes", {
        "query_id": rec.query_id, "aspects": ["viewpoint"]})
    store.apply("x", "finalize_aspects", {"query_id": rec.query_id})
    assert store.queries[rec.query_id].final_aspects == {A.VIEWPOINT}


# -- event sourcing ------------------------------------------------------


def _full_session(store):
    ids = store.index.ids
    rec = _make_query(store)
    store.apply("ann2", "record_ground_truths", {
        "query_id": rec.query_id, "version": 0,
        "ground_truth_ids": [ids[4]]})
    for voter, marked in (("v1", ["addition"]), ("v2", ["addition"]),
                          ("v3", [])):
        store.apply(voter, "submit_aspect_votes", {
            "query_id": rec.query_id, "aspects": marked})
    store.apply("lead", "finalize_aspects", {"query_id": rec.query_id})
    return rec.query_id


def test_replay_rebuilds_identical_state(store):
    qid = _full_session(store)
    clone = store.replay()
    assert clone.queries.keys() == store.queries.keys()
    for key in store.queries:
        assert clone.queries[key] == store.queries[key]
    assert clone.skipped == store.skipped
    assert clone.completed_refs == store.completed_refs
    assert clone.queries[qid].final_aspects == {A.ADDITION}


def test_export_produces_valid_dataset(store):
    _full_session(store)
    out = store.export()
    assert len(out) == 1
    q = out[0]
    assert isinstance(q, MultiGtQuery)
    assert q.target_id in q.ground_truth_ids


# -- HTTP API --------------------------------------------------------------


@pytest.fixture()
def client(store):
    from fastapi.testclient import TestClient
    return TestClient(create_app(store))


AUTH = {"Authorization": "Bearer ann-1"}


def test_api_requires_annotator_identity(client):
    r = client.post("/triplet", json={"reference_id": "x"})
    assert r.status_code == 401


def test_api_full_three_phase_flow(client, store):
    ids = store.index.ids
    r = client.get("/next-reference")
    assert r.status_code == 200 and r.json()["reference_id"]
    ref = r.json()["reference_id"]

    r = client.get(f"/gallery/target/{ref}")
    assert r.status_code == 200
    assert r.json()["caption_prefix"] == CAPTION_PREFIX
    target = r.json()["candidates"][0]["image_id"]

    r = client.post("/triplet", headers=AUTH, json={
        "reference_id": ref, "target_id": target,
        "shared_concept": "dog", "relative_caption": "is running",
        "caption_rule_confirmed": True})
    assert r.status_code == 200
    qid = r.json()["query_id"]

    r = client.get(f"/gallery/multigt/{qid}")
    assert r.status_code == 200
    extra = [c["image_id"] for c in r.json()["candidates"]
             if c["image_id"] not in (ref, target)][:2]

    r = client.post("/ground-truths", headers=AUTH, json={
        "query_id": qid, "version": 0, "ground_truth_ids": extra})
    assert r.status_code == 200
    assert r.json()["ground_truth_count"] == 3

    for voter, marked in (("v1", ["addition"]), ("v2", ["addition"])):
        r = client.post("/aspect-votes",
                        headers={"Authorization": f"Bearer {voter}"},
                        json={"query_id": qid, "aspects": marked})
        assert r.status_code == 200

    r = client.post(f"/finalize/{qid}", headers=AUTH)
    assert r.status_code == 200
    assert r.json()["aspects"] == ["addition"]

    r = client.get("/export")
    assert r.status_code == 200
    [q] = r.json()["queries"]
    assert q["query_id"] == qid and target in q["ground_truth_ids"]
    assert ids  # corpus unchanged


def test_api_version_conflict_is_409(client, store):
    ids = store.index.ids
    r = client.post("/triplet", headers=AUTH, json={
        "reference_id": ids[0], "target_id": ids[1],
        "shared_concept": "dog", "relative_caption": "c"})
    qid = r.json()["query_id"]
    r = client.post("/ground-truths", headers=AUTH, json={
        "query_id": qid, "version": 99, "ground_truth_ids": []})
    assert r.status_code == 409


def test_api_phase_violation_is_409_and_bad_input_422(client, store):
    ids = store.index.ids
    r = client.post("/triplet", headers=AUTH, json={
        "reference_id": ids[0], "target_id": ids[0],
        "shared_concept": "dog", "relative_caption": "c"})
    assert r.status_code == 422
    r = client.post("/triplet", headers=AUTH, json={
        "reference_id": ids[0], "target_id": ids[1],
        "shared_concept": "dog", "relative_caption": "c"})
    qid = r.json()["query_id"]
    r = client.post(f"/finalize/{qid}", headers=AUTH)
    assert r.status_code == 409  # still in the multi-GT phase


def test_api_skip_flow(client):
    r = client.get("/next-reference")
    ref = r.json()["reference_id"]
    r = client.post("/triplet", headers=AUTH,
                    json={"action": "skip", "reference_id": ref})
    assert r.status_code == 200
    assert r.json()["skipped"] == ref
    assert r.json()["next_reference"] != ref


def test_api_aspect_rules(client):
    r = client.get("/aspect-rules")
    assert len(r.json()["aspects"]) == 9


def test_twelve_supercategories():
    assert len(SUPERCATEGORIES) == 12
