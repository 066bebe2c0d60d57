import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from zscir import store
from zscir.cli import main
from zscir.datasets import make_circo_stats_fixture, save_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Manifest of small PNG images plus vocabulary and config files."""
    root = tmp_path_factory.mktemp("ws")
    rng = np.random.default_rng(0)
    images_dir = root / "images"
    images_dir.mkdir()
    manifest = {"root": str(images_dir), "images": []}
    for i in range(6):
        arr = (rng.random((8, 8, 3)) * 255).astype(np.uint8)
        name = f"im{i}.png"
        Image.fromarray(arr).save(images_dir / name)
        manifest["images"].append({"id": f"im{i}", "path": name})
    (root / "manifest.json").write_text(json.dumps(manifest))
    (root / "vocab.txt").write_text("dog\ncat\ncar\ntree\n")
    (root / "config.toml").write_text(
        '[backbone]\nmodel_ref = "stub:cli:64"\n'
        "[oti]\niterations = 5\nk_concepts = 2\nseed = 3\n"
        "[phi]\nepochs = 2\nbatch_size = 4\nk_concepts = 2\nseed = 3\n")
    return root


def run(*args):
    result = CliRunner().invoke(main, [str(a) for a in args])
    if result.exit_code != 0 and result.exception:
        raise result.exception
    return result


def test_pipeline_end_to_end(workspace):
    ws = workspace
    cfg = ws / "config.toml"

    r = run("phrase-gen", "--vocab", ws / "vocab.txt", "--out",
            ws / "bank.jsonl", "--count", 4, "--synthetic")
    assert json.loads(r.stdout)["concepts"] == 4

    r = run("embed-images", "--images", ws / "manifest.json",
            "--out", ws / "emb.bin", "--config", cfg)
    assert json.loads(r.stdout) == {"embedded": 6, "dim": 64}

    r = run("invert-oti", "--images", ws / "manifest.json",
            "--out", ws / "tokens.bin", "--vocab", ws / "vocab.txt",
            "--phrase-bank", ws / "bank.jsonl", "--config", cfg)
    assert json.loads(r.stdout)["inverted"] == 6
    dim, tokens = store.read_token_store(ws / "tokens.bin")
    assert dim == 64 and len(tokens) == 6

    r = run("build-index", "--embeddings", ws / "emb.bin",
            "--out", ws / "index.bin")
    assert json.loads(r.stdout) == {"indexed": 6, "dim": 64}

    (ws / "query.json").write_text(json.dumps(
        {"caption": "a photo of a dog"}))
    r = run("search", "--index", ws / "index.bin",
            "--query-json", ws / "query.json", "--k", 3, "--config", cfg)
    hits = json.loads(r.stdout)["results"]
    assert len(hits) == 3
    assert hits[0]["score"] >= hits[1]["score"] >= hits[2]["score"]

    r = run("train-phi", "--tokens", ws / "tokens.bin",
            "--embeddings", ws / "emb.bin", "--vocab", ws / "vocab.txt",
            "--phrase-bank", ws / "bank.jsonl", "--out", ws / "phi.bin",
            "--config", cfg)
    assert json.loads(r.stdout)["trained_on"] == 6

    r = run("invert", "--phi", ws / "phi.bin",
            "--image", ws / "images" / "im0.png", "--config", cfg)
    payload = json.loads(r.stdout)
    assert payload["id"] == "im0" and len(payload["token"]) == 64

    r = run("concept-assign", "--image", ws / "images" / "im0.png",
            "--vocab", ws / "vocab.txt", "--k", 2, "--config", cfg)
    assert len(json.loads(r.stdout)["concepts"]) == 2


def test_embedding_runs_are_bitwise_reproducible(workspace):
    ws = workspace
    run("embed-images", "--images", ws / "manifest.json",
        "--out", ws / "emb1.bin", "--config", ws / "config.toml")
    run("embed-images", "--images", ws / "manifest.json",
        "--out", ws / "emb2.bin", "--config", ws / "config.toml")
    assert (ws / "emb1.bin").read_bytes() == (ws / "emb2.bin").read_bytes()


def test_oti_runs_are_bitwise_reproducible(workspace):
    ws = workspace
    run("phrase-gen", "--vocab", ws / "vocab.txt", "--out", ws / "b.jsonl",
        "--count", 4, "--synthetic")
    for out in ("t1.bin", "t2.bin"):
        run("invert-oti", "--images", ws / "manifest.json",
            "--out", ws / out, "--vocab", ws / "vocab.txt",
            "--phrase-bank", ws / "b.jsonl", "--config", ws / "config.toml")
    assert (ws / "t1.bin").read_bytes() == (ws / "t2.bin").read_bytes()


def test_evaluate_command(tmp_path):
    rows = [
        {"query_id": "a", "ranked_ids": ["g1", "x", "g2", "y", "z"],
         "gts": ["g1", "g2"], "aspects": ["addition"]},
        {"query_id": "b", "ranked_ids": ["x", "y", "z", "g", "w"],
         "gts": ["g"]},
    ]
    path = tmp_path / "results.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows))
    r = run("evaluate", "--results", path, "--metric", "map", "--k", "5",
            "--by-aspect")
    report = json.loads(r.stdout)
    assert report["values"]["5"] == pytest.approx((5 / 6 + 1 / 4) / 2)
    assert report["by_aspect"]["5"]["addition"] == pytest.approx(5 / 6)
    r = run("evaluate", "--results", path, "--metric", "recall", "--k", "1,5")
    rep = json.loads(r.stdout)
    assert rep["values"]["1"] == 0.5 and rep["values"]["5"] == 1.0


def test_validate_dataset_command(tmp_path):
    good = tmp_path / "good.json"
    save_dataset(make_circo_stats_fixture(), good)
    r = run("validate-dataset", "--dataset", good, "--stats")
    payload = json.loads(r.stdout)
    assert payload["valid"] is True
    assert payload["stats"]["num_queries"] == 1020

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"queries": [
        {"query_id": "q", "reference_id": "a", "relative_caption": "c",
         "target_id": "a", "ground_truth_ids": ["a"]}]}))
    result = CliRunner().invoke(
        main, ["validate-dataset", "--dataset", str(bad)])
    assert result.exit_code == 1
    assert json.loads(result.stdout)["valid"] is False


def test_redundancy_command(workspace, tmp_path):
    ws = workspace
    run("embed-images", "--images", ws / "manifest.json",
        "--out", ws / "emb.bin", "--config", ws / "config.toml")
    run("build-index", "--embeddings", ws / "emb.bin",
        "--out", ws / "index.bin")
    ds = tmp_path / "triplets.json"
    ds.write_text(json.dumps({"queries": [
        {"query_id": "q0", "reference_id": "im0", "relative_caption": "is lit",
         "target_id": "im1", "ground_truth_ids": ["im1"]}]}))
    r = run("redundancy", "--dataset", ds, "--index", ws / "index.bin",
            "--k", "1,5", "--config", ws / "config.toml")
    curves = json.loads(r.stdout)
    assert set(curves) == {"T2I", "I2I"}


def test_search_with_raw_vector(workspace, tmp_path):
    ws = workspace
    run("embed-images", "--images", ws / "manifest.json",
        "--out", ws / "emb.bin", "--config", ws / "config.toml")
    run("build-index", "--embeddings", ws / "emb.bin",
        "--out", ws / "index.bin")
    q = tmp_path / "q.json"
    q.write_text(json.dumps({"vector": list(np.ones(64))}))
    r = run("search", "--index", ws / "index.bin", "--query-json", q, "--k", 2)
    assert len(json.loads(r.stdout)["results"]) == 2


def test_config_echo_goes_to_stderr(workspace):
    ws = workspace
    r = run("build-index", "--embeddings", ws / "emb.bin",
            "--out", ws / "index.bin") if (ws / "emb.bin").exists() else None
    if r is None:
        run("embed-images", "--images", ws / "manifest.json",
            "--out", ws / "emb.bin", "--config", ws / "config.toml")
        r = run("build-index", "--embeddings", ws / "emb.bin",
                "--out", ws / "index.bin")
    assert "resolved_config" in r.stderr
    assert "resolved_config" not in r.stdout
