import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from zscir.errors import DegenerateInputError, InputError, ParseError
from zscir.inversion_net import (PhiNetwork, PhiTrainConfig, TokenDataset,
                                 cluster_dataset, compose_batch, distil_loss,
                                 distil_loss_bruteforce, load_phi, pen_loss,
                                 phi_forward, phi_total_loss, save_phi,
                                 train_phi)


def test_network_shapes_and_determinism():
    a = PhiNetwork(16, 8, seed=3)
    b = PhiNetwork(16, 8, seed=3)
    x = torch.randn(4, 16)
    a.eval(), b.eval()
    assert torch.equal(a(x), b(x))
    assert a(x).shape == (4, 8)
    assert a.hidden1 == a.hidden2 == 32  # 4x token width by default


def test_network_rejects_wrong_input_width():
    net = PhiNetwork(16, 8)
    with pytest.raises(InputError):
        net(torch.randn(2, 17))


def test_phi_forward_is_deterministic_and_restores_mode():
    net = PhiNetwork(16, 8, dropout=0.9)
    net.train()
    x = torch.randn(16)
    assert torch.equal(phi_forward(x, net), phi_forward(x, net))
    assert net.training  # mode restored


def test_train_config_defaults():
    cfg = PhiTrainConfig()
    assert (cfg.epochs, cfg.learning_rate, cfg.batch_size, cfg.lambda_distil,
            cfg.lambda_gpt, cfg.lambda_pen, cfg.temperature, cfg.hard_fraction,
            cfg.ema_decay, cfg.k_concepts) == (
        115, 1e-4, 256, 1.0, 0.75, 3e-3, 0.25, 0.5, 0.999, 150)


def test_train_config_validation():
    with pytest.raises(InputError):
        PhiTrainConfig(temperature=0.0)
    with pytest.raises(InputError):
        PhiTrainConfig(hard_fraction=1.5)
    with pytest.raises(InputError):
        PhiTrainConfig(batch_size=0)


# -- contrastive distillation loss --------------------------------------

def test_distil_matches_bruteforce_on_random_batches():
    rng = np.random.default_rng(0)
    for _ in range(30):
        b = int(rng.integers(2, 9))
        d = int(rng.integers(3, 12))
        v_bar = torch.from_numpy(rng.normal(size=(b, d)))
        v = torch.from_numpy(rng.normal(size=(b, d)))
        fast = float(distil_loss(v_bar, v, 0.25))
        slow = distil_loss_bruteforce(v_bar, v, 0.25)
        assert fast == pytest.approx(slow, abs=1e-9)


def test_distil_orthonormal_pair_value():
    v = torch.eye(2, dtype=torch.float64)
    val = float(distil_loss(v, v, 0.25))
    # each direction: -log(e^4 / (e^4 + e^0 + e^0))
    expected = 2 * (-math.log(math.exp(4) / (math.exp(4) + 2)))
    assert val == pytest.approx(expected, abs=1e-9)
    assert val == pytest.approx(0.0720, abs=5e-4)


def test_distil_rejects_shape_mismatch_and_zero_rows():
    with pytest.raises(InputError):
        distil_loss(torch.ones(2, 3), torch.ones(3, 3), 0.25)
    with pytest.raises(DegenerateInputError):
        distil_loss(torch.zeros(2, 3), torch.ones(2, 3), 0.25)


def test_distil_is_scale_invariant_rowwise():
    rng = np.random.default_rng(1)
    v_bar = torch.from_numpy(rng.normal(size=(4, 6)))
    v = torch.from_numpy(rng.normal(size=(4, 6)))
    a = float(distil_loss(v_bar, v, 0.25))
    b = float(distil_loss(v_bar * 3.7, v * 0.2, 0.25))
    assert a == pytest.approx(b, abs=1e-9)


def test_pen_loss_is_mean_squared_norm():
    v = torch.tensor([[3.0, 4.0], [0.0, 0.0]])
    assert float(pen_loss(v)) == pytest.approx(12.5)
    with pytest.raises(InputError):
        pen_loss(torch.zeros(0, 2))


def test_total_loss_weighting():
    cfg = PhiTrainConfig(lambda_distil=1.0, lambda_gpt=0.75, lambda_pen=3e-3)
    val = phi_total_loss(torch.tensor(2.0), torch.tensor(4.0),
                         torch.tensor(100.0), cfg)
    assert float(val) == pytest.approx(2.0 + 3.0 + 0.3)


# -- clustering ----------------------------------------------------------

def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(0)
    a = rng.normal(loc=0.0, scale=0.1, size=(40, 5))
    b = rng.normal(loc=10.0, scale=0.1, size=(40, 5))
    x = np.vstack([a, b])
    assign = cluster_dataset(x, 2, seed=0)
    assert len(set(assign[:40])) == 1
    assert len(set(assign[40:])) == 1
    assert assign[0] != assign[40]


def test_kmeans_no_empty_clusters():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 4))
    assign = cluster_dataset(x, 10, seed=1)
    assert set(assign) == set(range(10))


def test_kmeans_input_validation():
    with pytest.raises(InputError):
        cluster_dataset(np.zeros((3, 2)), 0, seed=0)
    with pytest.raises(InputError):
        cluster_dataset(np.zeros((3, 2)), 4, seed=0)


def test_dataset_build_defaults_cluster_count():
    rng = np.random.default_rng(0)
    n = 300
    ds = TokenDataset.build([f"i{k}" for k in range(n)],
                            rng.normal(size=(n, 6)), rng.normal(size=(n, 4)))
    assert ds.cluster_count == math.ceil(n / 256)
    assert len(ds) == n


def test_dataset_validation():
    with pytest.raises(InputError):
        TokenDataset(["a"], np.zeros((2, 3)), np.zeros((2, 3)),
                     np.zeros(2, dtype=int), 1)
    with pytest.raises(InputError):
        TokenDataset(["a", "b"], np.zeros((2, 3)), np.zeros((2, 3)),
                     np.array([0, 5]), 2)


# -- batch composition ----------------------------------------------------

def _toy_dataset(n=60, clusters=6, seed=0):
    rng = np.random.default_rng(seed)
    return TokenDataset([f"i{k}" for k in range(n)],
                        rng.normal(size=(n, 4)).astype(np.float32),
                        rng.normal(size=(n, 4)).astype(np.float32),
                        np.arange(n) % clusters, clusters)


def test_compose_batch_hard_block_shares_one_cluster():
    ds = _toy_dataset()
    cfg = PhiTrainConfig(batch_size=10, hard_fraction=0.5)
    rng = np.random.default_rng(0)
    for _ in range(50):
        idx = compose_batch(ds, cfg, rng)
        assert len(idx) == 10 and len(set(idx)) == 10
        n_hard = math.ceil(0.5 * 10)
        hard_clusters = {ds.cluster_ids[i] for i in idx[:n_hard]}
        assert len(hard_clusters) == 1


def test_compose_batch_alpha_zero_has_no_hard_block():
    ds = _toy_dataset()
    cfg = PhiTrainConfig(batch_size=10, hard_fraction=0.0)
    idx = compose_batch(ds, cfg, np.random.default_rng(1))
    assert len(set(idx)) == 10


def test_compose_batch_falls_back_when_no_cluster_is_big_enough(caplog):
    ds = _toy_dataset(n=20, clusters=20)  # one member per cluster
    cfg = PhiTrainConfig(batch_size=10, hard_fraction=1.0)
    with caplog.at_level("WARNING"):
        idx = compose_batch(ds, cfg, np.random.default_rng(0))
    assert len(set(idx)) == 10
    assert any("falling back" in r.message for r in caplog.records)


def test_compose_batch_rejects_oversized_batch():
    ds = _toy_dataset(n=5, clusters=1)
    with pytest.raises(InputError):
        compose_batch(ds, PhiTrainConfig(batch_size=6), np.random.default_rng(0))


# -- training and checkpointing ------------------------------------------

def test_training_reduces_distillation_loss(backbone, vocab, phrase_bank):
    rng = np.random.default_rng(0)
    n = 40
    emb = np.stack([backbone.encode_image(
        rng.random((8, 8, 3), dtype=np.float32)).numpy() for _ in range(n)])
    tokens = rng.normal(size=(n, backbone.token_dim)).astype(np.float32)
    ds = TokenDataset.build([f"i{k}" for k in range(n)], emb, tokens, seed=0)
    cfg = PhiTrainConfig(epochs=20, learning_rate=1e-3, batch_size=20,
                         k_concepts=3, ema_decay=0.9, dropout=0.1, seed=0)
    log = []
    net = train_phi(ds, backbone, phrase_bank, vocab, cfg, loss_log=log)
    first = np.mean([r["distil"] for r in log[:5]])
    last = np.mean([r["distil"] for r in log[-5:]])
    assert last < first
    assert not net.training  # returned in eval mode


def test_training_is_seed_reproducible(backbone, vocab, phrase_bank):
    rng = np.random.default_rng(1)
    n = 12
    emb = rng.normal(size=(n, backbone.embed_dim)).astype(np.float32)
    tokens = rng.normal(size=(n, backbone.token_dim)).astype(np.float32)
    ds = TokenDataset.build([f"i{k}" for k in range(n)], emb, tokens, seed=0)
    cfg = PhiTrainConfig(epochs=2, batch_size=6, k_concepts=2, seed=7)
    n1 = train_phi(ds, backbone, phrase_bank, vocab, cfg)
    n2 = train_phi(ds, backbone, phrase_bank, vocab, cfg)
    x = torch.randn(backbone.embed_dim)
    assert torch.equal(phi_forward(x, n1), phi_forward(x, n2))


def test_checkpoint_round_trip(tmp_path):
    net = PhiNetwork(16, 8, seed=5)
    cfg = PhiTrainConfig(epochs=3, dropout=0.25)
    path = tmp_path / "phi.bin"
    save_phi(net, path, cfg)
    loaded, echo = load_phi(path)
    x = torch.randn(6, 16)
    net.eval()
    assert torch.equal(net(x), loaded(x))
    assert echo["epochs"] == 3 and echo["dropout"] == 0.25


def test_checkpoint_rejects_corruption(tmp_path):
    net = PhiNetwork(8, 4)
    path = tmp_path / "phi.bin"
    save_phi(net, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(ParseError):
        load_phi(path)
    save_phi(net, path)
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(ParseError):
        load_phi(path)


@settings(max_examples=25, deadline=None)
@given(b=st.integers(min_value=2, max_value=6),
       seed=st.integers(min_value=0, max_value=500))
def test_distil_loss_is_positive(b, seed):
    rng = np.random.default_rng(seed)
    v_bar = torch.from_numpy(rng.normal(size=(b, 5)))
    v = torch.from_numpy(rng.normal(size=(b, 5)))
    assert float(distil_loss(v_bar, v, 0.25)) > 0
