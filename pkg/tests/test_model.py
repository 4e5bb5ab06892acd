"""Model assembly, end-to-end gradients, training loop, and checkpoints."""

import numpy as np
import pytest

from nocguard.dataset import Dataset, SpatioTemporalGraph
from nocguard.errors import ConfigError, IOFormatError
from nocguard.model import (Model, ModelConfig, TrainConfig, build_model,
                            evaluate_loss, load_checkpoint, save_checkpoint,
                            train)
from nocguard.nncore import max_relative_error, numeric_gradient, weighted_bce
from nocguard.topology import adjacency_matrix, build_mesh_2d

TINY = ModelConfig(series_len=24, in_channels=2, conv_channels=(3, 4),
                   conv_kernels=(3, 3), conv_strides=(1, 1),
                   pool_kernels=(2, 2), pool_strides=(2, 2),
                   conv_dropout=0.0, graph_widths=(5,),
                   fc_widths=(6, 1), fc_dropout=0.0, dtype="f64")


def ring_adjacency(n, dtype=np.float64):
    a = np.zeros((n, n), dtype=dtype)
    for i in range(n):
        a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1.0
    return a


def synthetic_dataset(n_graphs=12, n=4, l=24, seed=0):
    """Separable toy task: malicious nodes carry a lower-delay channel."""
    gen = np.random.default_rng(seed)
    a = ring_adjacency(n, np.float32)
    graphs = []
    for i in range(n_graphs):
        x = gen.uniform(0.6, 1.0, size=(n, 2, l)).astype(np.float32)
        labels = np.zeros(n, dtype=np.uint8)
        if i % 2:
            mip = int(gen.integers(n))
            labels[mip] = 1
            x[mip, 0] = gen.uniform(0.0, 0.2, size=l)
        graphs.append(SpatioTemporalGraph(a, x, labels, int(labels.any())))
    idx = np.arange(n_graphs)
    return Dataset(graphs, idx[:-2], idx[-2:], (0.6, 2.0), None, l, 0)


def test_default_temporal_trace_and_flat_width():
    cfg = ModelConfig()
    assert cfg.temporal_trace() == [400, 396, 392, 383, 190, 181, 89, 40, 18]
    assert cfg.flat_width() == 576


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(conv_kernels=(5, 10)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(series_len=10).validate()
    with pytest.raises(ConfigError):
        ModelConfig(fc_widths=(40, 2)).validate()


def test_forward_shape_and_range():
    net = build_model(TINY, seed=1)
    a = ring_adjacency(5)
    x = np.random.default_rng(0).random((3, 5, 2, 24))
    scores = net.forward(x, a)
    assert scores.shape == (3, 5)
    assert float(scores.min()) > 0.0 and float(scores.max()) < 1.0


def test_seeded_init_deterministic():
    p1 = build_model(TINY, seed=7).parameters()
    p2 = build_model(TINY, seed=7).parameters()
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    p3 = build_model(TINY, seed=8).parameters()
    assert any(not np.array_equal(p1[k], p3[k]) for k in p1)


def test_model_end_to_end_gradients():
    # finite differences through conv, pool, graphconv, and fc stages at once
    net = build_model(TINY, seed=3)
    gen = np.random.default_rng(3)
    a = ring_adjacency(4)
    x = gen.random((2, 4, 2, 24))
    y = (gen.random((2, 4)) < 0.3).astype(np.float64)

    def loss():
        return weighted_bce(net.forward(x, a), y, (0.7, 4.0))[0]

    worst = 0.0
    params = net.parameters()
    grads_cache = {}
    p = net.forward(x, a)
    _, dp = weighted_bce(p, y, (0.7, 4.0))
    net.backward(dp)
    analytic = {k: v.copy() for k, v in net.gradients().items()}
    gen2 = np.random.default_rng(99)
    for name, arr in params.items():
        flat = arr.reshape(-1)
        picks = gen2.choice(flat.size, size=min(6, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            eps = 1e-5
            flat[i] = orig + eps
            hi = loss()
            flat[i] = orig - eps
            lo = loss()
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            ana = analytic[name].reshape(-1)[i]
            worst = max(worst, max_relative_error(np.array([ana]),
                                                  np.array([num])))
    assert worst < 1e-4


def test_train_learns_separable_task():
    ds = synthetic_dataset()
    net = build_model(TINY, seed=1)
    tc = TrainConfig(batch_size=4, lr=0.01, max_epochs=60, val_fraction=0.25,
                     seed=1)
    net, hist = train(net, ds, tc)
    assert hist[0]["train_loss"] > hist[-1]["train_loss"]
    assert net.meta["epochs_run"] == len(hist)
    assert net.meta["best_val_loss"] is not None
    final = evaluate_loss(net, ds, ds.train_idx, ds.class_weights)
    assert final < 0.25


def test_train_history_records_lr():
    ds = synthetic_dataset()
    net = build_model(TINY, seed=2)
    net, hist = train(net, ds, TrainConfig(batch_size=4, lr=0.01,
                                           max_epochs=3, val_fraction=0.25,
                                           seed=2))
    assert all(h["lr"] == 0.01 for h in hist)
    assert [h["epoch"] for h in hist] == list(range(len(hist)))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0).validate()


def test_checkpoint_round_trip_bit_identical(tmp_path):
    net = build_model(TINY, seed=5)
    net.meta["epochs_run"] = 12
    path = tmp_path / "m.ngck"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.cfg == net.cfg
    assert back.meta["epochs_run"] == 12
    p1, p2 = net.parameters(), back.parameters()
    assert set(p1) == set(p2)
    for k in p1:
        assert p1[k].dtype == p2[k].dtype
        assert np.array_equal(p1[k], p2[k])
    a = ring_adjacency(5)
    x = np.random.default_rng(1).random((4, 5, 2, 24))
    assert np.array_equal(net.forward(x, a), back.forward(x, a))


def test_checkpoint_corruption_detected(tmp_path):
    net = build_model(TINY, seed=5)
    path = tmp_path / "m.ngck"
    save_checkpoint(net, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(IOFormatError):
        load_checkpoint(path)


def test_checkpoint_truncation_detected(tmp_path):
    net = build_model(TINY, seed=5)
    path = tmp_path / "m.ngck"
    save_checkpoint(net, path)
    path.write_bytes(path.read_bytes()[:-20])
    with pytest.raises(IOFormatError):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ngck"
    path.write_bytes(b"ZZZZ" + b"\x00" * 40)
    with pytest.raises(IOFormatError):
        load_checkpoint(path)


def test_permutation_equivariance_unit():
    net = build_model(TINY, seed=6)
    gen = np.random.default_rng(6)
    n = 6
    a = ring_adjacency(n)
    x = gen.random((1, n, 2, 24))
    base = net.forward(x, a)[0]
    for _ in range(5):
        perm = gen.permutation(n)
        scores = net.forward(x[:, perm], a[np.ix_(perm, perm)])[0]
        assert np.max(np.abs(scores - base[perm])) < 1e-8
