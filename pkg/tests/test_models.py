import hashlib

import numpy as np
import pytest
import torch

from ntklab import engine
from ntklab.models import Architecture, ArchitectureMismatch, ModelSnapshot, init, predict_class


def test_init_is_deterministic_per_seed():
    arch = Architecture.mlp(8, 3, widths=(16,))
    a, _ = init(arch, 11)
    b, _ = init(arch, 11)
    c, _ = init(arch, 12)
    assert a.equal(b)
    assert not a.equal(c)


def test_batchnorm_init_values():
    arch = Architecture.small_cnn((3, 8, 8), 2)
    params, stats = init(arch, 0)
    for layer, role, t in params.segments():
        if role == "gamma":
            assert torch.equal(t, torch.ones_like(t))
        if role in ("beta", "bias"):
            assert torch.count_nonzero(t) == 0
    for k, v in stats.items():
        assert torch.equal(v, torch.zeros_like(v) if k.endswith(".mean") else torch.ones_like(v))


def test_he_scaling_of_weight_variance():
    arch = Architecture.small_cnn((3, 8, 8), 10)
    params, _ = init(arch, 3)
    checked = 0
    for layer, role, t in params.segments():
        if role == "weight" and t.numel() >= 1000:
            fan_in = int(np.prod(t.shape[1:]))
            assert float(t.var()) == pytest.approx(2.0 / fan_in, rel=0.2)
            checked += 1
    assert checked >= 2


def test_default_architectures():
    mlp = Architecture.mlp(16, 2)
    assert mlp.widths == (256, 256)
    cnn = Architecture.small_cnn((3, 32, 32), 2)
    kinds = [layer.kind for layer in cnn.graph]
    assert kinds == ["conv2d", "batchnorm", "relu"] * 3 + ["gap", "dense"]
    assert cnn.widths == (16, 32, 64)


def test_snapshot_roundtrip_bit_identical(tmp_path, tiny_cnn_snapshot):
    snap = tiny_cnn_snapshot
    x = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    path = snap.save(tmp_path / "a.ntksnap")
    back = ModelSnapshot.load(path)
    p0, s0 = snap.restore()
    p1, s1 = back.restore()
    assert p0.equal(p1)
    assert all(torch.equal(s0[k], s1[k]) for k in s0)
    assert back.spawn_epoch == 3 and back.tag == "benign"
    assert torch.equal(engine.forward(snap.arch.graph, p0, x, s0), engine.forward(back.arch.graph, p1, x, s1))


def test_snapshot_file_bytes_stable(tmp_path, tiny_cnn_snapshot):
    a = tiny_cnn_snapshot.save(tmp_path / "a.ntksnap").read_bytes()
    b = tiny_cnn_snapshot.save(tmp_path / "b.ntksnap").read_bytes()
    assert hashlib.sha256(a).digest() == hashlib.sha256(b).digest()


def test_snapshot_float32_roundtrip(tiny_cnn_snapshot):
    arch = tiny_cnn_snapshot.arch
    p32, s32 = tiny_cnn_snapshot.restore(torch.float32)
    snap = ModelSnapshot.capture(arch, p32, s32, 0)
    assert snap.restore(torch.float32)[0].equal(p32)


def test_restore_architecture_mismatch(tiny_cnn_snapshot):
    with pytest.raises(ArchitectureMismatch):
        tiny_cnn_snapshot.restore(arch=Architecture.mlp(16, 2))


def test_snapshot_rejects_bad_variance(tiny_cnn_snapshot):
    p, s = tiny_cnn_snapshot.restore()
    s["bn0.var"] = torch.zeros_like(s["bn0.var"])
    with pytest.raises(ValueError):
        ModelSnapshot.capture(tiny_cnn_snapshot.arch, p, s, 0)


def test_snapshot_is_insulated_from_live_updates(tiny_cnn_snapshot):
    p, s = tiny_cnn_snapshot.restore()
    snap = ModelSnapshot.capture(tiny_cnn_snapshot.arch, p, s, 1)
    p.tensors["head.weight"].add_(1.0)
    assert not snap.params.equal(p)


def test_predict_class_rules():
    assert int(predict_class(torch.tensor([0.1, 0.9]))) == 1
    assert int(predict_class(torch.tensor([0.5, 0.5, 0.5]))) == 0
    assert predict_class(torch.tensor([[1.0, 3.0, 3.0], [2.0, 2.0, 1.0]])).tolist() == [1, 0]
    with pytest.raises(ValueError):
        predict_class(torch.tensor([]))


def test_predict_class_matches_scan():
    rng = np.random.default_rng(0)
    z = rng.integers(-2, 3, size=(200, 5)).astype(float)
    expected = []
    for row in z:
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        expected.append(best)
    assert predict_class(torch.tensor(z)).tolist() == expected
