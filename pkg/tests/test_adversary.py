import itertools
import math

import numpy as np
import pytest
import torch

from ntklab import io
from ntklab.adversary import (
    AdversarialBatch,
    PgdConfig,
    adversarial_accuracy,
    attack_dataset,
    parse_epsilon,
    pgd_attack,
)
from ntklab.dynamics import DynamicsModel, accuracy
from ntklab.engine import ParamVector
from ntklab.harness.data import gen_blobs
from ntklab.models import Architecture, ModelSnapshot, init

from conftest import random_stats


def linear_model(w_diff, bias=0.0):
    """Two-logit linear classifier whose margin for class 1 is w_diff . x + bias."""
    d = len(w_diff)
    arch = Architecture.mlp(d, 2, widths=())
    w = torch.zeros(2, d, dtype=torch.float64)
    w[1] = torch.as_tensor(w_diff, dtype=torch.float64)
    b = torch.tensor([0.0, bias], dtype=torch.float64)
    return DynamicsModel(arch, params=ParamVector({"head.weight": w, "head.bias": b}))


def test_parse_epsilon():
    assert parse_epsilon("4/255") == 4 / 255
    assert parse_epsilon("8/255") == 8 / 255
    assert parse_epsilon("2/100") == 0.02
    assert parse_epsilon(0.1) == 0.1
    with pytest.raises(ValueError):
        parse_epsilon("0")


def test_config_defaults_and_validation():
    cfg = PgdConfig()
    assert cfg.epsilon == 4 / 255 and cfg.steps == 100
    assert cfg.step_size == pytest.approx(2 * cfg.epsilon / 100)
    assert PgdConfig.for_training().steps == 20
    assert PgdConfig(alpha=0.5).step_size == 0.5
    for bad in ({"epsilon": 0}, {"steps": 0}, {"alpha": -1.0}):
        with pytest.raises(ValueError):
            PgdConfig(**bad)


@pytest.mark.parametrize("seed", range(3))
def test_ball_and_range_constraints(seed):
    arch = Architecture.mlp(6, 3, widths=(10,), batch_norm=True)
    params, _ = init(arch, seed)
    model = DynamicsModel(arch, params=params, stats=random_stats(arch, seed), bn_policy="frozen")
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(0, 1, (20, 6)), np.zeros((2, 6)), np.ones((2, 6))])
    y = rng.integers(0, 3, len(x))
    cfg = PgdConfig(epsilon=8 / 255, steps=10)
    adv = pgd_attack(model, x, y, cfg, seed)
    assert adv.linf() <= cfg.epsilon + 1e-9
    assert float(adv.perturbed.min()) >= 0.0 and float(adv.perturbed.max()) <= 1.0


def test_determinism(tiny_mlp):
    arch, params, stats, x = tiny_mlp
    model = DynamicsModel(arch, params=params)
    cfg = PgdConfig(epsilon=0.05, steps=5)
    a = pgd_attack(model, x, [0, 1, 2, 0, 1], cfg, 3)
    b = pgd_attack(model, x, [0, 1, 2, 0, 1], cfg, 3)
    c = pgd_attack(model, x, [0, 1, 2, 0, 1], cfg, 4)
    assert torch.equal(a.perturbed, b.perturbed)
    assert not torch.equal(a.perturbed, c.perturbed)


def test_tiny_epsilon_without_random_start(tiny_mlp):
    arch, params, stats, x = tiny_mlp
    model = DynamicsModel(arch, params=params)
    cfg = PgdConfig(epsilon=1e-300, steps=3, random_init=False)
    adv = pgd_attack(model, x, [0, 1, 2, 0, 1], cfg)
    assert torch.allclose(adv.perturbed, x, rtol=0, atol=1e-299)
    labels = [0, 1, 2, 0, 1]
    assert adversarial_accuracy(model, x, labels, cfg) == accuracy(model, x, labels)


def test_constant_model_keeps_random_start():
    arch = Architecture.mlp(4, 2, widths=(5,))
    params, _ = init(arch, 0)
    params = ParamVector({**params.tensors, "head.weight": torch.zeros(2, 5, dtype=torch.float64)})
    model = DynamicsModel(arch, params=params)
    x = torch.tensor(np.random.default_rng(1).uniform(0, 1, (6, 4)))
    cfg = PgdConfig(epsilon=0.1, steps=7)
    adv = pgd_attack(model, x, [0, 1] * 3, cfg, seed=11)
    noise = np.random.default_rng(11).uniform(-0.1, 0.1, size=(6, 4))
    assert torch.equal(adv.perturbed, torch.clamp(x + torch.tensor(noise), 0, 1))


@pytest.mark.parametrize("random_init", [False, True])
def test_linear_model_reaches_closed_form_worst_case(random_init):
    rng = np.random.default_rng(0)
    w = rng.standard_normal(8)
    model = linear_model(w)
    x = torch.tensor(rng.uniform(0, 1, (12, 8)))
    y = torch.tensor(rng.integers(0, 2, 12))
    eps = 0.07
    adv = pgd_attack(model, x, y, PgdConfig(epsilon=eps, steps=50, random_init=random_init), 5)
    # the attack lowers the true-class margin: move against sign(w) for y=1, along it for y=0
    direction = torch.tensor(np.sign(w))[None, :] * torch.where(y[:, None] == 1, -1.0, 1.0)
    expected = torch.clamp(x + eps * direction, torch.clamp(x - eps, 0, 1), torch.clamp(x + eps, 0, 1))
    expected = torch.clamp(expected, 0, 1)
    assert torch.allclose(adv.perturbed, expected, rtol=0, atol=1e-12)


def test_linear_model_matches_exhaustive_corner_search():
    rng = np.random.default_rng(3)
    d = 10
    w = rng.standard_normal(d)
    bias = -0.5 * float(w.sum())
    model = linear_model(w, bias)
    x = rng.uniform(0, 1, (40, d))
    y = (x @ w + bias > 0).astype(int)
    eps = 0.08
    corners = np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
    robust = []
    for xi, yi in zip(x, y):
        cand = np.clip(xi + eps * corners, 0, 1)
        margins = cand @ w + bias
        robust.append(bool((margins > 0).all()) if yi == 1 else bool((margins <= 0).all()))
    brute = float(np.mean(robust))
    pgd = adversarial_accuracy(model, x, y, PgdConfig(epsilon=eps, steps=40), seed=0)
    assert pgd == brute
    assert 0.0 < brute < 1.0


def test_untrained_model_adversarial_accuracy_bound():
    data = gen_blobs(400, 8, num_classes=4, dim=16, seed=2)
    arch = Architecture.mlp(16, 4, widths=(64,))
    params, _ = init(arch, 2)
    model = DynamicsModel(arch, params=params)
    acc = adversarial_accuracy(model, data.x_train, data.y_train, PgdConfig(epsilon=8 / 255, steps=10), seed=0)
    n, p = len(data.y_train), 0.25
    assert acc <= p + 2.576 * math.sqrt(p * (1 - p) / n)


def test_monotone_budget():
    data = gen_blobs(200, 8, num_classes=2, dim=16, margin=0.4, std=0.15, seed=4)
    arch = Architecture.mlp(16, 2, widths=(32,))
    params, _ = init(arch, 4)
    model = DynamicsModel(arch, params=params)
    for _ in range(30):
        model.sgd_step(data.x_train, data.y_train, lr=0.1, momentum=0.9)
    accs = [
        adversarial_accuracy(model, data.x_train, data.y_train, PgdConfig(epsilon=e, steps=10), seed=1)
        for e in (1 / 255, 4 / 255, 16 / 255)
    ]
    n = len(data.y_train)
    for a1, a2 in zip(accs, accs[1:]):
        assert a2 <= a1 + 2 * math.sqrt(max(a1 * (1 - a1), 1e-12) / n)
    assert accs[-1] < accs[0]


@pytest.mark.parametrize("kind", ["linearized", "centered"])
def test_attack_gradient_through_tangent_model(kind):
    arch = Architecture.mlp(4, 3, widths=(6,), batch_norm=True)
    params, _ = init(arch, 1)
    snap = ModelSnapshot.capture(arch, params, random_stats(arch, 1), 0)
    model = DynamicsModel.from_snapshot(snap, kind)
    g = torch.Generator().manual_seed(0)
    model.params = model.params + model.params.map(lambda t: 0.3 * torch.randn(t.shape, generator=g, dtype=torch.float64))
    x = torch.tensor(np.random.default_rng(2).uniform(0, 1, (3, 4)))
    labels = torch.tensor([0, 2, 1])
    _, grad = model.loss_input_grad(x, labels)
    h = 1e-5
    fd = torch.empty_like(x)
    for i in range(x.numel()):
        up, dn = x.clone().reshape(-1), x.clone().reshape(-1)
        up[i] += h
        dn[i] -= h
        lu = model.loss_input_grad(up.reshape(x.shape), labels)[0]
        ld = model.loss_input_grad(dn.reshape(x.shape), labels)[0]
        fd.reshape(-1)[i] = (lu - ld) / (2 * h)
    assert torch.allclose(grad, fd, rtol=1e-5, atol=1e-9)


def test_attack_dataset_batches_share_stream(tiny_mlp):
    arch, params, stats, x = tiny_mlp
    model = DynamicsModel(arch, params=params)
    labels = [0, 1, 2, 0, 1]
    cfg = PgdConfig(epsilon=0.05, steps=3)
    a = attack_dataset(model, x, labels, cfg, seed=2, batch_size=2)
    b = attack_dataset(model, x, labels, cfg, seed=2, batch_size=2)
    assert torch.equal(a.perturbed, b.perturbed)
    assert a.perturbed.shape == x.shape and a.linf() <= 0.05 + 1e-9


def test_out_of_range_inputs_rejected(tiny_mlp):
    arch, params, stats, x = tiny_mlp
    with pytest.raises(ValueError):
        pgd_attack(DynamicsModel(arch, params=params), x + 2, [0] * 5, PgdConfig())


def test_adversarial_accuracy_empty(tiny_mlp):
    arch, params, stats, x = tiny_mlp
    with pytest.raises(ValueError):
        adversarial_accuracy(DynamicsModel(arch, params=params), x[:0], [], PgdConfig())


def test_batch_roundtrip_and_grid(tmp_path):
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.uniform(0, 1, (5, 3, 4, 4)))
    batch = AdversarialBatch(x, torch.clamp(x + 0.01, 0, 1), torch.tensor([0, 1, 0, 1, 1]), {"kind": "standard", "epoch": 3})
    back = AdversarialBatch.load(batch.save(tmp_path / "adv.bin", "abc"))
    assert torch.equal(back.perturbed, batch.perturbed) and torch.equal(back.labels, batch.labels)
    assert back.generator_tag == {"kind": "standard", "epoch": 3}
    grid = io.read_netpbm(batch.dump_grid(tmp_path / "grid.ppm", ncols=2))
    assert grid.shape == (3, 12, 8)
