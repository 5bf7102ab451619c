import numpy as np
import pytest
import torch

from ntklab import engine
from ntklab.models import Architecture, ModelSnapshot, init

torch.set_num_threads(1)


def fd_param_grad(graph, params, x, cot, stats=None, h=1e-4, train=False):
    """Central finite differences of <cot, f(theta, x)> over every parameter coordinate."""
    flat = params.flatten().clone()
    cot = torch.as_tensor(cot, dtype=torch.float64)
    out = torch.empty_like(flat)
    for i in range(flat.numel()):
        up, dn = flat.clone(), flat.clone()
        up[i] += h
        dn[i] -= h
        fu = engine.forward(graph, params.unflatten(up), x, stats, train=train)
        fd = engine.forward(graph, params.unflatten(dn), x, stats, train=train)
        out[i] = ((fu - fd) * cot).sum() / (2 * h)
    return out


def fd_input_grad(graph, params, x, cot, stats=None, h=1e-4):
    x = torch.as_tensor(x, dtype=torch.float64)
    flat = x.reshape(-1)
    out = torch.empty_like(flat)
    for i in range(flat.numel()):
        up, dn = flat.clone(), flat.clone()
        up[i] += h
        dn[i] -= h
        fu = engine.forward(graph, params, up.reshape(x.shape), stats)
        fd = engine.forward(graph, params, dn.reshape(x.shape), stats)
        out[i] = ((fu - fd) * cot).sum() / (2 * h)
    return out.reshape(x.shape)


def rel_close(a, b, rtol=1e-5, atol=1e-10):
    """Per-coordinate |a - b| <= rtol * max(|a|, |b|) + atol."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    return bool(((a - b).abs() <= rtol * torch.maximum(a.abs(), b.abs()) + atol).all())


def random_stats(arch, seed):
    rng = np.random.default_rng(seed)
    _, stats = init(arch, seed)
    return {
        k: torch.tensor(
            rng.normal(0, 0.3, v.shape) if k.endswith(".mean") else rng.uniform(0.5, 2.0, v.shape),
            dtype=torch.float64,
        )
        for k, v in stats.items()
    }


def random_instance(seed):
    """A small randomized MLP or CNN with its inputs (64-bit)."""
    rng = np.random.default_rng(seed)
    if seed % 2 == 0:
        d = int(rng.integers(3, 7))
        arch = Architecture.mlp(d, int(rng.integers(2, 4)), widths=(int(rng.integers(4, 9)),) * int(rng.integers(1, 3)),
                                batch_norm=bool(rng.integers(0, 2)))
        x = torch.tensor(rng.uniform(0, 1, (3, d)))
    else:
        arch = Architecture.small_cnn((2, 5, 5), 2, channels=(3, 4))
        x = torch.tensor(rng.uniform(0, 1, (2, 2, 5, 5)))
    params, _ = init(arch, seed)
    # perturb biases/BN shift so nothing sits at a symmetric point
    params = params.map(lambda t: t + 0.1 * torch.tensor(rng.standard_normal(t.shape)))
    return arch, params, random_stats(arch, seed), x


@pytest.fixture
def tiny_mlp():
    arch = Architecture.mlp(4, 3, widths=(6, 5))
    params, stats = init(arch, 0)
    x = torch.tensor(np.random.default_rng(0).uniform(0, 1, (5, 4)))
    return arch, params, stats, x


@pytest.fixture
def tiny_cnn_snapshot():
    arch = Architecture.small_cnn((1, 4, 4), 2, channels=(3, 4))
    params, stats = init(arch, 1)
    stats = random_stats(arch, 1)
    return ModelSnapshot.capture(arch, params, stats, 3, "benign")


# -- acceptance report: one PASS/FAIL line per criterion ------------------------------

_criteria: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    key = str(marker.args[0])
    failed = report.failed or (report.when == "setup" and report.skipped)
    if report.when == "call" or failed:
        prev = _criteria.get(key, (True, item.name))
        _criteria[key] = (prev[0] and not failed, item.name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")

    def order(k):
        head = k.split("-")[0]
        return (int(head) if head.isdigit() else 99, k)

    for key in sorted(_criteria, key=order):
        ok, name = _criteria[key]
        terminalreporter.write_line(f"CRITERION {key}: {'PASS' if ok else 'FAIL'}  ({name})")
