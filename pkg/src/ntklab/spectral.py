"""NTK eigenvector features and their input-space visualization."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.func import grad as func_grad

from . import engine, io
from .engine import ParamVector, _apply
from .models import ModelSnapshot
from .ntk import EigenSolverError, compute_ntk, symmetric_eigh

log = logging.getLogger(__name__)

# how the input gradient of the cosine objective is obtained
GRADIENT_METHOD = "exact reverse-over-reverse"


@dataclass
class EigvecFeature:
    index: int
    u: np.ndarray
    v: ParamVector
    eigenvalue: float
    class_index: int


@dataclass(frozen=True)
class VizConfig:
    iterations: int = 600
    alpha: float = 0.001
    init: float = 0.5
    direction: str = "maximize"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.direction not in ("maximize", "minimize"):
            raise ValueError("direction must be 'maximize' or 'minimize'")


@dataclass
class VizResult:
    image: torch.Tensor
    cosine: float
    initial_cosine: float
    status: str = "ok"
    method: str = GRADIENT_METHOD


def extract_eigvec_features(snapshot: ModelSnapshot, samples, class_index: int, top_k: int,
                            *, kernel: np.ndarray | None = None, rank_tol: float = 1e-10) -> list[EigvecFeature]:
    """Top-k eigenvectors u_i of the class kernel and their parameter-space images J^T u_i.

    ``J^T u_i`` is one reverse pass of the weighted sum u_i^T f_c(X); each v_i
    is scaled to unit norm.
    """
    x = torch.as_tensor(samples).to(torch.float64)
    n = len(x)
    if not 1 <= top_k <= n:
        raise ValueError(f"top_k must lie in [1, {n}]")
    if kernel is None:
        kernel = compute_ntk(snapshot, x, class_indices=[class_index]).diag(0)
    w, U = symmetric_eigh(kernel)
    if w[top_k - 1] <= rank_tol * max(w[0], 0.0):
        raise EigenSolverError(f"requested {top_k} eigenvectors but kernel rank is lower")
    params, stats = snapshot.restore(torch.float64)
    C = snapshot.arch.num_classes
    features = []
    for i in range(top_k):
        cot = torch.zeros(n, C, dtype=torch.float64)
        cot[:, class_index] = torch.from_numpy(U[:, i].copy())
        v = engine.grad(snapshot.arch.graph, params, x, cot, stats)
        features.append(EigvecFeature(i, U[:, i].copy(), v * (1.0 / float(v.norm())), float(w[i]), class_index))
    return features


def feature_map(snapshot: ModelSnapshot, x, class_index: int) -> torch.Tensor:
    """phi(x) = d f_c(x) / d theta for one input, flattened."""
    params, stats = snapshot.restore(torch.float64)
    graph = snapshot.arch.graph
    g = func_grad(lambda p: _apply(graph, p, x[None], stats, False, False)[0][0, class_index])(params.tensors)
    return torch.cat([g[k].reshape(-1) for k in params.tensors])


def _cosine_fn(snapshot: ModelSnapshot, v: torch.Tensor, class_index: int):
    params, stats = snapshot.restore(torch.float64)
    graph = snapshot.arch.graph
    v = v / v.norm()

    def cos(x):
        g = func_grad(lambda p: _apply(graph, p, x[None], stats, False, False)[0][0, class_index])(params.tensors)
        phi = torch.cat([g[k].reshape(-1) for k in params.tensors])
        return phi @ v / phi.norm()

    return cos


def visualize_eigvec(snapshot: ModelSnapshot, feature: EigvecFeature, cfg: VizConfig = VizConfig()) -> VizResult:
    """Signed-gradient ascent (or descent) on cos(v, phi(x)) from a grey image, clipped to [0, 1]."""
    shape = snapshot.arch.input_shape
    x = torch.full(shape, cfg.init, dtype=torch.float64)
    cos = _cosine_fn(snapshot, feature.v.flatten().to(torch.float64), feature.class_index)
    step = cfg.alpha if cfg.direction == "maximize" else -cfg.alpha
    cos_grad = func_grad(cos)

    def value(xx):
        with torch.no_grad():
            return float(cos(xx))

    initial = value(x)
    if not np.isfinite(initial):
        log.warning("feature norm vanished at the initial image")
        return VizResult(x, initial, initial, status="zero-feature")
    for _ in range(cfg.iterations):
        g = cos_grad(x)
        if not bool(torch.isfinite(g).all()):
            log.warning("feature norm vanished during optimization; returning current iterate")
            return VizResult(x, value(x), initial, status="zero-feature")
        x = torch.clamp(x + step * g.sign(), 0.0, 1.0).detach()
    final = value(x)
    status = "ok" if np.isfinite(final) else "zero-feature"
    return VizResult(x, final, initial, status=status)


def image_filename(class_index: int, i: int, direction: str, channels: int) -> str:
    suffix = "max" if direction == "maximize" else "min"
    ext = "ppm" if channels == 3 else "pgm"
    return f"eig{class_index}_{i}_{suffix}.{ext}"


def render_features(snapshot: ModelSnapshot, features: list[EigvecFeature], out_dir,
                    cfg: VizConfig = VizConfig()) -> list[dict]:
    """Visualize every feature in both directions and write Netpbm files."""
    out_dir = Path(out_dir)
    rows = []
    shape = snapshot.arch.input_shape
    flat = len(shape) == 1  # vector inputs are written as a one-row strip
    channels = 1 if flat else shape[0]
    for feat in features:
        for direction in ("maximize", "minimize"):
            res = visualize_eigvec(snapshot, feat, VizConfig(cfg.iterations, cfg.alpha, cfg.init, direction))
            name = image_filename(feat.class_index, feat.index, direction, channels)
            img = res.image.numpy()
            io.write_netpbm(out_dir / name, img.reshape(1, -1) if flat else img)
            rows.append({
                "file": name,
                "class_index": feat.class_index,
                "index": feat.index,
                "eigenvalue": feat.eigenvalue,
                "direction": direction,
                "initial_cosine": res.initial_cosine,
                "cosine": res.cosine,
                "status": res.status,
                "method": res.method,
            })
    return rows
