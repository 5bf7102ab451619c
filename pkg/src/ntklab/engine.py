"""Functional forward/reverse/forward-mode differentiation over small layer graphs.

A model is a tuple of :class:`Layer` specs plus a :class:`ParamVector`.  All
derivative routines are thin wrappers over ``torch.func`` so they compose
(e.g. an input gradient of a JVP, needed to attack linearized models).

Batch-norm behaviour is selected per call: ``train=True`` normalizes with the
batch moments, otherwise the supplied running ``stats`` are used.
"""

from __future__ import annotations

import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import torch
import torch.nn.functional as F
from torch import Tensor
from torch.func import jvp as _jvp
from torch.func import vjp as _vjp
from torch.func import vmap

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LAYER_KINDS = ("dense", "conv2d", "relu", "batchnorm", "gap", "flatten")

_debug = os.environ.get("NTKLAB_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class JacobianTooLarge(ValueError):
    pass


def set_debug(flag: bool) -> None:
    """Toggle per-layer finiteness assertions."""
    global _debug
    _debug = bool(flag)


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str
    shape: tuple[int, ...] = ()
    bias: bool = True
    padding: str = "same"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unsupported layer kind {self.kind!r}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unsupported padding {self.padding!r}")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        if self.kind in ("dense", "conv2d"):
            out = [("weight", self.shape)]
            if self.bias:
                out.append(("bias", (self.shape[0],)))
            return out
        if self.kind == "batchnorm":
            return [("gamma", self.shape), ("beta", self.shape)]
        return []


Graph = tuple[Layer, ...]


def param_layout(graph: Graph) -> "OrderedDict[str, tuple[int, ...]]":
    return OrderedDict(
        (f"{layer.name}.{role}", shape) for layer in graph for role, shape in layer.param_shapes()
    )


def stats_layout(graph: Graph) -> "OrderedDict[str, tuple[int, ...]]":
    out: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    for layer in graph:
        if layer.kind == "batchnorm":
            out[f"{layer.name}.mean"] = layer.shape
            out[f"{layer.name}.var"] = layer.shape
    return out


def has_batchnorm(graph: Graph) -> bool:
    return any(layer.kind == "batchnorm" for layer in graph)


class ParamVector:
    """Ordered, named collection of parameter tensors viewed as one flat vector."""

    __slots__ = ("tensors",)

    def __init__(self, tensors: Mapping[str, Tensor]):
        self.tensors: OrderedDict[str, Tensor] = OrderedDict(tensors)

    @classmethod
    def zeros(cls, graph: Graph, dtype=torch.float64) -> "ParamVector":
        return cls({k: torch.zeros(s, dtype=dtype) for k, s in param_layout(graph).items()})

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    @property
    def total_len(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def segments(self) -> Iterator[tuple[str, str, Tensor]]:
        for key, t in self.tensors.items():
            layer, role = key.rsplit(".", 1)
            yield layer, role, t

    def flatten(self) -> Tensor:
        return torch.cat([t.reshape(-1) for t in self.tensors.values()])

    def unflatten(self, flat: Tensor) -> "ParamVector":
        if flat.numel() != self.total_len:
            raise ShapeError(f"flat vector has {flat.numel()} entries, expected {self.total_len}")
        out, i = OrderedDict(), 0
        for k, t in self.tensors.items():
            out[k] = flat[i : i + t.numel()].reshape(t.shape)
            i += t.numel()
        return ParamVector(out)

    def _check(self, other: "ParamVector") -> None:
        if list(other.tensors) != list(self.tensors) or any(
            a.shape != b.shape for a, b in zip(self.tensors.values(), other.tensors.values())
        ):
            raise ShapeError("parameter vectors do not conform")

    def map(self, fn: Callable[[Tensor], Tensor]) -> "ParamVector":
        return ParamVector({k: fn(v) for k, v in self.tensors.items()})

    def zip_map(self, other: "ParamVector", fn) -> "ParamVector":
        self._check(other)
        return ParamVector({k: fn(v, other.tensors[k]) for k, v in self.tensors.items()})

    def __add__(self, other):
        return self.zip_map(other, torch.add)

    def __sub__(self, other):
        return self.zip_map(other, torch.sub)

    def __mul__(self, scalar: float):
        return self.map(lambda t: t * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self.map(torch.neg)

    def dot(self, other: "ParamVector") -> Tensor:
        self._check(other)
        return sum((a * other.tensors[k]).sum() for k, a in self.tensors.items())

    def norm(self) -> Tensor:
        return self.flatten().norm()

    def zeros_like(self) -> "ParamVector":
        return self.map(torch.zeros_like)

    def clone(self) -> "ParamVector":
        return self.map(lambda t: t.detach().clone())

    def to(self, dtype) -> "ParamVector":
        return self.map(lambda t: t.to(dtype))

    def equal(self, other: "ParamVector") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            torch.equal(a, other.tensors[k]) for k, a in self.tensors.items()
        )

    def __repr__(self):
        return f"ParamVector({len(self.tensors)} segments, {self.total_len} scalars)"


# -- layer evaluation -------------------------------------------------------


def _finite(name: str, t: Tensor) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(f"non-finite activation after layer {name!r}")


def _apply(graph: Graph, p: Mapping[str, Tensor], x: Tensor, stats, train: bool, check: bool):
    """Evaluate the graph; returns (logits, batch moments of every BN layer)."""
    moments: dict[str, Tensor] = {}
    for layer in graph:
        k = layer.kind
        if k == "dense":
            x = x @ p[f"{layer.name}.weight"].T
            if layer.bias:
                x = x + p[f"{layer.name}.bias"]
        elif k == "conv2d":
            x = F.conv2d(
                x,
                p[f"{layer.name}.weight"],
                p[f"{layer.name}.bias"] if layer.bias else None,
                padding=layer.padding,
            )
        elif k == "relu":
            x = torch.relu(x)
        elif k == "batchnorm":
            dims = (0,) if x.dim() == 2 else (0, 2, 3)
            view = (1, -1) if x.dim() == 2 else (1, -1, 1, 1)
            if train:
                mean = x.mean(dim=dims)
                var = x.var(dim=dims, unbiased=False)
                moments[f"{layer.name}.mean"] = mean
                moments[f"{layer.name}.var"] = var
            else:
                if stats is None:
                    raise ShapeError("frozen batch-norm evaluation requires running stats")
                mean = stats[f"{layer.name}.mean"].to(x.dtype)
                var = stats[f"{layer.name}.var"].to(x.dtype)
            x = (x - mean.reshape(view)) * torch.rsqrt(var.reshape(view) + BN_EPS)
            x = x * p[f"{layer.name}.gamma"].reshape(view) + p[f"{layer.name}.beta"].reshape(view)
        elif k == "gap":
            x = x.mean(dim=(2, 3))
        elif k == "flatten":
            x = x.reshape(x.shape[0], -1)
        if check:
            _finite(layer.name, x)
    return x, moments


def _prepare(graph: Graph, params: ParamVector, x: Tensor) -> Tensor:
    x = torch.as_tensor(x).to(params.dtype)
    first = graph[0]
    if first.kind == "dense" and (x.dim() != 2 or x.shape[1] != first.shape[1]):
        raise ShapeError(f"input shape {tuple(x.shape)} does not match dense input {first.shape[1]}")
    if first.kind == "conv2d" and (x.dim() != 4 or x.shape[1] != first.shape[1]):
        raise ShapeError(f"input shape {tuple(x.shape)} does not match conv input channels {first.shape[1]}")
    return x


def forward(graph: Graph, params: ParamVector, x, stats=None, *, train: bool = False) -> Tensor:
    """Logits of shape [batch, C]."""
    x = _prepare(graph, params, x)
    out, _ = _apply(graph, params.tensors, x, stats, train, _debug)
    return out


def forward_with_moments(graph: Graph, params: ParamVector, x, stats=None, *, train: bool = False):
    x = _prepare(graph, params, x)
    return _apply(graph, params.tensors, x, stats, train, _debug)


def update_running_stats(stats: Mapping[str, Tensor], moments: Mapping[str, Tensor],
                         momentum: float = BN_MOMENTUM) -> dict[str, Tensor]:
    """running <- momentum * running + (1 - momentum) * batch."""
    return {
        k: (momentum * v + (1.0 - momentum) * moments[k].detach().to(v.dtype)) if k in moments else v
        for k, v in stats.items()
    }


def _out_check(t: Tensor, what: str) -> Tensor:
    if _debug:
        _finite(what, t)
    return t


def grad(graph: Graph, params: ParamVector, x, cotangent, stats=None, *, train: bool = False) -> ParamVector:
    """Gradient of <cotangent, f(params, x)> with respect to the parameters."""
    x = _prepare(graph, params, x)
    out, pullback = _vjp(lambda p: _apply(graph, p, x, stats, train, False)[0], params.tensors)
    cot = torch.as_tensor(cotangent, dtype=out.dtype)
    if cot.shape != out.shape:
        raise ShapeError(f"cotangent shape {tuple(cot.shape)} != output shape {tuple(out.shape)}")
    (g,) = pullback(cot)
    return ParamVector({k: _out_check(g[k], "grad") for k in params.tensors})


def input_grad(graph: Graph, params: ParamVector, x, cotangent, stats=None, *, train: bool = False) -> Tensor:
    """Gradient of <cotangent, f(params, x)> with respect to the input."""
    x = _prepare(graph, params, x)
    out, pullback = _vjp(lambda xx: _apply(graph, params.tensors, xx, stats, train, False)[0], x)
    cot = torch.as_tensor(cotangent, dtype=out.dtype)
    if cot.shape != out.shape:
        raise ShapeError(f"cotangent shape {tuple(cot.shape)} != output shape {tuple(out.shape)}")
    return _out_check(pullback(cot)[0], "input_grad")


def jvp(graph: Graph, params: ParamVector, x, tangent: ParamVector, stats=None, *,
        train: bool = False, with_primal: bool = False):
    """Directional derivative of f along ``tangent`` in parameter space."""
    params._check(tangent)
    x = _prepare(graph, params, x)
    primal, tan = _jvp(
        lambda p: _apply(graph, p, x, stats, train, False)[0],
        (params.tensors,),
        (tangent.tensors,),
    )
    _out_check(tan, "jvp")
    return (primal, tan) if with_primal else tan


def jacobian_explicit(graph: Graph, params: ParamVector, x, stats=None, *,
                      limit: int = 100_000, chunk: int = 256) -> Tensor:
    """Dense Jacobian [batch, C, P], assembled column by column in forward mode.

    Meant as a test oracle; refuses nets with more than ``limit`` parameters.
    """
    P = params.total_len
    if P > limit:
        raise JacobianTooLarge(f"{P} parameters exceeds explicit Jacobian limit {limit}")
    x = _prepare(graph, params, x)
    flat0 = params.flatten().detach()

    def f_flat(flat):
        return _apply(graph, params.unflatten(flat).tensors, x, stats, False, False)[0]

    def column(e):
        return _jvp(f_flat, (flat0,), (e,))[1]

    cols = []
    eye = torch.eye(P, dtype=flat0.dtype)
    for start in range(0, P, chunk):
        cols.append(vmap(column)(eye[start : start + chunk]))
    jac = torch.cat(cols)  # [P, batch, C]
    return jac.permute(1, 2, 0).contiguous()


# -- losses -----------------------------------------------------------------


def _as_indices(labels, n_classes: int) -> Tensor:
    labels = torch.as_tensor(labels)
    if labels.dim() == 2:
        labels = labels.argmax(dim=1)
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    return labels


def loss_value(kind: str, logits: Tensor, labels) -> Tensor:
    """Mean loss over the batch; differentiable in ``logits``.

    ``mse`` sums squared error over classes against one-hot targets, so a
    scalar output f with target y has loss (f - y)^2.
    """
    n, c = logits.shape
    if kind == "ce":
        return F.cross_entropy(logits, _as_indices(labels, c))
    if kind == "mse":
        labels = torch.as_tensor(labels)
        if labels.dim() == 2 or labels.is_floating_point():
            target = labels.to(logits.dtype).reshape(n, c)
        else:
            target = F.one_hot(_as_indices(labels, c), c).to(logits.dtype)
        return ((logits - target) ** 2).sum(dim=1).mean()
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_and_grad(kind: str, logits, labels) -> tuple[float, Tensor]:
    """Mean loss and its gradient with respect to the logits."""
    logits = torch.as_tensor(logits).detach()
    value, pullback = _vjp(lambda z: loss_value(kind, z, labels), logits)
    (g,) = pullback(torch.ones_like(value))
    v = float(value)
    if not math.isfinite(v):
        raise NonFiniteError(f"non-finite {kind} loss")
    return v, g
