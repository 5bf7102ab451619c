"""Small architectures, initialization and parameter snapshots."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import io
from .engine import Graph, Layer, ParamVector, param_layout, stats_layout
from .seeding import stream

SNAPSHOT_MAGIC = b"NTKSNAP1"
REGIME_TAGS = ("benign", "adversarial", "mixed", "init")


class ArchitectureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    """Layer plan of an MLP or a small conv net.

    ``widths`` are hidden widths for ``mlp`` and per-block channel counts for
    ``small_cnn``.  CNN blocks are conv3x3 -> [batch-norm] -> ReLU, followed by
    global average pooling and a dense head; there is no pooling before the
    first convolution.
    """

    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    widths: tuple[int, ...] = (256, 256)
    activation: str = "relu"
    bias: bool = True
    batch_norm: bool = False
    padding: str = "same"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind not in ("mlp", "small_cnn"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "small_cnn" and len(self.input_shape) != 3:
            raise ValueError("small_cnn expects (channels, height, width) inputs")

    @classmethod
    def mlp(cls, input_dim: int, num_classes: int, widths=(256, 256), **kw) -> "Architecture":
        return cls("mlp", (input_dim,), num_classes, tuple(widths), **kw)

    @classmethod
    def small_cnn(cls, input_shape, num_classes: int, channels=(16, 32, 64), **kw) -> "Architecture":
        kw.setdefault("batch_norm", True)
        return cls("small_cnn", tuple(input_shape), num_classes, tuple(channels), **kw)

    @property
    def id(self) -> str:
        w = "-".join(map(str, self.widths))
        return f"{self.kind}({w})"

    @property
    def graph(self) -> Graph:
        layers: list[Layer] = []

        def act(i):
            if self.batch_norm:
                layers.append(Layer("batchnorm", f"bn{i}", (w,)))
            if self.activation == "relu":
                layers.append(Layer("relu", f"relu{i}"))

        if self.kind == "mlp":
            fan_in = int(np.prod(self.input_shape))
            if len(self.input_shape) > 1:
                layers.append(Layer("flatten", "flatten"))
            for i, w in enumerate(self.widths):
                layers.append(Layer("dense", f"dense{i}", (w, fan_in), bias=self.bias))
                act(i)
                fan_in = w
            layers.append(Layer("dense", "head", (self.num_classes, fan_in), bias=self.bias))
        else:
            ch = self.input_shape[0]
            for i, w in enumerate(self.widths):
                layers.append(Layer("conv2d", f"conv{i}", (w, ch, 3, 3), bias=self.bias, padding=self.padding))
                act(i)
                ch = w
            layers.append(Layer("gap", "gap"))
            layers.append(Layer("dense", "head", (self.num_classes, ch), bias=self.bias))
        return tuple(layers)

    @property
    def num_params(self) -> int:
        return sum(math.prod(s) for s in param_layout(self.graph).values())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "activation": self.activation,
            "bias": self.bias,
            "batch_norm": self.batch_norm,
            "padding": self.padding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


def init(arch: Architecture, seed: int, dtype=torch.float64) -> tuple[ParamVector, dict[str, Tensor]]:
    """He-scaled Gaussian weights, zero biases, unit BN scale, zero BN shift."""
    rng = stream(seed, "init")
    tensors = {}
    for name, shape in param_layout(arch.graph).items():
        role = name.rsplit(".", 1)[1]
        if role == "weight":
            fan_in = math.prod(shape[1:])
            values = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif role == "gamma":
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        tensors[name] = torch.tensor(values, dtype=dtype)
    stats = {
        name: torch.tensor(np.zeros(shape) if name.endswith(".mean") else np.ones(shape), dtype=dtype)
        for name, shape in stats_layout(arch.graph).items()
    }
    return ParamVector(tensors), stats


def predict_class(logits) -> Tensor:
    """Argmax over classes; ties go to the lowest class index."""
    logits = torch.as_tensor(logits)
    if logits.numel() == 0 or logits.shape[-1] == 0:
        raise ValueError("empty logits")
    squeeze = logits.dim() == 1
    z = logits.reshape(-1, logits.shape[-1])
    is_max = z == z.max(dim=1, keepdim=True).values
    # first True per row
    idx = torch.arange(z.shape[1], 0, -1, dtype=torch.long)
    out = (is_max.long() * idx).argmax(dim=1)
    return out[0] if squeeze else out


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable (parameters, running stats) pair captured at an epoch."""

    arch: Architecture
    params: ParamVector
    bn_stats: dict = field(default_factory=dict)
    spawn_epoch: int = 0
    tag: str = "benign"
    config_hash: str = ""

    def __post_init__(self):
        layout = param_layout(self.arch.graph)
        if list(layout) != self.params.names or any(
            tuple(self.params.tensors[k].shape) != s for k, s in layout.items()
        ):
            raise ArchitectureMismatch(f"parameters do not conform to {self.arch.id}")
        if list(stats_layout(self.arch.graph)) != list(self.bn_stats):
            raise ArchitectureMismatch("batch-norm statistics do not conform to architecture")
        for k, v in self.bn_stats.items():
            if k.endswith(".var") and not bool((v > 0).all()):
                raise ValueError(f"running variance {k} must be positive")
        if self.tag not in REGIME_TAGS:
            raise ValueError(f"unknown regime tag {self.tag!r}")
        # detach and copy so later in-place updates of live state cannot leak in
        object.__setattr__(self, "params", self.params.map(lambda t: t.detach().to(torch.float64).clone()))
        object.__setattr__(
            self, "bn_stats", {k: v.detach().to(torch.float64).clone() for k, v in self.bn_stats.items()}
        )

    @classmethod
    def capture(cls, arch, params, stats, epoch: int, tag: str = "benign", config_hash: str = "") -> "ModelSnapshot":
        return cls(arch, params, dict(stats), int(epoch), tag, config_hash)

    def restore(self, dtype=torch.float64, arch: Architecture | None = None):
        """Return (params, stats) as fresh tensors in ``dtype``."""
        if arch is not None and arch != self.arch:
            raise ArchitectureMismatch(f"snapshot is {self.arch.id}, requested {arch.id}")
        return self.params.to(dtype).clone(), {k: v.to(dtype).clone() for k, v in self.bn_stats.items()}

    def _header(self) -> dict:
        return {
            "format": "ntksnap",
            "arch": self.arch.to_dict(),
            "spawn_epoch": self.spawn_epoch,
            "tag": self.tag,
            "config_hash": self.config_hash,
        }

    def _arrays(self) -> dict:
        arrays = {f"param/{k}": v.numpy() for k, v in self.params.tensors.items()}
        arrays.update({f"stat/{k}": v.numpy() for k, v in self.bn_stats.items()})
        return arrays

    @property
    def id(self) -> str:
        h = hashlib.sha256(io.canonical_json(self._header()).encode())
        for a in self._arrays().values():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> Path:
        return io.write_container(path, SNAPSHOT_MAGIC, self._header(), self._arrays())

    @classmethod
    def load(cls, path) -> "ModelSnapshot":
        header, arrays = io.read_container(path, SNAPSHOT_MAGIC)
        arch = Architecture.from_dict(header["arch"])
        params = ParamVector(
            {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
        )
        stats = {k[len("stat/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("stat/")}
        return cls(arch, params, stats, header["spawn_epoch"], header["tag"], header.get("config_hash", ""))
