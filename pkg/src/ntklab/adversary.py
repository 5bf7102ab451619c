"""Iterated L-infinity PGD."""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import io
from .dynamics import DynamicsModel
from .engine import NonFiniteError
from .models import predict_class

ADV_MAGIC = b"NTKADV01"
EPS_PRESETS = {"4/255": 4 / 255, "8/255": 8 / 255}


def parse_epsilon(value) -> float:
    """Accept ``"4/255"``, ``"8/255"`` or any positive float."""
    if isinstance(value, str):
        value = value.strip()
        if value in EPS_PRESETS:
            return EPS_PRESETS[value]
        if "/" in value:
            num, den = value.split("/", 1)
            if float(den) == 0:
                raise ValueError(f"bad epsilon {value!r}")
            value = float(num) / float(den)
    eps = float(value)
    if not eps > 0 or not math.isfinite(eps):
        raise ValueError("epsilon must be positive")
    return eps


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 4 / 255
    steps: int = 100
    alpha: float | None = None
    random_init: bool = True
    clip_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("PGD needs at least one step")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else 2.0 * self.epsilon / self.steps

    @classmethod
    def for_training(cls, epsilon: float = 4 / 255) -> "PgdConfig":
        return cls(epsilon=epsilon, steps=20)

    @classmethod
    def for_evaluation(cls, epsilon: float = 4 / 255) -> "PgdConfig":
        return cls(epsilon=epsilon, steps=100)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "steps": self.steps,
            "alpha": self.alpha,
            "random_init": self.random_init,
            "clip_range": list(self.clip_range),
        }


@dataclass
class AdversarialBatch:
    originals: Tensor
    perturbed: Tensor
    labels: Tensor
    generator_tag: dict = field(default_factory=dict)

    def linf(self) -> float:
        return float((self.perturbed.double() - self.originals.double()).abs().max()) if len(self.labels) else 0.0

    def save(self, path, config_hash: str = "") -> Path:
        header = {"format": "advset", "generator_tag": self.generator_tag, "config_hash": config_hash}
        arrays = {
            "originals": self.originals.double().numpy(),
            "perturbed": self.perturbed.double().numpy(),
            "labels": self.labels.double().numpy(),
        }
        return io.write_container(path, ADV_MAGIC, header, arrays)

    @classmethod
    def load(cls, path) -> "AdversarialBatch":
        header, arrays = io.read_container(path, ADV_MAGIC)
        return cls(
            torch.from_numpy(arrays["originals"]),
            torch.from_numpy(arrays["perturbed"]),
            torch.from_numpy(arrays["labels"]).long(),
            header["generator_tag"],
        )

    def dump_grid(self, path, ncols: int = 8, which: str = "perturbed") -> Path:
        """Tile images (N, C, H, W) into one PGM/PPM."""
        imgs = getattr(self, which).double().numpy()
        if imgs.ndim != 4:
            raise ValueError("image grid needs (N, C, H, W) data")
        n, c, h, w = imgs.shape
        rows = -(-n // ncols)
        grid = np.zeros((c, rows * h, ncols * w))
        for i in range(n):
            r, q = divmod(i, ncols)
            grid[:, r * h : (r + 1) * h, q * w : (q + 1) * w] = imgs[i]
        return io.write_netpbm(path, grid)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def pgd_attack(model: DynamicsModel, x, labels, cfg: PgdConfig, seed=0, tag: dict | None = None) -> AdversarialBatch:
    """Untargeted cross-entropy PGD; returns the last iterate.

    Gradients are taken through the model's own dynamics in inference mode,
    so attacks on linearized/centered models differentiate the JVP term.
    """
    x = model._x(x)
    labels = torch.as_tensor(labels).long()
    lo_clip, hi_clip = cfg.clip_range
    if len(x) and (float(x.min()) < lo_clip or float(x.max()) > hi_clip):
        raise ValueError("inputs must lie inside the clip range")
    eps, alpha = cfg.epsilon, cfg.step_size
    lo = torch.clamp(x - eps, lo_clip, hi_clip)
    hi = torch.clamp(x + eps, lo_clip, hi_clip)
    if cfg.random_init:
        noise = torch.as_tensor(_rng(seed).uniform(-eps, eps, size=tuple(x.shape)), dtype=x.dtype)
        adv = torch.clamp(x + noise, lo_clip, hi_clip)
    else:
        adv = x.clone()
    for _ in range(cfg.steps):
        _, g = model.loss_input_grad(adv, labels, "ce")
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError("non-finite input gradient during PGD")
        adv = torch.minimum(torch.maximum(adv + alpha * g.sign(), lo), hi).detach()
    return AdversarialBatch(x.detach(), adv, labels, dict(tag or {}))


def attack_dataset(model: DynamicsModel, x, labels, cfg: PgdConfig, seed=0,
                   batch_size: int = 256, tag: dict | None = None) -> AdversarialBatch:
    rng = _rng(seed)
    x = model._x(x)
    labels = torch.as_tensor(labels).long()
    parts = [
        pgd_attack(model, x[i : i + batch_size], labels[i : i + batch_size], cfg, rng)
        for i in range(0, len(x), batch_size)
    ]
    return AdversarialBatch(
        x, torch.cat([p.perturbed for p in parts]), labels, dict(tag or {})
    )


def adversarial_accuracy(model: DynamicsModel, x, labels, cfg: PgdConfig, seed=0, batch_size: int = 256) -> float:
    """Accuracy of the model on PGD examples generated against itself."""
    if len(labels) == 0:
        raise ValueError("empty dataset")
    adv = attack_dataset(model, x, labels, cfg, seed, batch_size)
    pred = torch.cat([
        predict_class(model.predict(adv.perturbed[i : i + batch_size]))
        for i in range(0, len(adv.labels), batch_size)
    ])
    return float((pred == adv.labels).double().mean())
