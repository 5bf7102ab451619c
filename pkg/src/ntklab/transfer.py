"""Adversarial transferability between dynamics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .adversary import AdversarialBatch, PgdConfig, attack_dataset
from .dynamics import DynamicsModel, accuracy

CSV_COLUMNS = ("source_kind", "t_prime", "acc_benign", "acc_on_source", "acc_self", "tau", "valid")


@dataclass
class TransferRecord:
    source_kind: str
    t_prime: int | None
    acc_benign: float
    acc_on_source: float
    acc_self: float
    tau: float
    valid: bool
    target: str = ""


def tau(acc_benign: float, acc_on_source: float, acc_self: float) -> tuple[float, bool]:
    """(Acc_b - Acc_src) / (Acc_b - Acc_self); NaN and invalid when the self-attack did nothing.

    Not clamped: values above 1 mean the source fools the target better than
    the target's own attack.
    """
    denom = acc_benign - acc_self
    if denom <= 0:
        return math.nan, False
    return (acc_benign - acc_on_source) / denom, True


def benign_batch(x, labels) -> AdversarialBatch:
    x = torch.as_tensor(x)
    return AdversarialBatch(x, x.clone(), torch.as_tensor(labels).long(), {"kind": "benign"})


def transferability(target: DynamicsModel, sources: list[AdversarialBatch], x, labels, *,
                    self_set: AdversarialBatch | None = None, cfg: PgdConfig | None = None,
                    seed=0, target_tag: str = "", batch_size: int = 256) -> list[TransferRecord]:
    """Evaluate the target on every source set and compose tau per source."""
    x = target._x(x)
    labels = torch.as_tensor(labels).long()
    for src in sources:
        if not torch.equal(src.labels.long(), labels):
            raise ValueError("source sets must share the benign labels")
        if src.originals.shape != x.shape or not torch.allclose(src.originals.to(x.dtype), x, atol=1e-12, rtol=0):
            raise ValueError("source sets must share the benign originals")
    if self_set is None:
        if cfg is None:
            raise ValueError("need either a self adversarial set or a PGD config")
        self_set = attack_dataset(target, x, labels, cfg, seed, batch_size, tag={"kind": "self"})
    acc_b = accuracy(target, x, labels, batch_size)
    acc_self = accuracy(target, self_set.perturbed, labels, batch_size)
    records = []
    for src in sources:
        acc_src = accuracy(target, src.perturbed, labels, batch_size)
        t, valid = tau(acc_b, acc_src, acc_self)
        tag = src.generator_tag
        records.append(TransferRecord(
            str(tag.get("kind", "unknown")),
            tag.get("epoch"),
            acc_b,
            acc_src,
            acc_self,
            t,
            valid,
            target_tag,
        ))
    return records


def write_transfer_csv(path, records: list[TransferRecord], config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            d = asdict(r)
            w.writerow([d["source_kind"], "" if d["t_prime"] is None else d["t_prime"],
                        repr(d["acc_benign"]), repr(d["acc_on_source"]), repr(d["acc_self"]),
                        repr(d["tau"]), int(d["valid"])])
    return path
