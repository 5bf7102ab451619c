"""Declarative experiment configuration (YAML or JSON) with dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..adversary import PgdConfig, parse_epsilon
from ..dynamics import BN_POLICIES, KINDS
from ..io import stable_hash
from ..seeding import derive_seed

REGIMES = ("benign", "adversarial", "mixed")
DATASETS = ("blobs", "spirals", "patterns", "image_dir", "cifar10_bin")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    n_train: int = 2000
    n_test: int = 500
    num_classes: int = 2
    dim: int = 16
    margin: float = 1.0
    std: float = 0.1
    noise: float = 0.15
    image_shape: list = field(default_factory=lambda: [3, 16, 16])
    path: str | None = None
    classes: list | None = None
    label_bytes: int = 1
    seed: int | None = None


@dataclass
class ArchConfig:
    kind: str = "mlp"
    widths: list = field(default_factory=lambda: [256, 256])
    batch_norm: bool = False
    activation: str = "relu"
    bias: bool = True


@dataclass
class Stage1Config:
    regime: str = "benign"
    t_switch: int | None = None
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128


@dataclass
class Stage2Config:
    kind: str = "linearized"
    spawn_epoch: int | None = None
    regime: str = "benign"
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    bn_policy: str = "frozen"
    ablation: bool = False


@dataclass
class PgdSection:
    epsilon: float | str = "4/255"
    train_steps: int = 20
    eval_steps: int = 100
    random_init: bool = True


@dataclass
class KernelConfig:
    epochs: list | None = None
    subset: int = 200
    classes: str = "diagonal"
    encoding: str = "onehot"


@dataclass
class EvalConfig:
    adversarial: bool = True
    adv_subset: int | None = 200
    relative_magnitude: bool = True


@dataclass
class FixedKernelConfig:
    bases: list = field(default_factory=lambda: ["init", "benign_final", "adv_final"])
    regimes: list = field(default_factory=lambda: ["benign", "adversarial"])


@dataclass
class AblationConfig:
    sgd_lrs: list = field(default_factory=lambda: [1e-4, 1e-2])
    bn_policies: list = field(default_factory=lambda: ["frozen", "standard"])


@dataclass
class TransferConfig:
    spawn_epochs: list | None = None
    kinds: list = field(default_factory=lambda: ["standard", "linearized", "centered"])
    target: str = "standard"
    n_eval: int = 200


@dataclass
class VisualizeConfig:
    class_index: int = 0
    top_k: int = 4
    samples: int = 100
    iterations: int = 600
    alpha: float = 0.001
    epoch: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    precision: int = 64
    repeats: int = 3
    seeds: list | None = None
    loss: str = "ce"
    out: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    pgd: PgdSection = field(default_factory=PgdSection)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    fixed_kernel: FixedKernelConfig = field(default_factory=FixedKernelConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    visualize: VisualizeConfig = field(default_factory=VisualizeConfig)

    # -- derived --------------------------------------------------------------

    @property
    def epsilon(self) -> float:
        return parse_epsilon(self.pgd.epsilon)

    @property
    def data_seed(self) -> int:
        return self.seed if self.dataset.seed is None else self.dataset.seed

    def repeat_seeds(self) -> list[int]:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        return [derive_seed(self.seed, "repeat", r) for r in range(self.repeats)]

    def spawn_epoch(self) -> int:
        return self.stage1.epochs if self.stage2.spawn_epoch is None else self.stage2.spawn_epoch

    def kernel_epochs(self) -> list[int]:
        if self.kernel.epochs is None:
            return list(range(self.stage1.epochs + 1))
        return sorted({int(e) for e in self.kernel.epochs})

    def train_pgd(self) -> PgdConfig:
        return PgdConfig(self.epsilon, self.pgd.train_steps, random_init=self.pgd.random_init)

    def eval_pgd(self) -> PgdConfig:
        return PgdConfig(self.epsilon, self.pgd.eval_steps, random_init=self.pgd.random_init)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Identity of the experiment; the output location does not take part."""
        d = self.to_dict()
        d.pop("out")
        return stable_hash(d)

    def validate(self) -> "ExperimentConfig":
        s1, s2 = self.stage1, self.stage2
        if self.dataset.kind not in DATASETS:
            raise ConfigError(f"dataset.kind must be one of {DATASETS}")
        if self.arch.kind not in ("mlp", "small_cnn"):
            raise ConfigError("arch.kind must be mlp or small_cnn")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.loss not in ("ce", "mse"):
            raise ConfigError("loss must be ce or mse")
        for name, regime in (("stage1", s1.regime), ("stage2", s2.regime)):
            if regime not in REGIMES:
                raise ConfigError(f"{name}.regime must be one of {REGIMES}")
        if s1.regime == "mixed" and (s1.t_switch is None or not 0 <= s1.t_switch <= s1.epochs):
            raise ConfigError("mixed regime needs 0 <= stage1.t_switch <= stage1.epochs")
        if s1.epochs < 0 or s2.epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not 0 <= self.spawn_epoch() <= s1.epochs:
            raise ConfigError("stage2.spawn_epoch must lie within the stage-1 epochs")
        if s2.kind not in KINDS:
            raise ConfigError(f"stage2.kind must be one of {KINDS}")
        if s2.bn_policy not in BN_POLICIES:
            raise ConfigError(f"stage2.bn_policy must be one of {BN_POLICIES}")
        if s2.kind in ("linearized", "centered") and s2.bn_policy != "frozen" and not s2.ablation:
            raise ConfigError("linearized/centered stage 2 requires frozen batch norm unless stage2.ablation is set")
        bad = [e for e in self.kernel_epochs() if not 0 <= e <= s1.epochs]
        if bad:
            raise ConfigError(f"kernel epochs {bad} are outside the trained epochs")
        if self.kernel.subset < self.dataset.num_classes:
            raise ConfigError("kernel.subset must hold at least one sample per class")
        if self.repeats < 1 and self.seeds is None:
            raise ConfigError("repeats must be positive")
        try:
            self.train_pgd(), self.eval_pgd()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _build(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"section {path or 'root'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys under {path or 'root'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, f"{path}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}).validate()


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        keys, value = parse_override(item)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-mapping key {k!r}")
        node[keys[-1]] = value
    return data


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Read YAML/JSON (YAML is a superset), apply ``a.b=value`` overrides, validate."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
    return from_dict(apply_overrides(data, overrides))


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path
