"""Two-stage training protocol and the studies built on it.

Run directory layout (one per experiment)::

    config.yaml  kernel_subset.csv
    repeat_<r>/stage1/{accuracy.csv, metrics.csv, snapshots/, kernels/}
    repeat_<r>/stage2/{accuracy.csv, metrics.csv, model/}
    metrics.csv  (aggregate over repeats, written by the metric sweep)

Every CSV starts with a ``# config_hash=`` line.  Randomness for repeat r
comes from that repeat's seed through named streams (init, shuffle, pgd),
while the dataset and the kernel/evaluation subsets come from the global seed
and are shared across repeats.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ..adversary import PgdConfig, adversarial_accuracy, attack_dataset, pgd_attack
from ..dynamics import DynamicsModel, accuracy, relative_magnitude
from ..models import Architecture, ModelSnapshot, init
from ..ntk import ClassKernel, compute_ntk, distance_to_final, effective_rank, kernel_distance, kernel_velocity, ksm, mean_ksm
from ..seeding import stream
from ..transfer import transferability, write_transfer_csv
from . import data as datasets
from .config import ExperimentConfig, dump_config, load_config

ACC_COLUMNS = ("stage", "epoch", "split", "attack", "accuracy")
METRIC_COLUMNS = ("epoch", "metric", "value")
TRACE_COLUMNS = ("epoch", "metric", "value", "std", "n")


# -- CSV helpers --------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows, config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[str, list[dict]]:
    """(config hash, rows as dicts of strings)."""
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# config_hash="):
            raise ValueError(f"{path} has no config hash line")
        rows = list(csv.DictReader(fh))
    return first.strip().split("=", 1)[1], rows


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


# -- shared run state ---------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> datasets.Dataset:
    d, seed = cfg.dataset, cfg.data_seed
    if d.kind == "blobs":
        return datasets.gen_blobs(d.n_train, d.n_test, d.num_classes, d.dim, d.margin, d.std, seed)
    if d.kind == "spirals":
        return datasets.gen_spirals(d.n_train, d.n_test, d.num_classes, d.noise, seed)
    if d.kind == "patterns":
        return datasets.gen_patterns(d.n_train, d.n_test, d.num_classes, tuple(d.image_shape), noise=d.noise, seed=seed)
    if d.path is None:
        raise datasets.DatasetError(f"dataset.path is required for {d.kind}")
    if d.kind == "image_dir":
        return datasets.load_image_dir(d.path, seed=seed)
    return datasets.load_cifar10_bin(d.path, d.n_train, seed, d.classes, d.n_test, d.label_bytes)


def build_arch(cfg: ExperimentConfig, input_shape, num_classes: int) -> Architecture:
    a = cfg.arch
    kw = dict(activation=a.activation, bias=a.bias, batch_norm=a.batch_norm)
    return Architecture(a.kind, tuple(input_shape), num_classes, tuple(a.widths), **kw)


def _balanced(labels, size, C, rng) -> np.ndarray:
    size = min(size, len(labels))
    return datasets.balanced_indices(labels, size - size % C, C, rng)


class Run:
    """Dataset, architecture and fixed sample subsets for one configuration."""

    def __init__(self, cfg: ExperimentConfig, data: datasets.Dataset | None = None):
        self.cfg = cfg
        self.hash = cfg.hash()
        self.data = data if data is not None else load_dataset(cfg)
        C = self.data.num_classes
        if C != cfg.dataset.num_classes and cfg.dataset.kind not in ("image_dir", "cifar10_bin"):
            raise ValueError("dataset class count disagrees with config")
        self.arch = build_arch(cfg, self.data.input_shape, C)
        self.dtype = torch.float64 if cfg.precision == 64 else torch.float32
        self.kernel_idx = _balanced(self.data.y_train, cfg.kernel.subset, C, stream(cfg.seed, "subset", "kernel"))
        self.x_kernel = self.data.x_train[self.kernel_idx]
        self.y_kernel = self.data.y_train[self.kernel_idx]
        if cfg.eval.adv_subset is None:
            self.eval_idx = np.arange(len(self.data.y_test))
        else:
            self.eval_idx = _balanced(self.data.y_test, cfg.eval.adv_subset, C, stream(cfg.seed, "subset", "eval"))
        self.x_eval = self.data.x_test[self.eval_idx]
        self.y_eval = self.data.y_test[self.eval_idx]

    def write_header(self, out: Path) -> None:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, out / "config.yaml")
        rows = [(int(i), int(y)) for i, y in zip(self.kernel_idx, self.y_kernel)]
        write_csv(out / "kernel_subset.csv", ("sample_id", "label"), rows, self.hash)

    def kernel(self, snapshot: ModelSnapshot) -> ClassKernel:
        return compute_ntk(snapshot, self.x_kernel, self.cfg.kernel.classes, sample_ids=self.kernel_idx)

    def evaluate(self, model: DynamicsModel, stage: str, epoch: int, rseed: int, adversarial: bool) -> list[tuple]:
        d = self.data
        rows = [
            (stage, epoch, "train", "none", accuracy(model, d.x_train, d.y_train)),
            (stage, epoch, "test", "none", accuracy(model, d.x_test, d.y_test)),
        ]
        if adversarial:
            rng = stream(rseed, "pgd", "eval", stage, epoch)
            rows.append((stage, epoch, "test", "pgd", adversarial_accuracy(model, self.x_eval, self.y_eval, self.cfg.eval_pgd(), rng)))
        return rows


def _pgd_adversary(cfg: PgdConfig, rng):
    """Inner maximization; one generator per epoch, so starts differ across batches."""
    return lambda m, xb, yb: pgd_attack(m, xb, yb, cfg, rng).perturbed


def train_epochs(run: Run, model: DynamicsModel, *, stage: str, rseed: int, epochs: int, lr: float,
                 momentum: float, batch_size: int, regime: str, t_switch: int | None = None,
                 callback=None) -> list[float]:
    """SGD over shuffled mini-batches; PGD inner maximization on adversarial epochs."""
    x, y = run.data.x_train, run.data.y_train
    n = len(y)
    train_cfg = run.cfg.train_pgd()
    losses = []
    for e in range(1, epochs + 1):
        adversarial = regime == "adversarial" or (regime == "mixed" and e > t_switch)
        perm = stream(rseed, "shuffle", stage, e).permutation(n)
        adversary = _pgd_adversary(train_cfg, stream(rseed, "pgd", "train", stage, e)) if adversarial else None
        epoch_loss = 0.0
        for i in range(0, n, batch_size):
            idx = perm[i : i + batch_size]
            epoch_loss += model.sgd_step(x[idx], y[idx], lr, momentum, loss=run.cfg.loss, adversary=adversary) * len(idx)
        losses.append(epoch_loss / n)
        if callback is not None:
            callback(e)
    return losses


# -- persistence of dynamics models -------------------------------------------


def save_dynamics(model: DynamicsModel, directory, epoch: int, config_hash: str = "", tag: str = "benign") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model.snapshot(epoch, tag, config_hash).save(directory / "live.ntksnap")
    if model.parent is not None:
        model.parent.save(directory / "parent.ntksnap")
    meta = {"kind": model.kind, "bn_policy": model.bn_policy, "ablation": model.ablation}
    (directory / "model.json").write_text(json.dumps(meta, sort_keys=True))
    return directory


def load_dynamics(path, dtype=torch.float64) -> DynamicsModel:
    """A model directory written by :func:`save_dynamics`, or a bare snapshot (standard, frozen stats)."""
    path = Path(path)
    if path.is_file():
        snap = ModelSnapshot.load(path)
        return DynamicsModel.from_snapshot(snap, "standard", bn_policy="frozen", dtype=dtype)
    meta = json.loads((path / "model.json").read_text())
    live = ModelSnapshot.load(path / "live.ntksnap")
    parent = ModelSnapshot.load(path / "parent.ntksnap") if (path / "parent.ntksnap").exists() else None
    params, stats = live.restore(dtype)
    return DynamicsModel(live.arch, meta["kind"], params=params, stats=stats, parent=parent,
                         bn_policy=meta["bn_policy"], ablation=meta["ablation"], dtype=dtype)


# -- stages -------------------------------------------------------------------


@dataclass
class Stage1Result:
    model: DynamicsModel
    snapshots: dict = field(default_factory=dict)
    kernels: dict = field(default_factory=dict)
    acc_rows: list = field(default_factory=list)
    losses: list = field(default_factory=list)


def _snapshot_tag(regime: str, t_switch, epoch: int) -> str:
    if epoch == 0:
        return "init"
    if regime == "mixed":
        return "adversarial" if epoch > t_switch else "benign"
    return regime


def run_stage1(run: Run, rseed: int, out: Path | None = None, *, regime: str | None = None,
               keep_epochs=(), kernels: bool = True, evaluate: bool = True) -> Stage1Result:
    """Standard dynamics from initialization, with snapshots/kernels on the schedule."""
    cfg, s1 = run.cfg, run.cfg.stage1
    regime = regime or s1.regime
    params, stats = init(run.arch, rseed, run.dtype)
    model = DynamicsModel(run.arch, "standard", params=params, stats=stats, bn_policy="standard", dtype=run.dtype)
    kernel_epochs = set(cfg.kernel_epochs()) if kernels else set()
    keep = kernel_epochs | {0, cfg.spawn_epoch(), s1.epochs} | {int(e) for e in keep_epochs}
    eval_epochs = set(cfg.kernel_epochs()) | {s1.epochs}
    res = Stage1Result(model)

    def checkpoint(e):
        if e not in keep:
            return
        snap = model.snapshot(e, _snapshot_tag(regime, s1.t_switch, e), run.hash)
        res.snapshots[e] = snap
        if out is not None:
            snap.save(out / "snapshots" / f"epoch_{e:04d}.ntksnap")
        if e in kernel_epochs:
            res.kernels[e] = run.kernel(snap)
            if out is not None:
                res.kernels[e].save(out / "kernels" / f"epoch_{e:04d}.ntkk")
        if evaluate and e in eval_epochs:
            res.acc_rows += run.evaluate(model, "stage1", e, rseed, cfg.eval.adversarial)

    checkpoint(0)
    res.losses = train_epochs(run, model, stage="stage1", rseed=rseed, epochs=s1.epochs, lr=s1.lr,
                              momentum=s1.momentum, batch_size=s1.batch_size, regime=regime,
                              t_switch=s1.t_switch, callback=checkpoint)
    if out is not None:
        write_csv(out / "accuracy.csv", ACC_COLUMNS, res.acc_rows, run.hash)
        write_csv(out / "loss.csv", ("epoch", "loss"), list(enumerate(res.losses, 1)), run.hash)
    return res


@dataclass
class Stage2Result:
    model: DynamicsModel
    acc_rows: list = field(default_factory=list)
    metric_rows: list = field(default_factory=list)
    kernel_distance: float | None = None

    def final(self, split: str = "test", attack: str = "none") -> float:
        rows = [r for r in self.acc_rows if r[2] == split and r[3] == attack]
        return rows[-1][4]


def run_stage2(run: Run, parent: ModelSnapshot, rseed: int, out: Path | None = None, *,
               kind: str | None = None, regime: str | None = None, bn_policy: str | None = None,
               ablation: bool | None = None, lr: float | None = None, epochs: int | None = None,
               kernel_distance_to_parent: bool = True, stage: str = "stage2") -> Stage2Result:
    """Train one of the four dynamics from ``parent``; momentum starts from zero."""
    cfg, s2 = run.cfg, run.cfg.stage2
    kind = kind or s2.kind
    epochs = s2.epochs if epochs is None else epochs
    regime = regime or s2.regime
    model = DynamicsModel.from_snapshot(
        parent, kind,
        bn_policy=bn_policy or s2.bn_policy,
        ablation=s2.ablation if ablation is None else ablation,
        dtype=run.dtype,
    )
    res = Stage2Result(model)
    rel_mag = kind == "linearized" and cfg.eval.relative_magnitude

    def checkpoint(e):
        res.acc_rows.extend(run.evaluate(model, stage, e, rseed, cfg.eval.adversarial and e == epochs))
        if rel_mag:
            res.metric_rows.append((e, "relative_magnitude", _safe_rel_mag(model, run.data.x_test)))

    checkpoint(0)
    train_epochs(run, model, stage=stage, rseed=rseed, epochs=epochs, lr=s2.lr if lr is None else lr,
                 momentum=s2.momentum, batch_size=s2.batch_size, regime=regime,
                 t_switch=0, callback=checkpoint)
    if kernel_distance_to_parent:
        before = run.kernel(parent).trace_kernel()
        after = run.kernel(model.feature_snapshot(epochs, config_hash=run.hash)).trace_kernel()
        res.kernel_distance = kernel_distance(before, after)
        res.metric_rows.append((epochs, "kernel_distance_to_parent", res.kernel_distance))
    if out is not None:
        write_csv(out / "accuracy.csv", ACC_COLUMNS, res.acc_rows, run.hash)
        write_csv(out / "metrics.csv", METRIC_COLUMNS, res.metric_rows, run.hash)
        save_dynamics(model, out / "model", epochs, run.hash, regime)
    return res


def _safe_rel_mag(model, x) -> float:
    try:
        return relative_magnitude(model, x)
    except ValueError:
        return math.nan


# -- protocols ----------------------------------------------------------------


def _out(cfg: ExperimentConfig, out) -> Path:
    return Path(out if out is not None else cfg.out)


def run_two_stage(cfg: ExperimentConfig, out=None, *, data=None) -> Path:
    """Stage 1 (standard) then stage 2 (configured dynamics) for every repeat."""
    out = _out(cfg, out)
    run = Run(cfg, data)
    run.write_header(out)
    for r, rseed in enumerate(cfg.repeat_seeds()):
        rdir = out / f"repeat_{r}"
        s1 = run_stage1(run, rseed, rdir / "stage1")
        run_stage2(run, s1.snapshots[cfg.spawn_epoch()], rseed, rdir / "stage2")
    return out


def resume_stage2(run_dir, repeat: int = 0, snapshot_path=None, out=None) -> Path:
    """Re-run stage 2 of one repeat from a persisted spawn snapshot."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.yaml")
    run = Run(cfg)
    if snapshot_path is None:
        snapshot_path = run_dir / f"repeat_{repeat}" / "stage1" / "snapshots" / f"epoch_{cfg.spawn_epoch():04d}.ntksnap"
    parent = ModelSnapshot.load(snapshot_path)
    target = Path(out) if out is not None else run_dir / f"repeat_{repeat}" / "stage2"
    run_stage2(run, parent, cfg.repeat_seeds()[repeat], target)
    return target


def _kernel_files(directory: Path) -> list[Path]:
    return sorted(directory.glob("epoch_*.ntkk"))


def kernel_metrics(kernels: list[ClassKernel], labels, encoding: str = "onehot") -> list[tuple]:
    """(epoch, metric, value) rows for velocity, distance to final, erank and mean KSM."""
    trace = [(k.epoch, k.trace_kernel()) for k in kernels]
    rows = [(e, "kernel_velocity", v) for e, v in kernel_velocity(trace)]
    rows += [(e, "distance_to_final", d) for e, d in distance_to_final(trace)]
    rows += [(e, "effective_rank", effective_rank(K)) for e, K in trace]
    rows += [(k.epoch, "mean_ksm", mean_ksm(ksm(k, labels, encoding))) for k in kernels]
    return rows


def run_metric_sweep(run_dir) -> list[tuple]:
    """Kernel metrics per repeat from the stored ``.ntkk`` files, aggregated as mean/std."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.yaml")
    h = cfg.hash()
    _, subset = read_csv(run_dir / "kernel_subset.csv")
    labels = np.array([int(r["label"]) for r in subset])
    per_repeat = {}
    for rdir in sorted(run_dir.glob("repeat_*")):
        kernels = [ClassKernel.load(p) for p in _kernel_files(rdir / "stage1" / "kernels")]
        if not kernels:
            continue
        rows = kernel_metrics(kernels, labels, cfg.kernel.encoding)
        write_csv(rdir / "stage1" / "metrics.csv", METRIC_COLUMNS, rows, h)
        per_repeat[rdir.name] = rows
    grouped: dict[tuple, list] = {}
    for rows in per_repeat.values():
        for e, m, v in rows:
            grouped.setdefault((m, e), []).append(v)
    trace = []
    for (m, e), vals in sorted(grouped.items()):
        mean, std = _mean_std(vals)
        trace.append((e, m, mean, std, len(vals)))
    write_csv(run_dir / "metrics.csv", TRACE_COLUMNS, trace, h)
    epochs = cfg.kernel_epochs()
    gaps = sorted({b - a for a, b in zip(epochs, epochs[1:])})
    meta = {"kernel_epochs": epochs, "epoch_gaps": gaps, "velocity_divided_by_gap": True,
            "repeats": sorted(per_repeat), "config_hash": h}
    (run_dir / "metrics_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return trace


def _aggregate(rows, keys, values):
    groups: dict[tuple, list] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for key, grp in groups.items():
        rec = dict(zip(keys, key))
        for v in values:
            rec[f"{v}_mean"], rec[f"{v}_std"] = _mean_std([g[v] for g in grp])
        rec["n"] = len(grp)
        out.append(rec)
    return out


def _write_dicts(path, rows, h):
    if not rows:
        return write_csv(path, (), [], h)
    cols = tuple(rows[0])
    return write_csv(path, cols, [tuple(r[c] for c in cols) for r in rows], h)


FIXED_KERNEL_BASES = ("init", "benign_final", "adv_final")


def run_fixed_kernel_adv(cfg: ExperimentConfig, out=None, *, bases=None, data=None) -> list[dict]:
    """Centered stage-2 training on fixed base kernels, benign and adversarial regimes."""
    out = _out(cfg, out)
    run = Run(cfg, data)
    run.write_header(out)
    bases = list(bases or cfg.fixed_kernel.bases)
    for b in bases:
        if b not in FIXED_KERNEL_BASES:
            raise ValueError(f"unknown base kernel {b!r}")
    E = cfg.stage1.epochs
    rows = []
    for r, rseed in enumerate(cfg.repeat_seeds()):
        rdir = out / f"repeat_{r}"
        parents = {}
        if "init" in bases:
            params, stats = init(run.arch, rseed, run.dtype)
            parents["init"] = ModelSnapshot.capture(run.arch, params, stats, 0, "init", run.hash)
        for base, regime in (("benign_final", "benign"), ("adv_final", "adversarial")):
            if base in bases:
                s1 = run_stage1(run, rseed, rdir / f"stage1_{regime}", regime=regime, kernels=False, evaluate=False)
                parents[base] = s1.snapshots[E]
        for base in bases:
            for regime in cfg.fixed_kernel.regimes:
                s2 = run_stage2(run, parents[base], rseed, rdir / f"{base}_{regime}", kind="centered",
                                regime=regime, bn_policy="frozen", ablation=False,
                                kernel_distance_to_parent=False, stage=f"fixed_{base}_{regime}")
                rows.append({
                    "repeat": r, "base": base, "regime": regime,
                    "benign_acc": s2.final("test", "none"),
                    "adv_acc": s2.final("test", "pgd") if cfg.eval.adversarial else math.nan,
                })
    _write_dicts(out / "fixed_kernel_runs.csv", rows, run.hash)
    table = _aggregate(rows, ("base", "regime"), ("benign_acc", "adv_acc"))
    _write_dicts(out / "fixed_kernel.csv", table, run.hash)
    return table


def run_sgd_ablation(cfg: ExperimentConfig, out=None, *, data=None) -> list[dict]:
    """Centering vs. plain SGD at two learning rates, under frozen and standard batch norm."""
    out = _out(cfg, out)
    run = Run(cfg, data)
    run.write_header(out)
    conditions = [("centering", cfg.stage2.lr)] + [("sgd", float(lr)) for lr in cfg.ablation.sgd_lrs]
    rows = []
    for r, rseed in enumerate(cfg.repeat_seeds()):
        rdir = out / f"repeat_{r}"
        s1 = run_stage1(run, rseed, rdir / "stage1", kernels=False, evaluate=False)
        parent = s1.snapshots[cfg.spawn_epoch()]
        for cond, lr in conditions:
            for policy in cfg.ablation.bn_policies:
                kind = "centered" if cond == "centering" else "standard"
                s2 = run_stage2(run, parent, rseed, rdir / f"{cond}_{lr!r}_{policy}", kind=kind,
                                bn_policy=policy, ablation=True, lr=lr, stage=f"ablate_{cond}_{policy}")
                rows.append({
                    "repeat": r, "condition": cond, "lr": lr, "bn_policy": policy,
                    "benign_acc": s2.final("test", "none"),
                    "adv_acc": s2.final("test", "pgd") if cfg.eval.adversarial else math.nan,
                    "kernel_distance": s2.kernel_distance,
                })
    _write_dicts(out / "sgd_ablation_runs.csv", rows, run.hash)
    table = _aggregate(rows, ("condition", "lr", "bn_policy"), ("benign_acc", "adv_acc", "kernel_distance"))
    _write_dicts(out / "sgd_ablation.csv", table, run.hash)
    return table


def run_transfer_study(cfg: ExperimentConfig, out=None, *, data=None) -> Path:
    """Attack sets from standard/linearized/centered models spawned at several epochs,
    evaluated on the final standard network (or a centered network on its kernel)."""
    out = _out(cfg, out)
    run = Run(cfg, data)
    run.write_header(out)
    E = cfg.stage1.epochs
    spawn_epochs = sorted({int(t) for t in (cfg.transfer.spawn_epochs or cfg.kernel_epochs())})
    C = run.data.num_classes
    idx = _balanced(run.data.y_test, cfg.transfer.n_eval, C, stream(cfg.seed, "subset", "transfer"))
    x, y = run.data.x_test[idx], run.data.y_test[idx]
    pgd_cfg = cfg.eval_pgd()
    for r, rseed in enumerate(cfg.repeat_seeds()):
        rdir = out / f"repeat_{r}"
        s1 = run_stage1(run, rseed, rdir / "stage1", keep_epochs=spawn_epochs, kernels=False, evaluate=False)
        final = s1.snapshots[E]
        if cfg.transfer.target == "centered":
            target = run_stage2(run, final, rseed, None, kind="centered", bn_policy="frozen",
                                kernel_distance_to_parent=False, stage="transfer_target").model
        else:
            target = DynamicsModel.from_snapshot(final, "standard", bn_policy="frozen", dtype=run.dtype)
        sources = []
        for t in spawn_epochs:
            for kind in cfg.transfer.kinds:
                if kind == "standard":
                    src = DynamicsModel.from_snapshot(s1.snapshots[t], "standard", bn_policy="frozen", dtype=run.dtype)
                else:
                    src = run_stage2(run, s1.snapshots[t], rseed, None, kind=kind,
                                     kernel_distance_to_parent=False, stage=f"transfer_{kind}_{t}").model
                adv = attack_dataset(src, x, y, pgd_cfg, stream(rseed, "pgd", "transfer", kind, t),
                                     tag={"kind": kind, "epoch": t})
                adv.save(rdir / "adversarial" / f"{kind}_{t:04d}.ntkadv", run.hash)
                sources.append(adv)
        self_set = attack_dataset(target, x, y, pgd_cfg, stream(rseed, "pgd", "transfer", "self"),
                                  tag={"kind": f"self_{cfg.transfer.target}", "epoch": E})
        records = transferability(target, sources, x, y, self_set=self_set, target_tag=cfg.transfer.target)
        write_transfer_csv(rdir / "transfer.csv", records, run.hash)
    return out


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy of ``cfg`` with whole fields or section attributes replaced, e.g.
    ``with_overrides(cfg, stage1={"regime": "adversarial"}, seed=3)``."""
    kw = {}
    for name, value in sections.items():
        current = getattr(cfg, name)
        kw[name] = replace(current, **value) if isinstance(value, dict) else value
    return replace(cfg, **kw).validate()


def _thirds(values: dict) -> tuple[float, float]:
    """Mean over the first and over the last third of the epochs (keys 1..E)."""
    E = max(values)
    early = [v for e, v in values.items() if e <= E / 3]
    late = [v for e, v in values.items() if e > 2 * E / 3]
    return float(np.mean(early)), float(np.mean(late))


def run_trend_study(cfg: ExperimentConfig, out=None, *, data=None) -> dict:
    """Kernel-convergence trend plus robustness of centered training on a learned kernel.

    For benign and adversarial stage 1, kernel velocity is averaged over the
    first and last thirds of training.  The adversarial run's initial and
    final snapshots then parent adversarial centered training, whose robust
    test accuracies are compared: the learned kernel wins when its mean
    exceeds the initial kernel's by more than twice the pooled seed spread.
    Writes ``trend.json`` and returns the same summary.
    """
    out = _out(cfg, out)
    E = cfg.stage1.epochs
    if E < 3:
        raise ValueError("the trend study needs at least 3 stage-1 epochs")
    cfg = with_overrides(cfg, kernel={"epochs": list(range(E + 1))}, eval={"adversarial": True})
    summary: dict = {"velocity": {}, "robust_accuracy": {}}
    parents: dict[str, list] = {"init": [], "adv_final": []}
    for regime in ("benign", "adversarial"):
        rcfg = with_overrides(cfg, stage1={"regime": regime, "t_switch": None})
        run = Run(rcfg, data)
        data = run.data
        rdir = out / regime
        run.write_header(rdir)
        for r, rseed in enumerate(rcfg.repeat_seeds()):
            s1 = run_stage1(run, rseed, rdir / f"repeat_{r}" / "stage1", evaluate=False)
            if regime == "adversarial":
                parents["init"].append(s1.snapshots[0])
                parents["adv_final"].append(s1.snapshots[E])
        run_metric_sweep(rdir)
        early, late = [], []
        for rd in sorted(rdir.glob("repeat_*")):
            rows = read_csv(rd / "stage1" / "metrics.csv")[1]
            vel = {int(x["epoch"]): float(x["value"]) for x in rows if x["metric"] == "kernel_velocity"}
            a, b = _thirds(vel)
            early.append(a)
            late.append(b)
        summary["velocity"][regime] = {
            "early": early, "late": late,
            "early_mean": float(np.mean(early)), "late_mean": float(np.mean(late)),
            "converging": bool(np.mean(late) < np.mean(early)),
        }
    run = Run(with_overrides(cfg, stage1={"regime": "adversarial", "t_switch": None}), data)
    acc = {}
    for base, snaps in parents.items():
        acc[base] = []
        for r, (rseed, parent) in enumerate(zip(cfg.repeat_seeds(), snaps)):
            s2 = run_stage2(run, parent, rseed, out / "fixed_kernel" / f"repeat_{r}" / base, kind="centered",
                            regime="adversarial", bn_policy="frozen", ablation=False,
                            kernel_distance_to_parent=False, stage=f"fixed_{base}_adversarial")
            acc[base].append(s2.final("test", "pgd"))
        mean, std = _mean_std(acc[base])
        summary["robust_accuracy"][base] = {"values": acc[base], "mean": mean, "std": std}
    ra = summary["robust_accuracy"]
    gap = ra["adv_final"]["mean"] - ra["init"]["mean"]
    spread = 2.0 * math.hypot(ra["adv_final"]["std"], ra["init"]["std"])
    summary["robust_gap"] = {"gap": gap, "two_sigma": spread, "learned_kernel_wins": bool(gap > spread)}
    summary["config_hash"] = cfg.hash()
    out.mkdir(parents=True, exist_ok=True)
    (out / "trend.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    return summary
