"""Plot-ready CSV bundle and run manifest."""

from __future__ import annotations

import hashlib
import json
import platform
import shutil
from pathlib import Path

import numpy as np
import torch

from .. import __version__, io
from ..adversary import ADV_MAGIC
from ..models import SNAPSHOT_MAGIC
from ..ntk import KERNEL_MAGIC
from .config import load_config
from .experiments import _mean_std, read_csv, write_csv

PANEL_COLUMNS = ("epoch", "series", "value", "std")
KERNEL_PANELS = ("kernel_velocity", "distance_to_final", "effective_rank", "mean_ksm")
_MAGIC = {".ntkk": KERNEL_MAGIC, ".ntksnap": SNAPSHOT_MAGIC, ".ntkadv": ADV_MAGIC}


class ConfigHashMismatch(ValueError):
    pass


def _artifact_hash(path: Path) -> str | None:
    if path.suffix == ".csv":
        return read_csv(path)[0]
    if path.suffix in _MAGIC:
        header, _ = io.read_container(path, _MAGIC[path.suffix])
        return header.get("config_hash", "")
    return None


def check_hashes(run_dir) -> str:
    """The run's config hash, after confirming every artifact carries it."""
    run_dir = Path(run_dir)
    expected = load_config(run_dir / "config.yaml").hash()
    bad = []
    for path in sorted(run_dir.rglob("*")):
        if not path.is_file() or "plots" in path.relative_to(run_dir).parts:
            continue
        h = _artifact_hash(path)
        if h is not None and h != expected:
            bad.append(f"{path.relative_to(run_dir)} ({h or 'unstamped'})")
    if bad:
        raise ConfigHashMismatch(f"artifacts from another configuration (expected {expected}): {', '.join(bad)}")
    return expected


def _accuracy_panel(run_dir: Path) -> list[tuple]:
    grouped: dict[tuple, list] = {}
    for path in sorted(run_dir.glob("repeat_*/*/accuracy.csv")):
        for r in read_csv(path)[1]:
            key = (int(r["epoch"]), f"{r['stage']}:{r['split']}:{r['attack']}")
            grouped.setdefault(key, []).append(float(r["accuracy"]))
    return [(e, s, *_mean_std(v)) for (e, s), v in sorted(grouped.items(), key=lambda kv: (kv[0][1], kv[0][0]))]


def _stage2_panel(run_dir: Path, metric: str) -> list[tuple]:
    grouped: dict[int, list] = {}
    for path in sorted(run_dir.glob("repeat_*/stage2/metrics.csv")):
        for r in read_csv(path)[1]:
            if r["metric"] == metric:
                grouped.setdefault(int(r["epoch"]), []).append(float(r["value"]))
    return [(e, "stage2", *_mean_std(v)) for e, v in sorted(grouped.items())]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def emit_plots_data(run_dir, out=None) -> Path:
    """Write ``plots/<panel>.csv`` files and ``manifest.json`` for one run directory."""
    run_dir = Path(run_dir)
    h = check_hashes(run_dir)
    cfg = load_config(run_dir / "config.yaml")
    plots = Path(out) if out is not None else run_dir / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    written = []
    if (run_dir / "metrics.csv").exists():
        rows = read_csv(run_dir / "metrics.csv")[1]
        series = f"stage1:{cfg.stage1.regime}"
        for panel in KERNEL_PANELS:
            data = [(int(r["epoch"]), series, float(r["value"]), float(r["std"])) for r in rows if r["metric"] == panel]
            written.append(write_csv(plots / f"{panel}.csv", PANEL_COLUMNS, data, h))
    acc = _accuracy_panel(run_dir)
    if acc:
        written.append(write_csv(plots / "accuracy.csv", PANEL_COLUMNS, acc, h))
    for metric in ("relative_magnitude", "kernel_distance_to_parent"):
        rows = _stage2_panel(run_dir, metric)
        if rows:
            written.append(write_csv(plots / f"{metric}.csv", PANEL_COLUMNS, rows, h))
    for table in ("fixed_kernel.csv", "sgd_ablation.csv"):
        if (run_dir / table).exists():
            written.append(Path(shutil.copyfile(run_dir / table, plots / table)))
    manifest = {
        "config_hash": h,
        "seed": cfg.seed,
        "repeat_seeds": cfg.repeat_seeds(),
        "versions": {
            "ntklab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "files": {p.name: _sha256(p) for p in written},
    }
    (plots / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return plots
