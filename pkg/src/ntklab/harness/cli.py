"""Command-line entry point: ``ntklab <command> [options]``.

Each command reads one declarative config file (``--config``) plus
``--set key.path=value`` overrides.  Failures print a JSON object with
``error`` and ``message`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from ..adversary import AdversarialBatch, attack_dataset
from ..dynamics import accuracy
from ..models import ModelSnapshot
from ..seeding import stream
from ..spectral import VizConfig, extract_eigvec_features, render_features
from ..transfer import transferability, write_transfer_csv
from .config import ConfigError, load_config
from .experiments import (
    Run,
    load_dynamics,
    resume_stage2,
    run_fixed_kernel_adv,
    run_metric_sweep,
    run_sgd_ablation,
    run_transfer_study,
    run_trend_study,
    run_two_stage,
    write_csv,
)
from .export import emit_plots_data

log = logging.getLogger("ntklab")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    if args.eps is not None:
        overrides.append(f"pgd.epsilon={args.eps}")
    if args.precision is not None:
        overrides.append(f"precision={args.precision}")
    return load_config(args.config, overrides)


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _emit(payload: dict) -> None:
    print(json.dumps(_clean(payload), sort_keys=True, allow_nan=False))


def cmd_train(args):
    cfg = _config(args)
    if args.resume_from:
        target = resume_stage2(cfg.out, args.repeat, args.resume_from)
        _emit({"stage2_dir": str(target)})
        return
    out = run_two_stage(cfg)
    run_metric_sweep(out)
    _emit({"run_dir": str(out), "config_hash": cfg.hash()})


def _run_dir(args) -> Path:
    run_dir = Path(args.run or _config(args).out)
    if not (run_dir / "config.yaml").exists():
        raise CliError(f"no run directory at {run_dir} (config.yaml missing)")
    return run_dir


def cmd_metrics(args):
    run_dir = _run_dir(args)
    trace = run_metric_sweep(run_dir)
    _emit({"run_dir": str(run_dir), "rows": len(trace)})


def _split(run: Run, split: str, n: int | None):
    d = run.data
    x, y = (d.x_test, d.y_test) if split == "test" else (d.x_train, d.y_train)
    return (x, y) if n is None else (x[:n], y[:n])


def cmd_attack(args):
    cfg = _config(args)
    run = Run(cfg)
    model = load_dynamics(args.model, run.dtype)
    x, y = _split(run, args.split, args.n)
    if args.grid and x.ndim != 4:
        raise CliError("--grid needs image inputs (N, C, H, W)")
    adv = attack_dataset(model, x, y, cfg.eval_pgd(), stream(cfg.seed, "pgd", "cli"),
                         tag={"kind": model.kind, "epoch": args.epoch, "model": str(args.model)})
    path = Path(args.save or Path(cfg.out) / "adversarial" / f"{model.kind}.ntkadv")
    adv.save(path, run.hash)
    if args.grid:
        adv.dump_grid(args.grid)
    _emit({"adversarial_set": str(path), "accuracy_benign": accuracy(model, x, y),
           "accuracy_adversarial": accuracy(model, adv.perturbed, y), "linf": adv.linf()})


def cmd_transfer(args):
    cfg = _config(args)
    if not args.target:
        out = run_transfer_study(cfg)
        _emit({"run_dir": str(out)})
        return
    run = Run(cfg)
    target = load_dynamics(args.target, run.dtype)
    sources = [AdversarialBatch.load(p) for p in args.sources]
    if not sources:
        raise CliError("--sources is required with --target")
    x, y = sources[0].originals, sources[0].labels
    records = transferability(target, sources, x, y, cfg=cfg.eval_pgd(), seed=stream(cfg.seed, "pgd", "cli", "self"),
                              target_tag=str(args.target))
    path = write_transfer_csv(Path(cfg.out) / "transfer.csv", records, run.hash)
    _emit({"csv": str(path), "tau": [r.tau for r in records]})


def cmd_fixed_kernel(args):
    cfg = _config(args)
    table = run_fixed_kernel_adv(cfg, bases=args.bases)
    _emit({"run_dir": cfg.out, "table": table})


def cmd_ablate_sgd(args):
    cfg = _config(args)
    table = run_sgd_ablation(cfg)
    _emit({"run_dir": cfg.out, "table": table})


def cmd_trend(args):
    cfg = _config(args)
    summary = run_trend_study(cfg)
    _emit({"run_dir": cfg.out, **summary})


def cmd_visualize(args):
    cfg = _config(args)
    v = cfg.visualize
    run = Run(cfg)
    snap = ModelSnapshot.load(args.snapshot)
    n = min(args.samples or v.samples, len(run.x_kernel))
    feats = extract_eigvec_features(snap, run.x_kernel[:n], args.class_index if args.class_index is not None else v.class_index,
                                    args.top_k or v.top_k)
    out_dir = Path(cfg.out) / "visualize"
    iterations = v.iterations if args.iterations is None else args.iterations
    rows = render_features(snap, feats, out_dir, VizConfig(iterations=iterations, alpha=v.alpha))
    cols = tuple(rows[0]) if rows else ()
    write_csv(out_dir / "visualize.csv", cols, [tuple(r[c] for c in cols) for r in rows], run.hash)
    _emit({"out_dir": str(out_dir), "images": [r["file"] for r in rows],
           "cosines": [float(np.round(r["cosine"], 12)) for r in rows]})


def cmd_export(args):
    run_dir = _run_dir(args)
    plots = emit_plots_data(run_dir)
    _emit({"plots_dir": str(plots)})


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--eps", help="PGD radius: 4/255, 8/255 or a float")
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ntklab", description="Empirical NTK dynamics laboratory.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="two-stage training plus kernel metrics")
    p.add_argument("--resume-from", help="spawn snapshot to re-run stage 2 from")
    p.add_argument("--repeat", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("metrics", parents=[common], help="kernel metric sweep over a run directory")
    p.add_argument("--run")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("attack", parents=[common], help="PGD adversarial set against a saved model")
    p.add_argument("--model", required=True, help="snapshot file or stage-2 model directory")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--n", type=int)
    p.add_argument("--epoch", type=int)
    p.add_argument("--save")
    p.add_argument("--grid", help="also write an image grid (PGM/PPM)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("transfer", parents=[common], help="adversarial transferability")
    p.add_argument("--target", help="target model; omit to run the configured study")
    p.add_argument("--sources", nargs="*", default=[])
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("fixed-kernel", parents=[common], help="centered training on fixed base kernels")
    p.add_argument("--bases", nargs="+", choices=("init", "benign_final", "adv_final"))
    p.set_defaults(func=cmd_fixed_kernel)

    p = sub.add_parser("ablate-sgd", parents=[common], help="centering vs. SGD under both batch-norm policies")
    p.set_defaults(func=cmd_ablate_sgd)

    p = sub.add_parser("trend", parents=[common], help="kernel convergence trend and learned-kernel robustness")
    p.set_defaults(func=cmd_trend)

    p = sub.add_parser("visualize", parents=[common], help="NTK eigenvector images")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--class-index", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("export", parents=[common], help="plot-ready CSVs and manifest")
    p.add_argument("--run")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        args.func(args)
        return 0
    except (CliError, ConfigError) as exc:
        code = 2
        err = exc
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error record
        code = 1
        err = exc
    sys.stderr.write(json.dumps({"error": type(err).__name__, "message": str(err)}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
