"""Command-line driver.

Exit codes: 0 success, 1 configuration error, 2 runtime error. Every file a
subcommand writes lands under the configured output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, serialize_config, with_overrides
from .data import generate_texture_dataset, load_image_folder, write_tensor
from .diffcore.checkpoint import load_checkpoint, restore, save_checkpoint
from .diffcore.gradcheck import full_suite
from .errors import ConfigError
from .network import EHybridNet, format_shape_table, static_shape_check
from .scattering import ScatteringCache, scatter
from .training import (build_model, evaluate, run_ablation_suite, run_subsample_sweep, train_and_evaluate,
                       write_final, write_per_class_ap, write_report)
from .wavelets import dump_filter_bank

SUBCOMMANDS = ("train", "eval", "ablate", "subsample-sweep", "scatter-dump", "shape-check", "gradcheck")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config file (a bundled name such as desk32.cfg also works)")
    common.add_argument("--seed", type=int, help="training seed (overrides train.seed and experiment.seeds)")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--arm", choices=("hybrid", "baseline"))
    common.add_argument("--fraction", type=float, help="training-set fraction in (0, 1]")
    common.add_argument("--ablation", choices=("none", "scat", "net"))

    parser = _Parser(prog="ehybrid", description="Scattering-fused convolutional networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train one model and evaluate it")
    p = sub.add_parser("eval", parents=[common], help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", help="defaults to <out>/checkpoint.bin")
    sub.add_parser("ablate", parents=[common], help="hybrid vs ablated arms vs baseline")
    sub.add_parser("subsample-sweep", parents=[common], help="hybrid and baseline at reduced training sets")
    p = sub.add_parser("scatter-dump", parents=[common], help="write scattering coefficients and filters")
    p.add_argument("--count", type=int, default=8, help="number of training images to transform")
    p = sub.add_parser("shape-check", parents=[common], help="print the static shape table")
    p.add_argument("--runtime", action="store_true", help="also run a forward pass and compare shapes")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    return parser


def load_datasets(cfg: RunConfig):
    d, m = cfg.data, cfg.model
    if d.source == "synthetic":
        train, test = generate_texture_dataset(d.classes, d.per_class, m.resolution, d.seed, m.in_channels)
    else:
        train = load_image_folder(d.train_dir, m.resolution, "train")
        test = load_image_folder(d.test_dir, m.resolution, "test")
        if train.class_names != test.class_names:
            raise ConfigError("data.test_dir: class folders differ from data.train_dir")
    if train.num_classes != m.num_classes:
        raise ConfigError(f"model.num_classes: {m.num_classes} but the dataset has {train.num_classes} classes")
    if train.images.shape[1] != m.in_channels:
        raise ConfigError(f"model.in_channels: {m.in_channels} but images have {train.images.shape[1]}")
    return train, test


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg: RunConfig) -> int:
    train_set, test_set = load_datasets(cfg)
    out = _out_dir(cfg)
    model, report = train_and_evaluate(cfg.model_spec(), train_set, test_set, cfg.train, cfg.model.arm)
    save_checkpoint(model.param_store(), out / "checkpoint.bin")
    write_report(out, report)
    (out / "config.cfg").write_text(serialize_config(cfg))
    print(f"{report.arm} mAP {report.map:.4f} ({len(report.train_loss)} epochs) -> {out}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str | None) -> int:
    _, test_set = load_datasets(cfg)
    out = Path(cfg.output.dir)
    path = Path(checkpoint) if checkpoint else out / "checkpoint.bin"
    if not path.is_file():
        raise ConfigError(f"--checkpoint: file not found: {path}")
    model = build_model(cfg.model_spec(), cfg.train.seed, cfg.model.arm)
    if cfg.train.ablation != "none":
        model.set_ablation(cfg.train.ablation)
    restore(model.param_store(), load_checkpoint(path))
    report = evaluate(model, test_set, batch_size=cfg.train.eval_batch_size,
                      deterministic=cfg.train.deterministic)
    report.arm = cfg.model.arm
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    write_per_class_ap(eval_dir / "per_class_ap.csv", report)
    write_final(eval_dir / "final.csv", [(report.arm, report.map)])
    print(f"{report.arm} mAP {report.map:.4f}")
    for k, ap in enumerate(report.per_class_ap):
        print(f"  class {k}: " + ("excluded" if ap is None else f"{ap:.4f}"))
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    train_set, test_set = load_datasets(cfg)
    out = _out_dir(cfg)
    cache = ScatteringCache()
    rep = run_ablation_suite(cfg.model_spec(), train_set, test_set, cfg.train, cfg.experiment.seeds,
                             cfg.experiment.arms, cache, log=_log)
    rows = [(f"{arm}:seed={seed}", m) for arm, seed, m in rep.rows]
    rows += [(f"{arm}:mean", m) for arm, m in rep.means.items()]
    write_final(out / "final.csv", rows)
    write_final(out / "deltas.csv", [(f"{arm}-hybrid", d) for arm, d in rep.deltas.items()])
    for (arm, seed), r in rep.reports.items():
        run_dir = out / f"{arm}_seed{seed}"
        run_dir.mkdir(exist_ok=True)
        write_report(run_dir, r)
    for arm, m in rep.means.items():
        delta = rep.deltas.get(arm)
        print(f"{arm:<14} mAP {m:.4f}" + ("" if delta is None else f"  delta vs hybrid {delta:+.4f}"))
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    train_set, test_set = load_datasets(cfg)
    out = _out_dir(cfg)
    rep = run_subsample_sweep(cfg.model_spec(), train_set, test_set, cfg.train, cfg.experiment.fractions,
                              cache=ScatteringCache(), log=_log)
    write_final(out / "final.csv", [(label, m) for label, _, m in rep.rows])
    for label, r in rep.reports.items():
        run_dir = out / label.replace("@", "_f")
        run_dir.mkdir(exist_ok=True)
        write_report(run_dir, r)
    for label, _, m in rep.rows:
        print(f"{label:<16} mAP {m:.4f}")
    return 0


def cmd_scatter_dump(cfg: RunConfig, count: int) -> int:
    if count < 1:
        raise ConfigError(f"--count must be positive, got {count}")
    train_set, _ = load_datasets(cfg)
    out = _out_dir(cfg)
    spec = cfg.model_spec()
    model = EHybridNet(spec)
    x = train_set.images[:count]
    for J, bank in sorted(model.banks.items()):
        result = scatter(x, bank, spec.scattering_config(J))
        write_tensor(out / f"scatter_J{J}.tnsr", result.coefficients)
        (out / f"paths_J{J}.txt").write_text(result.manifest())
        dump_filter_bank(bank, out / f"filters_J{J}")
        print(f"J={J}: {result.coefficients.shape} -> {out / f'scatter_J{J}.tnsr'}")
    return 0


def cmd_shape_check(cfg: RunConfig, runtime: bool) -> int:
    spec = cfg.model_spec(hybrid=cfg.model.arm == "hybrid")
    table = static_shape_check(spec)
    print(format_shape_table(table))
    if runtime:
        model = EHybridNet(spec, dtype=np.float32)
        model.eval()
        trace = []
        x = np.zeros((1, spec.in_channels, spec.input_resolution, spec.input_resolution), np.float32)
        model(x, trace=trace)
        mismatched = [(a, b) for a, b in zip(table, trace) if a != b]
        if mismatched or len(trace) != len(table):
            for a, b in mismatched:
                print(f"mismatch: static {a} runtime {b}")
            return 2
        print("runtime shapes match the static table")
    return 0


def cmd_gradcheck() -> int:
    results = full_suite()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<28} max rel err {r.max_rel_err:.2e} (tol {r.tolerance:g})")
    return 0 if all(r.passed for r in results) else 2


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = with_overrides(cfg, args.seed, args.out, args.arm, args.fraction, args.ablation)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "subsample-sweep":
            return cmd_sweep(cfg)
        if args.command == "scatter-dump":
            return cmd_scatter_dump(cfg, args.count)
        if args.command == "shape-check":
            return cmd_shape_check(cfg, args.runtime)
        return cmd_gradcheck()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure as an exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
