"""Command line entry point: ``yieldpaint {generate,mask,train,evaluate,report,run}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from yieldpaint import dae
from yieldpaint.harness import (
    DAE_METHODS,
    MASKINGS,
    ConfigError,
    ExperimentError,
    load_config,
    load_data,
    masking_seed,
    prepare_split,
    run_experiment,
    train_dae,
)
from yieldpaint.masking import corrupt
from yieldpaint.metrics import error_metrics, read_report, write_report
from yieldpaint.surface import CSV_HEADER, generate_synthetic, load_csv, save_csv, scale_to_unit

log = logging.getLogger("yieldpaint")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="TOML or JSON experiment config")
    p.add_argument("--seed", type=int, help="global seed (overrides config and YIELDPAINT_SEED)")
    p.add_argument("--out", type=Path, help="output path")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="yieldpaint", description="Sparse yield-surface reconstruction benchmark.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic surface CSV")
    p.add_argument("--n", type=int, help="number of surfaces (default: [data] n)")

    p = sub.add_parser("mask", parents=[common], help="corrupt every surface of a CSV once")
    p.add_argument("--input", type=Path, required=True, help="surface CSV")
    p.add_argument("--kind", choices=MASKINGS, default="uniform")

    p = sub.add_parser("train", parents=[common], help="train autoencoders and write checkpoints")
    p.add_argument("--method", action="append", choices=DAE_METHODS,
                   help="repeatable; default: autoencoders listed in the config")
    p.add_argument("--masking", action="append", choices=MASKINGS, help="repeatable; default: config kinds")

    p = sub.add_parser("evaluate", parents=[common], help="score checkpoints on the held-out pairs")
    p.add_argument("--checkpoint", type=Path, action="append", required=True, help="checkpoint .json (repeatable)")

    p = sub.add_parser("report", parents=[common], help="print report.csv as per-masking tables")
    p.add_argument("--report", type=Path, help="report CSV (default: <out>/report.csv)")

    sub.add_parser("run", parents=[common], help="end-to-end benchmark")
    return parser


def _config(args):
    return load_config(args.config, {"seed": args.seed})


def _out_dir(args, cfg) -> Path:
    return Path(args.out) if args.out is not None else Path(cfg.out)


def cmd_generate(args) -> int:
    cfg = _config(args)
    n = args.n if args.n is not None else cfg.data.n
    if n < 1:
        raise ConfigError("--n must be >= 1")
    ds = generate_synthetic(cfg.synthetic_config(), n)
    path = args.out or Path(cfg.out) / "surfaces.csv"
    save_csv(ds, path)
    print(f"wrote {len(ds)} surfaces to {path}")
    return 0


def cmd_mask(args) -> int:
    cfg = _config(args)
    ds = load_csv(args.input)
    spec = cfg.masking.spec(args.kind, ds.shape, masking_seed(cfg.seed, args.kind))
    rng = np.random.default_rng(spec.seed)
    path = args.out or Path(cfg.out) / f"masked_{args.kind}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER + ("observed",))
        for s in ds.surfaces:
            m = corrupt(s, spec, rng)
            for i, r in enumerate(ds.ratings.labels):
                for j, t in enumerate(ds.tenors.tenors):
                    w.writerow((s.date.isoformat(), r, f"{t:g}", f"{m.values[i, j]:.9f}", int(m.observed[i, j])))
    print(f"wrote {len(ds)} {args.kind}-masked surfaces to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    methods = args.method or [m for m in cfg.methods if m in DAE_METHODS]
    if not methods:
        raise ConfigError("no autoencoder method selected (config lists none; use --method)")
    kinds = args.masking or list(cfg.masking.kinds)
    raw = load_data(cfg)
    scaled = scale_to_unit(raw)
    for kind in kinds:
        split = prepare_split(cfg, raw, scaled, kind)
        for method in methods:
            _, paths = train_dae(cfg, method, split, scaled.scale_factor, out)
            print(f"{method}/{kind}: {paths[0]}")
    return 0


def cmd_evaluate(args) -> int:
    models = []
    for path in args.checkpoint:
        try:
            models.append((path, dae.DaeModel.load(path)))
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"checkpoint {path}: {exc}") from None
    cfg = _config(args)
    raw = load_data(cfg)
    scaled = scale_to_unit(raw)
    rows, splits = [], {}
    for path, model in models:
        if model.config is None:
            raise ValueError(f"checkpoint {path} has no training config; cannot rebuild its test pairs")
        kind = model.config.corruption.kind
        if kind not in splits:
            splits[kind] = prepare_split(cfg, raw, scaled, kind)
        split = splits[kind]
        if model.config.corruption != split.spec:
            log.warning("%s was trained with %s but is scored on %s", path, model.config.corruption, split.spec)
        rep = error_metrics(split.test_truth, dae.reconstruct_many(model, split.test_masked))
        rows.append((model.arch.kind, kind, rep))
        print(f"{path}: {model.arch.kind}/{kind} MAE {rep.mae_bps:.2f} bps, RMSE {rep.rmse_bps:.2f} bps, "
              f"monotonicity violations {rep.mono_violation_pct:.2f}%")
    target = _out_dir(args, cfg) / "evaluate.csv"
    write_report(rows, target)
    print(f"wrote {target}")
    return 0


REPORT_LINES = (
    ("MAE (bps)", "mae_bps"),
    ("MAE (%)", "mae_pct"),
    ("RMSE (bps)", "rmse_bps"),
    ("RMSE (%)", "rmse_pct"),
    ("Monotonicity violations (%)", "mono_violation_pct"),
)


def format_report(rows: list[dict]) -> str:
    order = {m: i for i, m in enumerate(("tv", "tps", "fcnn", "cnn", "cnn_pe"))}
    blocks = []
    for kind in sorted({r["masking"] for r in rows}, key=lambda k: (MASKINGS + (k,)).index(k)):
        sel = sorted((r for r in rows if r["masking"] == kind), key=lambda r: order.get(r["method"], 99))
        head = f"{kind} masking".ljust(30) + "".join(r["method"].rjust(10) for r in sel)
        lines = [head, "-" * len(head)]
        for label, key in REPORT_LINES:
            lines.append(label.ljust(30) + "".join(f"{r[key]:10.2f}" for r in sel))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def cmd_report(args) -> int:
    if args.report is not None:
        path = args.report
    else:
        out = args.out if args.out is not None else Path(_config(args).out)
        path = out / "report.csv"
    if not Path(path).exists():
        raise FileNotFoundError(f"report not found: {path}")
    print(format_report(read_report(path)))
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    manifest = run_experiment(cfg, out)
    print(format_report(read_report(out / "report.csv")))
    print(f"\nwrote {out / 'report.csv'} and {out / 'manifest.json'} "
          f"({manifest.wall_time['total']:.1f} s, config {manifest.config_hash[:12]})")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "mask": cmd_mask,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"yieldpaint {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (ExperimentError, FileNotFoundError, OSError, ValueError, dae.TrainingDiverged) as exc:
        print(f"yieldpaint {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
