"""Command-line interface.

Subcommands: gen-data, train, train-dsf, run, evaluate, export-plot.
Artifacts land under --out with fixed names (ckpt_stage1.bin, ckpt_dsf.bin,
tracks.jsonl, forecasts.jsonl, report.json, curves.csv).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import autodiff as ad
from . import pipeline
from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     DivergenceError, NumericError)
from .pipeline import ARTIFACT_NAMES, RunConfig
from .scenes import read_scene

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; we reserve 2
        self.print_usage(sys.stderr)
        raise SystemExit((EXIT_USAGE, message))


def _build_parser() -> _Parser:
    parser = _Parser(prog="trackcast",
                     description="Joint tracking and trajectory forecasting "
                                 "on synthetic driving scenes.")
    parser.add_argument("--config", type=Path, help="RunConfig JSON file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", type=Path, default=Path("out"),
                        help="artifact directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic dataset")
    sub.add_parser("train", help="stage-1 training (tracking + forecasting)")

    p = sub.add_parser("train-dsf", help="stage-2 training of the sampler")
    p.add_argument("--stage1", type=Path, default=None,
                   help="stage-1 checkpoint (default: <out>/ckpt_stage1.bin)")

    p = sub.add_parser("run", help="track and forecast one scene")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, default=None,
                   help="checkpoint (default: sampler ckpt if present, else "
                        "stage-1, under <out>)")

    p = sub.add_parser("evaluate", help="score tracking/forecast output files")
    p.add_argument("--scene", type=Path, required=True,
                   help="ground-truth scene file")
    p.add_argument("--tracks", type=Path, default=None,
                   help="tracking output (default: <out>/tracks.jsonl)")
    p.add_argument("--forecasts", type=Path, default=None,
                   help="forecast output (default: <out>/forecasts.jsonl)")

    p = sub.add_parser("export-plot", help="plot the recall-sweep curves")
    p.add_argument("--curves", type=Path, default=None,
                   help="curves CSV (default: <out>/curves.csv)")
    p.add_argument("--plot", type=Path, default=None,
                   help="output image (default: <out>/curves.png)")
    return parser


def _load_config(args) -> RunConfig:
    config = RunConfig.from_json(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    return config


def _load_store(config: RunConfig, path: Path) -> ad.ParamStore:
    store = pipeline.build_model(config)
    values, _ = ad.load_checkpoint(path)
    store.load_values(values)
    return store


def _cmd_gen_data(args, config: RunConfig) -> int:
    paths = pipeline.generate_dataset(config, Path(config.data_dir))
    print(f"wrote {len(paths)} scenes under {config.data_dir}")
    return EXIT_OK


def _cmd_train(args, config: RunConfig) -> int:
    scenes = pipeline.load_dataset(config.data_dir)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / ARTIFACT_NAMES["stage1"]
    try:
        store, history = pipeline.train_stage1(config, scenes, log=print)
    except DivergenceError as exc:
        if exc.last_good_values is not None:
            ad.save_checkpoint(ckpt, exc.last_good_values)
            print(f"training diverged; last good checkpoint saved to {ckpt}",
                  file=sys.stderr)
        raise
    ad.save_checkpoint(ckpt, store)
    print(f"stage-1 checkpoint: {ckpt} ({len(history)} epochs)")
    return EXIT_OK


def _cmd_train_dsf(args, config: RunConfig) -> int:
    stage1 = args.stage1 or (args.out / ARTIFACT_NAMES["stage1"])
    if not Path(stage1).exists():
        raise ConfigError(f"stage-1 checkpoint not found: {stage1}")
    scenes = pipeline.load_dataset(config.data_dir)
    store = _load_store(config, stage1)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / ARTIFACT_NAMES["dsf"]
    try:
        store, history, omega = pipeline.train_stage2_dsf(config, store,
                                                          scenes, log=print)
    except DivergenceError as exc:
        if exc.last_good_values is not None:
            ad.save_checkpoint(ckpt, exc.last_good_values,
                               provenance_hash=pipeline.checkpoint_sha256(stage1))
            print(f"training diverged; last good checkpoint saved to {ckpt}",
                  file=sys.stderr)
        raise
    ad.save_checkpoint(ckpt, store,
                       provenance_hash=pipeline.checkpoint_sha256(stage1))
    print(f"sampler checkpoint: {ckpt} (omega {omega:.6g}, "
          f"{len(history)} epochs)")
    return EXIT_OK


def _cmd_run(args, config: RunConfig) -> int:
    ckpt = args.ckpt
    if ckpt is None:
        dsf_ckpt = args.out / ARTIFACT_NAMES["dsf"]
        stage1_ckpt = args.out / ARTIFACT_NAMES["stage1"]
        ckpt = dsf_ckpt if dsf_ckpt.exists() else stage1_ckpt
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    scene = read_scene(args.scene)
    store = _load_store(config, ckpt)
    result = pipeline.run_inference(config, store, scene, out_dir=args.out)
    print(f"{len(result['tracks'])} track records, "
          f"{len(result['forecasts'])} forecast records under {args.out}")
    return EXIT_OK


def _cmd_evaluate(args, config: RunConfig) -> int:
    scene = read_scene(args.scene)
    tracks = args.tracks or (args.out / ARTIFACT_NAMES["tracks"])
    if not Path(tracks).exists():
        raise DataError(f"tracking output not found: {tracks}")
    forecasts = args.forecasts or (args.out / ARTIFACT_NAMES["forecasts"])
    report = pipeline.evaluate_run(config, scene, tracks,
                                   forecasts_path=forecasts, out_dir=args.out)
    for key in ("samota", "amota", "amotp", "mota", "motp", "ids", "fp", "fn"):
        print(f"{key:>8}: {report[key]}")
    if "forecast" in report:
        for key, value in report["forecast"].items():
            print(f"{key:>8}: {value}")
    return EXIT_OK


def _cmd_export_plot(args, config: RunConfig) -> int:
    curves_path = args.curves or (args.out / ARTIFACT_NAMES["curves"])
    if not Path(curves_path).exists():
        raise DataError(f"curves file not found: {curves_path}")
    out_path = args.plot or (args.out / "curves.png")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(curves_path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{curves_path}: no curve rows")
    recall = [float(r["recall"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for column, label in (("MOTA_r", "MOTA"), ("sMOTA_r", "sMOTA"),
                          ("MOTP_r", "MOTP")):
        ax.plot(recall, [float(r[column]) for r in rows], marker="o",
                label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("metric")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    print(f"wrote {out_path}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "train-dsf": _cmd_train_dsf,
    "run": _cmd_run,
    "evaluate": _cmd_evaluate,
    "export-plot": _cmd_export_plot,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, tuple):
            code, message = exc.code
            print(f"error: {message}", file=sys.stderr)
            return code
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        config = _load_config(args)
        return _COMMANDS[args.command](args, config)
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ContractError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DivergenceError, DimensionError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
