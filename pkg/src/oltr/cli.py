"""Command-line entry point: gen-data, train, eval, explore, gradcheck, report."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .datagen import save_dataset
from .experiment import build_data, epoch_csv, evaluate, explore, loop_csv
from .gradsuite import run_suite
from .metrics import EvalReport
from .training import train

log = logging.getLogger("oltr")

GRAD_TOLERANCE = 1e-4


def _config(args, manifest: dict | None = None) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    elif manifest is not None and "config" in manifest.get("extra", {}):
        cfg = ExperimentConfig(manifest["extra"]["config"])
    else:
        cfg = ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, precision=args.precision)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    data = build_data(cfg)
    out = Path(args.out)
    save_dataset(data.train, out / "train")
    save_dataset(data.test, out / "test")
    for i, pool in enumerate(data.pools, start=1):
        save_dataset(pool, out / f"pool_{i}")
    _write(out / "config.json", cfg.to_json())
    print(f"wrote {len(data.train)} train, {len(data.test)} test, {len(data.pools)} pools to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    data = build_data(cfg)
    out = Path(args.out)
    tcfg = cfg.training()
    extra = {"config": cfg.data}

    def checkpoint(state, row):
        if tcfg.checkpoint_every and state.epoch % tcfg.checkpoint_every == 0:
            save_checkpoint(state, out / f"checkpoint_e{state.epoch:03d}", cfg.hash(), extra)

    state, rows = train(data.train, cfg.model(), cfg.objective(), tcfg, eval_set=data.test, on_epoch=checkpoint)
    save_checkpoint(state, out / "checkpoint", cfg.hash(), extra)
    _write(out / "epochs.csv", epoch_csv(rows))
    _write(out / "config.json", cfg.to_json())
    print(f"trained {tcfg.epochs} epochs; checkpoint in {out / 'checkpoint'}")
    return 0


def _load(args):
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "checkpoint"
    manifest = read_manifest(ckpt)
    cfg = _config(args, manifest)
    state = load_checkpoint(ckpt, cfg.hash())
    return cfg, state


def cmd_eval(args) -> int:
    cfg, state = _load(args)
    report = evaluate(state, cfg)
    out = Path(args.out)
    _write(out / "report.json", report.to_json())
    _write(out / "report.csv", report.to_csv())
    print(f"overall {report.overall:.4f} few {report.few:.4f} F {report.f_measure:.4f} AUROC {report.auroc:.4f}")
    return 0


def cmd_explore(args) -> int:
    cfg, state = _load(args)
    _, rows = explore(state, cfg, policy=args.policy)
    out = Path(args.out)
    name = "loop.csv" if args.policy in (None, cfg.active["policy"]) else f"loop_{args.policy}.csv"
    _write(out / name, loop_csv(rows))
    last = rows[-1]
    print(f"width {last['classifier_width']} known {last['known_acc']:.4f} unknown {last['unknown_acc']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    result = run_suite(seed=args.seed or 0)
    for name, err in sorted(result.errors.items()):
        print(f"{name:22s} {err:.3e}")
    print(f"max rel err {result.max_error:.3e} over {result.instances} instances ({result.seconds:.1f} s)")
    return 0 if result.max_error <= GRAD_TOLERANCE else 1


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


SUMMARY_FIELDS = ("run", "epochs", "final_loss") + EvalReport.CSV_FIELDS + (
    "loop_stages", "loop_known_acc", "loop_unknown_acc", "loop_width")


def cmd_report(args) -> int:
    from . import plotting

    out = Path(args.out)
    runs = [Path(r) for r in args.runs] or sorted(p for p in out.iterdir() if p.is_dir())
    summary, reports = [], {}
    for run in runs:
        row = {k: "" for k in SUMMARY_FIELDS}
        row["run"] = run.name
        if (run / "epochs.csv").exists():
            epochs = _read_csv(run / "epochs.csv")
            if epochs:
                row.update(epochs=epochs[-1]["epoch"], final_loss=epochs[-1]["loss"])
                plotting.plot_training(epochs, out / f"{run.name}_training.png", run.name)
        if (run / "report.csv").exists():
            rep = _read_csv(run / "report.csv")[0]
            row.update({k: rep[k] for k in EvalReport.CSV_FIELDS})
            reports[run.name] = rep
        if (run / "loop.csv").exists():
            loop = _read_csv(run / "loop.csv")
            row.update(loop_stages=len(loop) - 1, loop_known_acc=loop[-1]["known_acc"],
                       loop_unknown_acc=loop[-1]["unknown_acc"], loop_width=loop[-1]["classifier_width"])
            plotting.plot_loop(loop, out / f"{run.name}_loop.png", run.name)
        summary.append(row)
    if reports:
        plotting.plot_split_accuracy(reports, out / "split_accuracy.png")
    out.mkdir(parents=True, exist_ok=True)
    with (out / "summary.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(summary)
    print(f"summarized {len(summary)} runs into {out / 'summary.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults are used for missing fields)")
    common.add_argument("--seed", type=int, help="overrides the dataset and training seeds")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"), help="training float precision")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="oltr", description="Open long-tailed recognition experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/test/pool datasets")
    sub.add_parser("train", parents=[common], help="train and write checkpoints plus epochs.csv")
    p = sub.add_parser("eval", parents=[common], help="write report.json and report.csv")
    p.add_argument("--checkpoint", help="checkpoint directory (default OUT/checkpoint)")
    p = sub.add_parser("explore", parents=[common], help="run the exploration loop, write loop.csv")
    p.add_argument("--checkpoint", help="checkpoint directory (default OUT/checkpoint)")
    p.add_argument("--policy", choices=("score", "random"), help="overrides active.policy")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p = sub.add_parser("report", parents=[common], help="merge run CSVs into OUT/summary.csv and draw figures")
    p.add_argument("runs", nargs="*", help="run directories (default: every subdirectory of OUT)")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "explore": cmd_explore,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    warnings.simplefilter("always")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
