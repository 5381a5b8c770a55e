"""Command-line entry point: ``hds synth|train|crossval|holdout|eval``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Set ``HDS_LOG`` (DEBUG, INFO, WARNING) for log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data as data_mod
from .config import ConfigError, ExperimentConfig, load_config
from .dynamics import SIGNALS
from .solver import SolverError
from .training import (
    Checkpoint, EvalResult, NumericalError, crossvalidate, evaluate, heldout_eval, rmse_by_signal, train,
)

log = logging.getLogger("hds")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_predictions(path: Path, ev: EvalResult) -> None:
    rows = []
    for i, iid in enumerate(ev.ids):
        for s, name in enumerate(SIGNALS):
            for t, time in enumerate(ev.times):
                rows.append([iid, name, _fmt(time), _fmt(ev.pred_mean[i, s, t]), _fmt(ev.pred_std[i, s, t])])
    _write_csv(path, ["instance_id", "signal", "time", "mean", "std"], rows)


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_training(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(output=args.out)
    return cfg


def _save_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    ds = cfg.load_data() if cfg.data.path is None else None
    if ds is None:
        raise ConfigError("synth needs data.path unset (it writes a synthetic dataset)")
    out = Path(cfg.output)
    data_mod.save_dataset(ds, out / "data.csv")
    data_mod.save_truth(ds, out / "truth.json")
    print(f"wrote {len(ds)} instances to {out / 'data.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    resume = Checkpoint.load(args.from_checkpoint) if args.from_checkpoint else None
    if resume is not None and resume.config_hash != cfg.hash():
        raise ConfigError("--from-checkpoint was produced by a different configuration")
    ds = cfg.load_data()
    out = Path(cfg.output)
    _save_config(cfg, out)
    res = train(cfg, ds, np.arange(len(ds)), resume=resume, log_path=out / "metrics.ndjson",
                checkpoint_path=out / "checkpoint.npz")
    last = res.metrics[-1]["bound"] if res.metrics else float("nan")
    print(f"trained to epoch {res.checkpoint.epoch}; final training bound {last:.3f}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfg = _resolve(args)
    ds = cfg.load_data()
    out = Path(cfg.output)
    _save_config(cfg, out)
    result = crossvalidate(cfg, ds, out_dir=out, workers=args.threads)
    _write_csv(out / "folds.csv", ["instance_id", "device", "fold"],
               [[inst.id, inst.device, int(f)] for inst, f in zip(ds.instances, result.assignment)])
    rows = []
    for fold in result.folds:
        ev = fold.evaluation
        rows += [[iid, dev, fold.fold, _fmt(b)] for iid, dev, b in zip(ev.ids, ev.devices, ev.bounds)]
    _write_csv(out / "bounds.csv", ["instance_id", "device", "fold", "bound"], rows)
    summary = result.summary()
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_holdout(args) -> int:
    if not args.device:
        raise ConfigError("holdout needs --device NAME")
    cfg = _resolve(args)
    ds = cfg.load_data()
    try:
        data_mod.check_holdout(ds, args.device)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    out = Path(cfg.output)
    _save_config(cfg, out)
    res = heldout_eval(cfg, ds, args.device, out_dir=out)
    write_predictions(out / "predictions.csv", res.evaluation)
    curves = res.response_curves()
    cols = ["instance_id", "device", "signal", "series", "concentration", "observed", "mean", "lower", "upper"]
    _write_csv(out / "response_curves.csv", cols,
               [[r[c] if isinstance(r[c], str) else _fmt(r[c]) for c in cols] for r in curves])
    summary = {"device": args.device, "rmse": res.rmse, "mean_bound": res.evaluation.mean_bound,
               "composition": res.composition, "group_posterior": res.group_summary}
    _write_json(out / "summary.json", summary)
    print(json.dumps({"device": args.device, "rmse": res.rmse}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint PATH")
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    ckpt = Checkpoint.load(path)
    cfg = load_config(args.config) if args.config else ckpt.experiment()
    if args.seed is not None:
        cfg = cfg.with_training(seed=args.seed)
    out = Path(args.out or cfg.output)
    ds = cfg.load_data()
    ev = evaluate(ckpt, ds.instances, seed=cfg.training.seed)
    test = set(ckpt.test_ids)
    _write_csv(out / "bounds.csv", ["instance_id", "device", "split", "bound"],
               [[i, d, "test" if i in test else "train", _fmt(b)] for i, d, b in zip(ev.ids, ev.devices, ev.bounds)])
    write_predictions(out / "predictions.csv", ev)
    rmse = dict(zip(SIGNALS, (float(x) for x in rmse_by_signal(ev, ds.instances))))
    summary = {"mean_bound": ev.mean_bound, "n_instances": len(ev.ids), "rmse": rmse}
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "crossval": cmd_crossval, "holdout": cmd_holdout, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hds", description="Amortised inference for hierarchical ODE models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override training.seed")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="parallel workers (cross-validation folds)")
        if name == "holdout":
            p.add_argument("--device", required=True, help="device to hold out, e.g. R33-S34")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="checkpoint .npz to evaluate")
        if name == "train":
            p.add_argument("--from-checkpoint", help="resume training from this checkpoint")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("HDS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, data_mod.DataError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, SolverError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
