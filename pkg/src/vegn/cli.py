"""``vegn`` command line: generate, train, dist-train, eval, check."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checks
from .autodiff import ParamStore
from .config import DEFAULTS, ConfigError, RunConfig, parse_config_text
from .dist import DistEngine
from .model import BACKBONES, Model
from .nbody import SPLITS, DatasetFormatError, build_dataset, charge_edge_attr, read_dataset, write_dataset
from .trainer import TrainingDiverged, evaluate, rollout, train, write_metrics

CONFIG_FILE = "config.resolved"
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
REPORT_FILE = "report.json"


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"{out} exists; pass --force to overwrite")
    seed = args.seed
    if seed is None:
        seed = int(os.environ["VEGN_SEED"]) if os.environ.get("VEGN_SEED") else 0
    ds = build_dataset(
        args.train, args.val, args.test, args.n_particles, args.delta_t, seed,
        t_input=args.t_input, dt_sim=args.dt_sim, substeps=args.substeps, softening=args.softening,
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    print(f"wrote {out}: " + ", ".join(f"{s}={len(ds.splits[s])}" for s in SPLITS))
    return 0


# ---------------------------------------------------------------------------
# train / dist-train
# ---------------------------------------------------------------------------


def _flags(args) -> dict:
    return {k: getattr(args, k, None) for k in DEFAULTS}


def _run_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"{out} is not empty; pass --force to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train(args, distributed: bool) -> int:
    cfg = RunConfig.resolve(args.config, _flags(args))
    if not distributed and cfg.dist().devices != 1:
        raise CliError("train is single-device; use dist-train for devices > 1")
    out = _run_dir(args.out, args.force)
    (out / CONFIG_FILE).write_text(cfg.render())
    ds = read_dataset(args.data)
    mcfg, tcfg, dopt = cfg.model(), cfg.train(), cfg.dist()
    factory = None
    if distributed:
        def factory(model, adam):
            return DistEngine(
                model, adam, dopt.devices, tcfg.seed, dopt.partition, dopt.transport,
                radius=dopt.radius if dopt.radius > 0 else None,
                edge_attr_fn=charge_edge_attr, dynamic=dopt.radius_mode == "dynamic",
            )

    metrics = open(out / METRICS_FILE, "w")

    def log(rec):
        metrics.write(json.dumps(rec, sort_keys=True) + "\n")
        metrics.flush()
        if not args.quiet:
            val = rec.get("val_mse", float("nan"))
            print(f"epoch {rec['epoch']:4d}  loss {rec['train_loss']:.4e}  val {val:.4e}  {rec['seconds']:.1f}s")

    t0 = time.perf_counter()
    report: dict = {"status": "ok", "distributed": distributed, "devices": dopt.devices}
    try:
        res = train(ds.samples("train"), ds.samples("val"), mcfg, tcfg, factory, log)
    except TrainingDiverged as exc:
        write_metrics(exc.history, out / METRICS_FILE)
        report.update(status="diverged", error=str(exc))
        (out / REPORT_FILE).write_text(json.dumps(report, indent=2))
        print(f"vegn {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1
    finally:
        metrics.close()
    res.model.params.save(out / CHECKPOINT_FILE)
    test = evaluate(res.model, ds.samples("test"), seed=tcfg.seed) if "test" in ds.splits and len(ds.splits["test"]) else None
    report.update(
        best_epoch=res.best_epoch,
        best_val_mse=res.best_val_mse,
        epochs_run=len(res.history),
        stopped_early=res.stopped_early,
        train_seconds=time.perf_counter() - t0,
        test_mse=test.mse if test else None,
        test_seconds=test.seconds if test else None,
    )
    (out / REPORT_FILE).write_text(json.dumps(report, indent=2))
    print(f"best epoch {res.best_epoch}  val {res.best_val_mse:.4e}" + (f"  test {test.mse:.4e}" if test else ""))
    return 0


def cmd_train(args) -> int:
    return _train(args, distributed=False)


def cmd_dist_train(args) -> int:
    return _train(args, distributed=True)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def load_run(run_dir: str | Path, checkpoint: str | None = None) -> Model:
    run_dir = Path(run_dir)
    values = parse_config_text((run_dir / CONFIG_FILE).read_text(), str(run_dir / CONFIG_FILE))
    cfg = RunConfig.resolve(None, values, env={})
    store = ParamStore.load(checkpoint or run_dir / CHECKPOINT_FILE)
    try:
        return Model(cfg.model(), cfg.values["seed"], store)
    except ValueError as exc:
        raise CliError(f"checkpoint does not match the run configuration: {exc}") from exc


def cmd_eval(args) -> int:
    model = load_run(args.run, args.checkpoint)
    if args.drop_rate is not None:
        model.config.drop_rate = args.drop_rate
        model.config.validate()
    ds = read_dataset(args.data)
    pairs = ds.samples(args.split)
    if args.limit:
        pairs = pairs[:args.limit]
    res = evaluate(model, pairs, args.n_rot, args.seed, translations=args.translations, reflections=args.reflections)
    report = {"mse": res.mse, "seconds": res.seconds, "n_samples": res.n_samples, "relative_time": None,
              "split": args.split, "drop_rate": model.config.drop_rate}
    if args.baseline:
        base = load_run(args.baseline)
        bres = evaluate(base, pairs, args.n_rot, args.seed, translations=args.translations, reflections=args.reflections)
        report["baseline_seconds"] = bres.seconds
        report["relative_time"] = res.seconds / bres.seconds if bres.seconds > 0 else None
    if args.rollout:
        k = args.sample
        coords = rollout(model, pairs[k], args.rollout, float(ds.meta["frame_dt"]))
        path = Path(args.rollout_out or Path(args.run) / f"rollout_{k}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "node", "x", "y", "z"])
            for s in range(coords.shape[0]):
                for i in range(coords.shape[1]):
                    w.writerow([s + 1, i, *(repr(float(c)) for c in coords[s, i])])
        report["rollout_file"] = str(path)
        report["rollout_steps"] = args.rollout
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def cmd_check(args) -> int:
    suites = checks.SUITES if args.suite == "all" else (args.suite,)
    ok = True
    for name in suites:
        rep = checks.run_suite(name, args.negative_control, args.tolerance, args.backbone)
        print(rep.format())
        ok = ok and rep.passed
    if args.negative_control:
        print("negative control: the planted defect " + ("was NOT detected" if ok else "was detected"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset file from 'vegn generate'")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--force", action="store_true")
    p.add_argument("--quiet", action="store_true")
    g = p.add_argument_group("model")
    g.add_argument("--backbone", choices=BACKBONES)
    g.add_argument("--layers", type=int)
    g.add_argument("--hidden", type=int)
    g.add_argument("--virtual-nodes", dest="virtual_nodes", type=int)
    g.add_argument("--drop-rate", dest="drop_rate", type=float)
    g.add_argument("--mmd-weight", dest="mmd_weight", type=float)
    g.add_argument("--mmd-sigma", dest="mmd_sigma", type=float)
    g.add_argument("--mmd-samples", dest="mmd_samples", type=int)
    g.add_argument("--virtual-message", dest="virtual_message", choices=("pair", "global"))
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--eval-period", dest="eval_period", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--seed", type=int)


def _add_dist_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("distributed")
    g.add_argument("--devices", type=int)
    g.add_argument("--partition", choices=("random", "grid"))
    g.add_argument("--radius-mode", dest="radius_mode", choices=("fixed", "dynamic"))
    g.add_argument("--radius", type=float, help="local radius graph cutoff; 0 keeps the sample's edges")
    g.add_argument("--transport", choices=("inproc", "socket"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vegn", description="E(n)-equivariant GNNs with virtual nodes")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate an N-body dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-particles", dest="n_particles", type=int, default=30)
    p.add_argument("--train", type=int, default=1000)
    p.add_argument("--val", type=int, default=200)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--delta-t", dest="delta_t", type=int, default=10)
    p.add_argument("--t-input", dest="t_input", type=int, default=30)
    p.add_argument("--substeps", type=int, default=10)
    p.add_argument("--dt-sim", dest="dt_sim", type=float, default=1e-3)
    p.add_argument("--softening", type=float, default=0.1)
    p.add_argument("--seed", type=int, help="default: $VEGN_SEED, else 0")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="single-device training")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("dist-train", help="training over D simulated devices")
    _add_run_flags(p)
    _add_dist_flags(p)
    p.set_defaults(fn=cmd_dist_train)

    p = sub.add_parser("eval", help="rotation-augmented test MSE, timing and rollouts")
    p.add_argument("--run", required=True, help="run directory with config.resolved and checkpoint.bin")
    p.add_argument("--checkpoint", help="override the run's checkpoint file")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--n-rot", dest="n_rot", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N samples")
    p.add_argument("--drop-rate", dest="drop_rate", type=float, help="override the sparsification rate")
    p.add_argument("--translations", action="store_true")
    p.add_argument("--reflections", action="store_true")
    p.add_argument("--baseline", help="run directory whose wall time is the relative-time reference")
    p.add_argument("--rollout", type=int, default=0, metavar="K")
    p.add_argument("--sample", type=int, default=0, help="sample index for --rollout")
    p.add_argument("--rollout-out", dest="rollout_out")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("check", help="run property suites")
    p.add_argument("--suite", default="all", choices=checks.SUITES + ("all",))
    p.add_argument("--tolerance", type=float)
    p.add_argument("--backbone", default="fast_egnn", choices=BACKBONES)
    p.add_argument("--negative-control", dest="negative_control", action="store_true")
    p.set_defaults(fn=cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, DatasetFormatError, FileNotFoundError, ValueError) as exc:
        print(f"vegn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
