"""Command-line experiment runner.

Subcommands: gen-data, train, reconstruct, evaluate, compare. Output
directories default to ``$FMTRECON_OUT`` (or ``./runs``) when ``--out`` is
not given.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import io
from .config import ExperimentConfig, desk_config, paper_config
from .dataset import Dataset, DatasetError, forward_operator, generate_dataset
from .experiment import (METHODS, case_phantoms, compare, evaluate_files, load_model, mdiff_reconstruct,
                         solver_reconstruct, train, write_reconstruction)
from .geometry import PhantomSpec

log = logging.getLogger("fmtrecon")

PRESETS = {"default": ExperimentConfig, "desk": desk_config, "paper": paper_config}


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("FMTRECON_OUT", "runs")) / default_name


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else PRESETS[args.preset]()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args, "dataset")
    generate_dataset(out, cfg, count=args.count, save_weights=not args.no_weights)
    print(f"wrote {args.count if args.count is not None else cfg.count} records to {out}")
    return 0


def cmd_train(args) -> int:
    dataset = Dataset.open(args.dataset)
    cfg = ExperimentConfig.load(args.config) if args.config else dataset.config
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out_dir(args, "train")
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = out / "model.ckpt"
    result = train(cfg, dataset, checkpoint, steps=args.steps, resume=args.resume,
                   log_path=out / "loss.csv", skip_corrupt=args.skip_corrupt, progress=True)
    print(f"trained to step {result.steps}; checkpoint {checkpoint}")
    return 0


def cmd_reconstruct(args) -> int:
    out = _out_dir(args, f"recon_{args.method}")
    extra = {"method": args.method}
    dataset = Dataset.open(args.dataset) if args.dataset else None
    if dataset is not None and args.record is not None:
        rec = dataset.records[args.record]
        extra.update(phantom=rec["phantom"], phantom_id=f"record{args.record:06d}")
    if args.method == "mdiff":
        if not args.checkpoint:
            raise ValueError("mdiff needs --checkpoint")
        net, schedule, shape, meta = load_model(args.checkpoint)
        if args.condition:
            cond = io.read_stack(args.condition)
        elif dataset is not None and args.record is not None:
            cond = io.read_stack(dataset.root / dataset.records[args.record]["condition"])
        else:
            raise ValueError("mdiff needs --condition or --dataset with --record")
        cfg = ExperimentConfig.from_dict(meta["config"])
        seed = args.seed if args.seed is not None else cfg.seed
        vol = mdiff_reconstruct(net, schedule, cond, cfg.grid_spec(), seed, meta)
    else:
        cfg = load_config(args) if args.config or dataset is None else dataset.config
        if args.weights:
            W = io.read_weight_matrix(args.weights)
        elif dataset is not None:
            W = dataset.weights()
        else:
            W = forward_operator(cfg)
        if args.iters is not None:
            getattr(cfg, args.method).iters = args.iters
        if args.param is not None:
            if args.method == "art":
                cfg.art.relax = args.param
            else:
                cfg.stomp.threshold = args.param
        if args.measurement:
            meas = io.read_measurement(args.measurement)
        elif dataset is not None and args.record is not None:
            meas = io.read_measurement(dataset.root / dataset.records[args.record]["measurement"])
        else:
            raise ValueError(f"{args.method} needs --measurement or --dataset with --record")
        vol = solver_reconstruct(args.method, W, meas.values, cfg)[0]
    path = write_reconstruction(out, vol, args.name or args.method, extra)
    print(f"wrote {path}")
    return 0


def cmd_evaluate(args) -> int:
    phantoms = [PhantomSpec.from_dict(io.load_json(p)) for p in args.phantom] if args.phantom else None
    out = Path(args.out) if args.out else _out_dir(args, "metrics.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    reports = evaluate_files(args.recon, out, phantoms, args.method, args.threshold)
    print(f"wrote {len(reports)} rows to {out}")
    return 0


def cmd_compare(args) -> int:
    dataset = Dataset.open(args.dataset) if args.dataset else None
    if args.config or dataset is None:
        cfg = load_config(args)
    else:
        cfg = dataset.config
        if args.seed is not None:
            cfg.seed = args.seed
    W = dataset.weights() if dataset is not None else None
    if args.count is not None:
        cfg.compare.held_out = args.count
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    phantoms = case_phantoms() if args.cases else None
    out = _out_dir(args, "compare")
    result = compare(cfg, methods, out, args.checkpoint, phantoms, W)
    for method, s in result["summary"].items():
        print(f"{method:6s} n={s['n']:3d}  CNR {s['CNR_mean']:.3f}±{s['CNR_std']:.3f}  "
              f"LE {s['LE_mean']:.3f}±{s['LE_std']:.3f}  Dice {s['Dice_mean']:.3f}±{s['Dice_std']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmtrecon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--preset", choices=sorted(PRESETS), default="default")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("gen-data", help="simulate a phantom dataset")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--no-weights", action="store_true", help="do not store the weight matrix")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the conditional noise model")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--skip-corrupt", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct one volume")
    common(p)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--dataset")
    p.add_argument("--record", type=int)
    p.add_argument("--weights")
    p.add_argument("--measurement")
    p.add_argument("--checkpoint")
    p.add_argument("--condition")
    p.add_argument("--iters", type=int)
    p.add_argument("--param", type=float, help="ART relaxation or StOMP threshold")
    p.add_argument("--name")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="Dice/CNR/LE for stored reconstructions")
    p.add_argument("recon", nargs="*")
    p.add_argument("--phantom", nargs="*", help="phantom spec JSON (one, or one per volume)")
    p.add_argument("--method")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="reconstruct and score held-out phantoms with several methods")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--methods", default="art,stomp,mdiff")
    p.add_argument("--count", type=int, help="number of held-out phantoms")
    p.add_argument("--cases", action="store_true", help="use the fixed two-case EED sweep instead")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, DatasetError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
