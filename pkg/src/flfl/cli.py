"""Command line entry point: ``flfl run`` and ``flfl inspect-partition``."""
import argparse
import dataclasses
import json
import logging
import os
import sys

from flfl import data as D
from flfl import orchestrator as O



def _env_int(name):
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise O.ConfigError(f"{name}: expected an integer, got {raw!r}") from None


def resolve_config(args):
    """Config file, then environment, then command-line flags (last wins)."""
    cfg = O.load_config(args.config)
    overrides = {}
    env_seed = _env_int("FLFL_SEED")
    if env_seed is not None:
        overrides["seed"] = env_seed
    if os.environ.get("FLFL_OUT"):
        overrides["out_dir"] = os.environ["FLFL_OUT"]
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "workers", None) is not None:
        overrides["workers"] = args.workers
    cfg = dataclasses.replace(cfg, **overrides)
    if getattr(args, "preset", None):
        cfg = O.apply_preset(cfg, args.preset)
    return cfg


def cmd_run(args):
    cfg = resolve_config(args)
    out = cfg.out_dir or "runs/latest"
    res = O.run_experiment(cfg, out_dir=out, progress=not args.quiet)
    last = res.records[-1]
    print(f"final test accuracy {last.test_accuracy:.4f} after {len(res.records)} rounds; outputs in {out}")
    return 0


def cmd_inspect(args):
    cfg = resolve_config(args)
    assets = O.build_assets(cfg)
    hist = D.class_histograms(assets.partitions, cfg.num_classes)
    print("client,total," + ",".join(f"class_{c}" for c in range(cfg.num_classes)))
    for part, row in zip(assets.partitions, hist):
        print(f"{part.client_id},{int(row.sum())}," + ",".join(str(int(v)) for v in row))
    if args.dump:
        D.dump_partitions(args.dump, assets.partitions)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="flfl", description="Federated semi-supervised learning simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--preset", choices=sorted(O.PRESETS))
    run.add_argument("--out")
    run.add_argument("--workers", type=int)
    run.add_argument("--quiet", action="store_true", help="suppress per-round progress logging")
    run.set_defaults(func=cmd_run)

    ins = sub.add_parser("inspect-partition", help="print per-client class histograms")
    ins.add_argument("--config", required=True)
    ins.add_argument("--seed", type=int)
    ins.add_argument("--dump", help="also write every partition sample to this file")
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (O.ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
