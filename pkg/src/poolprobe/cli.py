"""``poolprobe`` command line.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

import argparse
import logging
import sys

from .errors import ConfigError
from .experiment import load_config, run_analyze, run_sweep, run_train

log = logging.getLogger("poolprobe")


def _parser():
    p = argparse.ArgumentParser(prog="poolprobe", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "train one model per seed"),
                        ("analyze", "homogeneity and invariance reports for a checkpoint"),
                        ("sweep", "grid of configs x seeds with gap tables")):
        cmd = sub.add_parser(name, help=help_)
        cmd.add_argument("config_path", nargs="?", help="JSON experiment config")
        cmd.add_argument("--config", dest="config_flag", help="JSON experiment config")
        cmd.add_argument("--out", help="output path (analyze: output directory)")
        if name == "analyze":
            cmd.add_argument("--checkpoint", help="checkpoint file (overrides analysis.checkpoint)")
        else:
            cmd.add_argument("--seed-override", type=int, help="run this single seed")
            cmd.add_argument("--jobs", type=int, default=1, help="parallel seed runs")
    return p


def cmd_train(args):
    cfg = _load(args)
    rows, results = run_train(cfg, jobs=args.jobs)
    for run_id, r in results.items():
        print(f"{run_id}: test {r.metric_name}={r.test_metric:.4f} "
              f"(best epoch {r.best_epoch}, {r.wall_time:.1f}s)")
    print(f"wrote {len(rows)} rows to {cfg.out_path}")
    return 0


def cmd_sweep(args):
    cfg = _load(args)
    out = run_sweep(cfg, jobs=args.jobs)
    print(f"{out['runs']} runs, {len(out['gaps'])} gap cells; rows in {cfg.out_path}")
    return 0


def cmd_analyze(args):
    cfg = _load(args)
    checkpoint = args.checkpoint or cfg.analysis.get("checkpoint")
    if not checkpoint:
        raise ConfigError("analyze needs --checkpoint or analysis.checkpoint", ["checkpoint"])
    files = run_analyze(cfg, checkpoint, args.out)
    for kind, path in files.items():
        print(f"{kind}: {path}")
    return 0


def _load(args):
    path = args.config_flag or args.config_path
    if not path:
        raise ConfigError("no config given", ["config"])
    cfg = load_config(path)
    if getattr(args, "seed_override", None) is not None:
        cfg.seeds = [args.seed_override]
    if args.out and args.command != "analyze":
        cfg.output["path"] = args.out
    return cfg


COMMANDS = {"train": cmd_train, "analyze": cmd_analyze, "sweep": cmd_sweep}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
