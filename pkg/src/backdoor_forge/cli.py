"""``backdoor-forge`` command line.

Exit codes: 0 success, 2 configuration or usage error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import data as D
from . import models as M
from . import noise as N
from . import poison as P
from . import tensor as T
from .config import NO_DEFENSE, ConfigError, load_config
from . import pipeline as PL

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3

# errors raised by the pipeline itself, as opposed to bad configuration
PIPELINE_ERRORS = (M.TrainingAbort, T.NonFiniteError, D.DataFormatError, D.EmptyClassError,
                   P.PoisonError, N.NoiseModalityError, N.SingleClassError, M.CheckpointError,
                   OSError, ValueError)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="backdoor-forge", description="Backdoor attack and defense benchmark runner.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (("generate", "write poisoned dataset stores"),
                            ("attack", "train clean and backdoored models, report CAC/BAC/ASR/RAC"),
                            ("defend", "run the configured defenses against the backdoored models"),
                            ("grid", "run the full attack x defense x noise-variant grid"),
                            ("sweep", "sweep poison_ratio, epochs or noise_level")):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True, help="experiment TOML file")
        s.add_argument("--out", help=f"output root (default: config 'out', ${PL.OUT_ENV}, then ./runs)")
        s.add_argument("--seed", type=int, help="override the global seed")
        s.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        s.add_argument("--resume", action="store_true", help="skip cells that already have a DONE marker")
        if name in ("attack", "defend"):
            s.add_argument("--store", help="poisoned store written by 'generate'")
        if name == "defend":
            s.add_argument("--checkpoint", help="backdoored model checkpoint (needs --store)")
        if name == "sweep":
            s.add_argument("--axis", choices=("poison_ratio", "epochs", "noise_level"))
    return p


def _summarise(summary: PL.RunSummary) -> int:
    ok, skipped, failed = summary.count("ok"), summary.count("skipped"), summary.count("failed")
    print(f"cells: {ok} ok, {skipped} skipped, {failed} failed ({summary.resumed} resumed)")
    for c in summary.cells:
        if c.status == "failed":
            print(f"  failed {c.cell_id}: {c.note}")
    print(f"report: {summary.exp_dir / 'report.json'}")
    return EXIT_OK if ok + skipped else EXIT_PIPELINE


def _tasks_with_store(cfg, defenses):
    attack, variant, store = PL.load_store_for(cfg)
    cfg = cfg.replace(attacks=[attack], variants=(variant,))
    return cfg, PL.grid_tasks(cfg, defenses), store


def run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed", "must be non-negative")
        cfg = cfg.replace(seed=args.seed)
    if args.workers < 1:
        raise ConfigError("workers", "must be >= 1")
    for key in ("store", "checkpoint"):
        if getattr(args, key, None):
            cfg = cfg.replace(**{key: getattr(args, key)})
    root = PL.output_root(cfg, args.out)

    if args.command == "generate":
        for name, k, n, path in PL.generate(cfg, root):
            print(f"{name}: poisoned {k} of {n} -> {path}")
        return EXIT_OK
    if args.command == "sweep":
        path = PL.sweep(cfg, root, args.axis, args.workers)
        print(f"sweep table: {path}")
        return EXIT_OK

    store = None
    if args.command == "attack":
        defenses = [NO_DEFENSE]
    elif args.command == "defend":
        defenses = [d for d in cfg.defenses if d != NO_DEFENSE] or [NO_DEFENSE]
        if cfg.checkpoint and not cfg.store:
            raise ConfigError("store", "--checkpoint needs the poisoned --store it was trained on")
    else:
        defenses = list(cfg.defenses)
    if cfg.store and args.command in ("attack", "defend"):
        cfg, tasks, store = _tasks_with_store(cfg, defenses)
    else:
        tasks = PL.grid_tasks(cfg, defenses)
    summary = PL.run_cells(cfg, tasks, root, args.workers, args.resume, store)
    return _summarise(summary)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PIPELINE_ERRORS as e:
        print(f"pipeline error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
