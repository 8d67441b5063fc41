"""Command-line entry point: ``darl run|sweep|ablate|eval|gen-task``.

Every config key is also a flag (``--darl.tau 0.5``, ``--task.k_source 5``)
and overrides the value from ``--config``.  A few short aliases exist:
``--tau``, ``--seeds``, ``--taus``, ``--variants`` and ``--out``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .exceptions import DarlError
from .orchestrator import VARIANTS, evaluate
from .synthdata import dataset_summary, save_task

ALIASES = {
    "tau": "darl.tau",
    "seeds": "experiment.seeds",
    "taus": "sweep.taus",
    "variants": "experiment.variants",
    "out": "experiment.output_dir",
}


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="flat key = value config file")
    group = p.add_argument_group("config keys")
    for key in harness.valid_keys():
        group.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None)
    for alias, key in ALIASES.items():
        group.add_argument(f"--{alias}", dest=f"alias:{alias}", metavar="VALUE", default=None,
                           help=f"same as --{key}")
    p.add_argument("-v", "--verbose", action="store_true")


def _spec_from(args):
    overrides = {}
    for alias, key in ALIASES.items():
        value = getattr(args, f"alias:{alias}")
        if value is not None:
            overrides[key] = value
    for key in harness.valid_keys():
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return harness.parse_config(args.config, overrides)


def build_parser():
    parser = argparse.ArgumentParser(prog="darl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one variant for every configured seed")
    _add_config_flags(p)
    p.add_argument("--variant", choices=VARIANTS, default=None,
                   help="defaults to the first of experiment.variants")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint directory")

    p = sub.add_parser("sweep", help="median target accuracy for each tau in sweep.taus")
    _add_config_flags(p)

    p = sub.add_parser("ablate", help="every variant in experiment.variants on every seed")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="report target accuracy of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen-task", help="write a generated task file")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", "-o", type=Path, required=True)
    return parser


def _cmd_run(args):
    spec = _spec_from(args)
    variant = args.variant or spec.variants[0]
    if args.resume is not None:
        trainer = harness.load_checkpoint(args.resume)
        while not trainer.done:
            trainer.step()
        out = args.resume.parent
        harness.export_metrics(trainer.metrics, out, spec.formats)
        harness.save_checkpoint(trainer, args.resume)
        print(f"resumed {trainer.variant} to iteration {trainer.iteration}: "
              f"target accuracy {trainer.metrics.final_target_accuracy:.4f}")
        return 0
    for seed in spec.seeds:
        out = spec.output_dir / variant / f"seed_{seed}"
        trainer = harness.run_single(spec, seed, variant, out)
        m = trainer.metrics
        print(f"{variant} seed={seed} iterations={len(m)} target_acc={m.final_target_accuracy:.4f} "
              f"precision={m.pooled_precision():.4f} -> {out}")
    return 0


def _cmd_sweep(args):
    spec = _spec_from(args)
    rows = harness.run_threshold_sweep(spec)
    for tau, med, accs in rows:
        print(f"tau={tau:g} median_target_acc={med:.4f} per_seed={np.round(accs, 4).tolist()}")
    print(f"table -> {spec.output_dir / 'sweep.csv'}")
    return 0


def _cmd_ablate(args):
    spec = _spec_from(args)
    results = harness.run_ablation_grid(spec)
    for variant, runs in results.items():
        accs = [m.final_target_accuracy for m in runs]
        print(f"{variant}: median_target_acc={np.median(accs):.4f} per_seed={np.round(accs, 4).tolist()}")
    print(f"table -> {spec.output_dir / 'ablation.csv'}")
    return 0


def _cmd_eval(args):
    trainer = harness.load_checkpoint(args.checkpoint)
    if trainer.task.target_y_hidden is None:
        raise DarlError(f"{args.checkpoint}: task has no target labels to evaluate against")
    ev = evaluate(trainer.nets, trainer.task)
    per_class = " ".join(f"class_{c}={a:.4f}" for c, a in ev.per_class_accuracy.items())
    print(f"{trainer.variant} iteration={trainer.iteration} target_acc={ev.target_accuracy:.4f} {per_class}")
    return 0


def _cmd_gen_task(args):
    spec = _spec_from(args)
    task = spec.make_task(args.seed)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    save_task(task, args.output)
    s = dataset_summary(task)
    print(f"wrote {args.output}: {s['n_source']} source, {s['n_target']} target, "
          f"shared {s['shared_classes']}, outlier {s['outlier_classes']}")
    return 0


COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "eval": _cmd_eval,
    "gen-task": _cmd_gen_task,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DarlError, OSError, ValueError) as exc:
        print(f"darl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
