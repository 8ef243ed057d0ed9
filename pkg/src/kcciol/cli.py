"""Command-line front end.

Subcommands:

- ``train``     run the three-phase schedule, write phase checkpoints + loss logs
- ``eval``      run the online evaluation protocol against a checkpoint
- ``baseline``  same protocol with scratch / pretrained / consolidated parameters
- ``sweep``     masking-level ablation over a list of importance fractions
- ``gradcheck`` finite-difference validation suite, prints max relative errors
- ``inspect``   weight-magnitude histogram data from a checkpoint

Exit codes: 0 success, 1 runtime failure (one-line category message on
stderr), 2 usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import evaluation, gradcheck
from .config import parse_config
from .errors import KcciolError
from .metalearner import train_full
from .models import load_checkpoint


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kcciol", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="experiment configuration file")
        p.add_argument("--seed", type=int, default=None, help="master seed override (u64)")
        p.add_argument("--out", default=None, help="output directory override")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, help="checkpoint path")

    p_train = sub.add_parser("train", help="run the three-phase training schedule")
    common(p_train)
    p_train.add_argument("--first-order", action="store_true", help="first-order constraint approximation")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint under the online protocol")
    common(p_eval, checkpoint=True)
    p_eval.add_argument("--trajectories", type=int, default=None, help="evaluation trajectory count override")

    p_base = sub.add_parser("baseline", help="evaluate a baseline parameter source")
    common(p_base, checkpoint=True)
    p_base.add_argument("--kind", required=True, choices=evaluation.BASELINE_KINDS)
    p_base.add_argument("--trajectories", type=int, default=None)

    p_sweep = sub.add_parser("sweep", help="masking-level ablation sweep")
    common(p_sweep)
    p_sweep.add_argument("--delta-list", required=True, help="comma-separated importance fractions, e.g. 0.5,1.0")
    p_sweep.add_argument("--trajectories", type=int, default=10, help="number of paired seeds")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p_grad.add_argument("--seed", type=int, default=0)

    p_inspect = sub.add_parser("inspect", help="weight-magnitude histogram from a checkpoint")
    p_inspect.add_argument("--checkpoint", required=True)
    p_inspect.add_argument("--bins", type=int, default=50)

    return parser


def _load_config(args):
    config = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "out", None) is not None:
        config = dataclasses.replace(config, out_dir=args.out)
    return config


def _cmd_train(args) -> int:
    config = _load_config(args)
    out_dir = config.out_dir
    result = train_full(config, out_dir=out_dir, first_order=args.first_order)
    for phase, records in result.records.items():
        last = records[-1] if records else None
        tail = f"final l_meta {last[1]:.6g}" if last else "no steps"
        print(f"phase {phase}: {len(records)} steps, {tail} -> {os.path.join(out_dir, f'phase{phase}.kcml')}")
    if result.mask is not None:
        print(f"mask: {result.mask.population}/{len(result.mask)} parameters important (delta={result.mask.delta:g})")
    return 0


def _eval_store(args, config):
    if args.checkpoint is None:
        raise KcciolError("--checkpoint is required")
    spec, store, _mask = load_checkpoint(args.checkpoint)
    if spec != config.model_spec:
        raise KcciolError("checkpoint model spec does not match the configuration")
    return store


def _write_report(report, config, name) -> None:
    os.makedirs(config.out_dir, exist_ok=True)
    csv_path = os.path.join(config.out_dir, f"{name}.csv")
    summary_path = os.path.join(config.out_dir, f"{name}_summary.json")
    report.write_csv(csv_path)
    report.write_summary(summary_path)
    for count, (mean, std) in report.summary.items():
        print(f"count {count:>3}: {mean:.4f} +- {std:.4f}")
    print(f"report: {csv_path}")


def _cmd_eval(args) -> int:
    config = _load_config(args)
    if args.trajectories is not None:
        config = dataclasses.replace(config, eval_runs=args.trajectories)
    store = _eval_store(args, config)
    report = evaluation.evaluate_with_config(config, store, source="checkpoint")
    _write_report(report, config, "eval")
    return 0


def _cmd_baseline(args) -> int:
    config = _load_config(args)
    if args.trajectories is not None:
        config = dataclasses.replace(config, eval_runs=args.trajectories)
    store = None
    if args.kind != "scratch":
        store = _eval_store(args, config)
    report = evaluation.run_baseline(args.kind, config, store)
    _write_report(report, config, f"baseline_{args.kind}")
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    try:
        deltas = [float(part) for part in args.delta_list.split(",") if part]
    except ValueError:
        raise KcciolError(f"bad --delta-list {args.delta_list!r}") from None
    seed_list = [config.seed + i for i in range(args.trajectories)]
    result = evaluation.mask_sweep(config, deltas, seed_list, cache_dir=os.path.join(config.out_dir, "sweep_cache"))
    os.makedirs(config.out_dir, exist_ok=True)
    out_path = os.path.join(config.out_dir, "sweep.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config.config_hash}\n")
        fh.write(f"# metric={result['metric']} seeds={result['seeds']}\n")
        fh.write("delta,mean,std\n")
        for delta, mean, std in result["rows"]:
            fh.write(f"{delta:g},{mean!r},{std!r}\n")
            print(f"delta {delta:g}: {result['metric']} {mean:.4f} +- {std:.4f}")
    print(f"sweep report: {out_path}")
    return 0


def _cmd_gradcheck(args) -> int:
    cases = gradcheck.run_gradcheck(seed=args.seed)
    print(gradcheck.format_report(cases))
    return 0 if all(c.passed for c in cases) else 1


def _cmd_inspect(args) -> int:
    spec, store, mask_bits = load_checkpoint(args.checkpoint)
    magnitudes = np.abs(store.values)
    counts, edges = np.histogram(magnitudes, bins=args.bins, range=(0.0, float(magnitudes.max()) or 1.0))
    print(f"# layers={','.join(str(s) for s in spec.layer_sizes)} split={spec.split_index}")
    print(f"# n_params={store.n_params} near_zero_fraction={float(np.mean(magnitudes < 1e-3))!r}")
    if mask_bits is not None:
        print(f"# mask_population={int(mask_bits.sum())}")
    print("bin_edge,count")
    for edge, count in zip(edges[:-1], counts):
        print(f"{edge!r},{count}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "baseline": _cmd_baseline,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except KcciolError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
