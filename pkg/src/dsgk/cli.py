"""Command line entry point: ``dsgk <verb> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

from . import harness
from . import network as nn
from .data import SyntheticTaskSpec, generate_task, load_features, save_features
from .harness import RunConfig


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _floats(s: str):
    return tuple(float(x) for x in s.split(",") if x)


def _ints(s: str):
    return tuple(int(x) for x in s.split(",") if x)


def add_run_config_args(p: argparse.ArgumentParser) -> None:
    d = RunConfig()
    g = p.add_argument_group("run configuration")
    g.add_argument("--alpha", type=float, default=d.alpha)
    g.add_argument("--beta", type=float, default=d.beta)
    g.add_argument("--kappa", type=float, default=d.kappa)
    g.add_argument("--T", type=int, default=d.T, help="number of refinement rounds")
    g.add_argument("--schedule", type=_floats, default=None,
                   help="comma-separated thresholds, strictly decreasing, length T")
    g.add_argument("--iterations-per-round", type=int, default=None,
                   help="default: one pass over the paired batches")
    g.add_argument("--warmup-epochs", type=int, default=d.warmup_epochs)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float, default=d.learning_rate)
    g.add_argument("--optimizer", choices=("sgd_momentum", "adam"), default=d.optimizer)
    g.add_argument("--mode", choices=("feature", "moment"), default=d.mode)
    g.add_argument("--features-for-loss", choices=("softmax", "logits"), default=d.features_for_loss)
    g.add_argument("--discrepancy", choices=("sphere", "coral", "mmd"), default=d.discrepancy)
    g.add_argument("--hidden", type=_ints, default=d.hidden, help="hidden layer sizes, e.g. 512,256")
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--use-K", type=_bool, default=d.use_K)
    g.add_argument("--use-T", type=_bool, default=d.use_T)
    g.add_argument("--use-C", type=_bool, default=d.use_C)
    g.add_argument("--no-eval", dest="evaluate", action="store_false")
    g.add_argument("--timing", dest="record_timing", action="store_true",
                   help="record wall-clock time per step (breaks byte-identical streams)")


def config_from_args(args) -> RunConfig:
    names = {f.name for f in fields(RunConfig)}
    return RunConfig(**{k: v for k, v in vars(args).items() if k in names})


def add_task_args(p: argparse.ArgumentParser) -> None:
    d = SyntheticTaskSpec()
    g = p.add_argument_group("synthetic task")
    g.add_argument("--num-classes", type=int, default=d.num_classes)
    g.add_argument("--dim", type=int, default=d.dim)
    g.add_argument("--samples-per-class", type=int, default=d.samples_per_class)
    g.add_argument("--rotation-degrees", type=float, default=d.rotation_degrees)
    g.add_argument("--translation-scale", type=float, default=d.translation_scale)
    g.add_argument("--class-separation", type=float, default=d.class_separation)
    g.add_argument("--noise-scale", type=float, default=d.noise_scale)


def task_from_args(args, seed: int = 0) -> SyntheticTaskSpec:
    return SyntheticTaskSpec(
        num_classes=args.num_classes, dim=args.dim, samples_per_class=args.samples_per_class,
        rotation_degrees=args.rotation_degrees, translation_scale=args.translation_scale,
        class_separation=args.class_separation, noise_scale=args.noise_scale, seed=seed,
    )


@contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(args) -> int:
    source, target = generate_task(task_from_args(args, args.seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_features(source, out / "source.csv")
    save_features(target, out / "target.csv")
    print(f"wrote {len(source)} source and {len(target)} target rows to {out}")
    return 0


def _load_domains(args):
    if args.source and args.target:
        return load_features(args.source, "source"), load_features(args.target, "target")
    return generate_task(task_from_args(args, args.task_seed if args.task_seed is not None else args.seed))


def cmd_train(args) -> int:
    config = config_from_args(args)
    source, target = _load_domains(args)
    with _output(args.out) as sink:
        res = harness.train(config, source, target, sink=sink)
    if args.checkpoint:
        nn.save_checkpoint(res.net, args.checkpoint)
    final = res.final
    print(
        f"final: target_accuracy={final['target_accuracy']:.4f} "
        f"divergence_proxy={final['divergence_proxy']:.4f} "
        f"checkpoint_sha256={nn.checkpoint_hash(res.net)}",
        file=sys.stderr,
    )
    return 0


def cmd_evaluate(args) -> int:
    net = nn.load_checkpoint(args.checkpoint)
    ds = load_features(args.data)
    print(f"accuracy {harness.evaluate(net, ds):.4f}")
    return 0


def _seed_list(args):
    return args.seeds or harness.DEFAULT_SEEDS


def cmd_ablate(args) -> int:
    rows = harness.ablate(config_from_args(args), task_from_args(args), _seed_list(args), jobs=args.jobs)
    _report(rows, "target accuracy by ablation variant (mean +- std over seeds)", args)
    return 0


def cmd_sweep(args) -> int:
    grid = None
    if args.values:
        grid = _floats(args.values) if args.param != "T" else _ints(args.values)
    rows = harness.sweep(args.param, grid, config_from_args(args), task_from_args(args),
                         _seed_list(args), jobs=args.jobs)
    _report(rows, f"final divergence proxy by {args.param} (mean +- std over seeds)", args, scale=1.0)
    return 0


def cmd_compare_losses(args) -> int:
    rows = harness.compare_losses(config_from_args(args), task_from_args(args), _seed_list(args), jobs=args.jobs)
    _report(rows, "target accuracy by discrepancy loss (mean +- std over seeds)", args)
    return 0


def _report(rows, title, args, scale=100.0) -> None:
    print(harness.format_table(rows, title, scale))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            for r in rows:
                for run in r.runs:
                    fh.write(harness.format_record({"record": "run", "name": r.name, **run}) + "\n")


def cmd_gradcheck(args) -> int:
    from . import verify

    ok = True
    for line, passed in verify.gradcheck_suite(points=args.points, eps=args.eps, tolerance=args.tolerance):
        print(line)
        ok &= passed
    return 0 if ok else 1


def cmd_geomtest(args) -> int:
    from . import verify

    t0 = time.perf_counter()
    res = verify.geometry_suite(args.pairs, seed=args.seed)
    for k, v in res.items():
        print(f"{k:<22} {v:.3e}")
    print(f"elapsed_s              {time.perf_counter() - t0:.2f}")
    return 0 if verify.geometry_passes(res) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsgk", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic source/target pair as feature CSVs")
    add_task_args(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", default="data")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train one model and stream metrics records")
    add_run_config_args(s)
    add_task_args(s)
    s.add_argument("--source", help="source feature CSV (default: synthetic task)")
    s.add_argument("--target", help="target feature CSV")
    s.add_argument("--task-seed", type=int, default=None, help="synthetic task seed (default: --seed)")
    s.add_argument("--out", help="metrics stream file (default stdout)")
    s.add_argument("--checkpoint", help="write the trained network here")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="accuracy of a checkpoint on a labeled feature CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_evaluate)

    for verb, fn, helptext in (
        ("ablate", cmd_ablate, "run every ablation variant over paired seeds"),
        ("compare-losses", cmd_compare_losses, "swap the geodesic losses for CORAL / MMD"),
        ("sweep", cmd_sweep, "pick a hyperparameter by the final divergence proxy"),
    ):
        s = sub.add_parser(verb, help=helptext)
        add_run_config_args(s)
        add_task_args(s)
        s.add_argument("--seeds", type=_ints, default=None, help="comma-separated, default 1,2,3,4,5")
        s.add_argument("--jobs", type=int, default=1)
        s.add_argument("--out", help="machine-readable run records")
        if verb == "sweep":
            s.add_argument("--param", choices=tuple(harness.SWEEP_GRIDS), required=True)
            s.add_argument("--values", help="comma-separated grid (default: the standard grid)")
        s.set_defaults(func=fn)

    s = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    s.add_argument("--points", type=int, default=20)
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("geomtest", help="randomised Log/Exp identities on the sphere")
    s.add_argument("--pairs", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_geomtest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
