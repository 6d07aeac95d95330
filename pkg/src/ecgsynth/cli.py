"""Command-line entry point.

Every command accepts ``--seed``, ``--config`` (a JSON document whose keys
are option names), ``--out`` and ``--force``. Flags override config values.
The fully resolved options are written to ``<out>/config.json``; passing
that file back through ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("ecgsynth")

NOT_SERIALIZED = {"func", "config", "force", "verbose"}


class CommandError(RuntimeError):
    """Failure reported to the user without a traceback."""


# --------------------------------------------------------------------------
# helpers


def prepare_out(args, allow_existing: bool = False) -> Path:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not (args.force or allow_existing):
        raise CommandError(f"{out} exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_config(args, out: Path) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in NOT_SERIALIZED}
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def condition_arg(text: str):
    if str(text).lower() == "none":
        return "none"
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("condition index must be >= 0 or 'none'")
    return v


def _load_extractor(path):
    from .metrics.inception import MissingExtractorError, load_extractor
    try:
        return load_extractor(path)[0]
    except MissingExtractorError as exc:
        raise CommandError(str(exc)) from exc


# --------------------------------------------------------------------------
# commands


def cmd_toy_data(args) -> int:
    from .dataset import save_dataset, split_dataset
    from .toy import synth_toy_dataset

    out = prepare_out(args)
    ds = synth_toy_dataset(args.count, args.seed, disease_mix=tuple(args.disease_mix))
    if args.split is not None:
        train, test = split_dataset(ds, args.split, args.seed)
        save_dataset(train, out / "train")
        save_dataset(test, out / "test")
        log.info("wrote %d train and %d test records to %s", len(train), len(test), out)
    else:
        save_dataset(ds, out)
        log.info("wrote %d records to %s", len(ds), out)
    write_config(args, out)
    return 0


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .generator import GeneratorConfig
    from .plotting import loss_svg, write_svg
    from .training import LOSS_FIELDS, Trainer, TrainConfig, read_loss_log, train

    ds = load_dataset(args.data)
    if args.k is not None and args.k != ds.k:
        raise CommandError(f"config asks for k={args.k} conditions but {args.data} has k={ds.k}")
    cfg = TrainConfig(batch=args.batch, lr=args.lr, iterations=args.iterations, seed=args.seed,
                      conditional=not args.no_disease,
                      grad_clip=None if args.no_clip else args.grad_clip,
                      checkpoint_every=args.checkpoint_every, log_every=args.log_every)
    trainer = None
    if args.resume:
        out = prepare_out(args, allow_existing=True)
        ckpt = out / "ckpt_last.bin"
        if not ckpt.exists():
            raise CommandError(f"--resume given but {ckpt} does not exist")
        trainer = Trainer.load(ckpt)
        trainer.cfg.iterations = args.iterations
        trainer.cfg.checkpoint_every = args.checkpoint_every
        trainer.cfg.log_every = args.log_every
        if trainer.gen_cfg.k != ds.k:
            raise CommandError(f"checkpoint expects k={trainer.gen_cfg.k}, data has k={ds.k}")
    else:
        out = prepare_out(args)
    try:
        trainer = train(ds, cfg if trainer is None else trainer.cfg, out, trainer=trainer,
                        gen_cfg=GeneratorConfig(k=ds.k), progress=args.verbose)
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    curve = read_loss_log(out / "losses.csv")
    if curve.size:
        write_svg(loss_svg(np.atleast_2d(curve), LOSS_FIELDS), out / "losses.svg")
    write_config(args, out)
    return 0


def cmd_generate(args) -> int:
    from .dataset import VIEW_NAMES, DEFAULT_LABEL_NAMES, SignalDataset, save_dataset
    from .generator import generate
    from .plotting import record_svg, write_svg
    from .training import load_generator

    G, theta, conditional = load_generator(args.ckpt)
    k = G.cfg.k
    if args.condition != "none" and args.condition >= k:
        raise CommandError(f"condition index {args.condition} out of range for k={k}")
    labels = np.zeros((args.count, k), dtype=np.uint8)
    if args.condition != "none":
        labels[:, args.condition] = 1
    out = prepare_out(args)
    gen = torch.Generator().manual_seed(args.seed)
    z = torch.randn(args.count, G.cfg.z_dim, generator=gen)
    c = torch.from_numpy(labels.astype(np.float32))
    if not conditional:
        c = torch.zeros_like(c)
    x = generate(G, z, c, theta, args.batch_size).numpy()
    names = DEFAULT_LABEL_NAMES if k == len(DEFAULT_LABEL_NAMES) else tuple(f"c{i}" for i in range(k))
    ids = [f"gen-{args.seed}-{i:06d}" for i in range(args.count)]
    save_dataset(SignalDataset(x, labels, ids, names, ["generated"] * args.count), out)
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    for i in range(min(args.plots, args.count)):
        title = f"{ids[i]} condition={args.condition}"
        write_svg(record_svg(x[i], VIEW_NAMES[:x.shape[1]], title), plots / f"{ids[i]}.svg")
    write_config(args, out)
    return 0


def cmd_eval(args) -> int:
    from .dataset import load_dataset
    from .metrics.evaluation import augmentation_eval, evaluate, synthesize_augmentation
    from .training import load_generator

    extractor = _load_extractor(args.extractor)
    G, theta, conditional = load_generator(args.ckpt)
    test = load_dataset(args.data)
    if test.k != G.cfg.k:
        raise CommandError(f"checkpoint expects k={G.cfg.k}, data has k={test.k}")
    out = prepare_out(args)
    report = evaluate(G, theta, test, extractor, seed=args.seed, conditional=conditional,
                      embedder_steps=args.embedder_steps)
    if args.train_data:
        train = load_dataset(args.train_data)
        extra = synthesize_augmentation(train, G, theta, seed=args.seed, conditional=conditional)
        report.pr_auc = augmentation_eval(train, test, extra, steps=args.aug_steps, seed=args.seed)
    if not report.finite():
        raise CommandError("metric report contains non-finite values")
    report.save(out / "report.json")
    (out / "report.txt").write_text(report.table() + "\n", encoding="utf-8")
    print(report.table())
    write_config(args, out)
    return 0


def cmd_perturb(args) -> int:
    from .dataset import halve_dataset, load_dataset
    from .metrics.evaluation import perturbation_suite
    from .plotting import curves_svg, write_svg

    extractor = _load_extractor(args.extractor)
    ds = load_dataset(args.data)
    if args.records is not None and args.records < len(ds):
        ds = ds.subset(np.arange(args.records))
    out = prepare_out(args)
    x1, x2 = halve_dataset(ds, args.seed)
    curves = perturbation_suite(x1.signals, x2.signals, extractor, steps=args.steps,
                                seed=args.seed, progress=args.verbose)
    for name, values in curves.items():
        write_csv(out / f"{name}.csv", ["step", "rfid"],
                  [[i, repr(float(v))] for i, v in enumerate(values)])
    write_svg(curves_svg(curves, "rFID under cumulative perturbation"), out / "perturbation.svg")
    write_config(args, out)
    return 0


def cmd_pretrain_extractor(args) -> int:
    from .metrics.inception import MissingCorpusError, pretrain_extractor, save_extractor

    out = prepare_out(args)
    try:
        model, meta = pretrain_extractor(epochs=args.epochs, batch_size=args.batch_size,
                                         lr=args.lr, seed=args.seed, limit=args.limit,
                                         progress=args.verbose)
    except MissingCorpusError as exc:
        raise CommandError(str(exc)) from exc
    save_extractor(model, out / "extractor.bin", meta)
    with open(out / "extractor.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    log.info("extractor train accuracy %.3f", meta["train_accuracy"])
    write_config(args, out)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file of option values; flags take precedence")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="write into a non-empty --out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ecgsynth", description="Multi-view ECG synthesis toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy-data", parents=[common], help="synthesize a toy multi-view dataset")
    p.add_argument("--count", type=positive_int, required=True)
    p.add_argument("--disease-mix", type=float, nargs="+", default=[0.2, 0.2, 0.2])
    p.add_argument("--split", type=float, default=None,
                   help="write train/ and test/ with this train fraction")
    p.set_defaults(func=cmd_toy_data)

    p = sub.add_parser("train", parents=[common], help="train the GAN")
    p.add_argument("--data", required=True)
    p.add_argument("--iterations", type=positive_int, default=5000)
    p.add_argument("--batch", type=positive_int, default=16)
    p.add_argument("--lr", type=positive_float, default=1e-4)
    p.add_argument("--k", type=int, default=None, help="expected number of conditions")
    p.add_argument("--checkpoint-every", type=positive_int, default=1000)
    p.add_argument("--log-every", type=positive_int, default=100)
    p.add_argument("--grad-clip", type=positive_float, default=10.0)
    p.add_argument("--no-clip", action="store_true", help="disable gradient clipping")
    p.add_argument("--no-disease", action="store_true",
                   help="constant condition and no auxiliary classifier")
    p.add_argument("--resume", action="store_true", help="continue from <out>/ckpt_last.bin")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="sample records from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=positive_int, required=True)
    p.add_argument("--condition", type=condition_arg, default="none",
                   help="disease index for every sample, or 'none' for the zero vector")
    p.add_argument("--plots", type=int, default=4, help="number of records to plot")
    p.add_argument("--batch-size", type=positive_int, default=64)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", parents=[common], help="rFID, 1NNC and view consistency")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="real test set")
    p.add_argument("--extractor", required=True)
    p.add_argument("--embedder-steps", type=positive_int, default=2000)
    p.add_argument("--train-data", default=None, help="also run the augmentation study")
    p.add_argument("--aug-steps", type=positive_int, default=600)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", parents=[common], help="rFID under cumulative perturbations")
    p.add_argument("--data", required=True)
    p.add_argument("--extractor", required=True)
    p.add_argument("--steps", type=positive_int, default=20)
    p.add_argument("--records", type=positive_int, default=None,
                   help="use only the first N records")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("pretrain-extractor", parents=[common],
                       help="train the 1D Inception feature extractor on digits")
    p.add_argument("--epochs", type=positive_int, default=3)
    p.add_argument("--limit", type=positive_int, default=None,
                   help="use only the first N images (default: all 1797)")
    p.add_argument("--batch-size", type=positive_int, default=16)
    p.add_argument("--lr", type=positive_float, default=3e-4)
    p.set_defaults(func=cmd_pretrain_extractor)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if known.config and command is not None:
        try:
            with open(known.config, encoding="utf-8") as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {known.config}: {exc}")
        values.pop("command", None)
        # file values become defaults, so explicit flags still win
        sub = choices[command]
        unknown = set(values) - {a.dest for a in sub._actions}
        if unknown:
            sub.error(f"unknown keys in {known.config}: {sorted(unknown)}")
        for action in sub._actions:
            if action.dest not in values:
                continue
            action.required = False
            v = values[action.dest]
            if action.type is not None and v is not None:
                # file values skip argparse's type checks, so apply them here
                try:
                    v = [action.type(str(x)) for x in v] if isinstance(v, list) else action.type(str(v))
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    sub.error(f"bad value for {action.dest} in {known.config}: {exc}")
                values[action.dest] = v
        sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
