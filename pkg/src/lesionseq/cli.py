"""Command-line interface.

Subcommands: gen, train, eval, embed, gradcheck, export-slices. Every flag
maps to a config key; a JSON config file supplies defaults and flags override
it. Exit codes: 0 success, 2 configuration error, 3 verification failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import gradcheck as gc
from . import synthdata, trainer
from .lvol import VolumeFormatError
from .network import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFICATION = 3
EXIT_IO = 4


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionseq",
        description="Longitudinal 3D lesion segmentation: synthetic data, training, "
                    "evaluation, and gradient verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic longitudinal dataset")
    p.add_argument("--spec", help="JSON file with phantom/mix/split settings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, help="number of cases")
    p.add_argument("--seed", type=int, help="dataset seed")

    p = sub.add_parser("train", help="train a model on a generated manifest")
    p.add_argument("--config", help="JSON TrainConfig file")
    p.add_argument("--data", help="manifest path")
    p.add_argument("--out", help="output directory")
    p.add_argument("--variant", choices=("full", "no-tpa", "no-bcr", "single"))
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-dice", type=float, dest="lambda_dice")
    p.add_argument("--lambda-ce", type=float, dest="lambda_ce")
    p.add_argument("--lambda-bcr", type=float, dest="lambda_bcr")
    p.add_argument("--bcr-reduction", choices=("sum", "mean"), dest="bcr_reduction")
    p.add_argument("--val-interval", type=int, dest="val_interval")
    p.add_argument("--fold", help="cross-validation fold 'k/N'")
    p.add_argument("--augment-flips", action="store_true", default=None, dest="augment_flips")

    p = sub.add_parser("eval", help="compute per-case metrics for a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--fold", default="")

    p = sub.add_parser("embed", help="export per-case embedding distances")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="all")
    p.add_argument("--out", required=True, help="embedding CSV path")

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("f64", "f32"), default="f64")

    p = sub.add_parser("export-slices", help="write mid-axial image/GT/prediction PGMs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_gen(args) -> int:
    settings = _load_json(args.spec) if args.spec else {}
    mix = settings.pop("mix", None)
    splits = settings.pop("splits", None)
    n = args.n if args.n is not None else settings.pop("n", 32)
    seed = args.seed if args.seed is not None else settings.pop("seed", 0)
    try:
        spec = synthdata.PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in settings.items()})
    except TypeError as e:
        raise ConfigError(f"bad phantom spec: {e}") from e
    manifest = synthdata.generate_dataset(spec, args.out, n_cases=n, mix=mix,
                                          seed=seed, splits=splits)
    print(f"wrote {n} cases; manifest at {manifest}")
    print(f"manifest digest {synthdata.manifest_digest(manifest)}")
    return EXIT_OK


def _cmd_train(args) -> int:
    base = _load_json(args.config) if args.config else {}
    cfg = trainer.TrainConfig.from_dict(base)
    for key in ("data", "out", "variant", "seed", "epochs", "batch_size", "lr",
                "lambda_dice", "lambda_ce", "lambda_bcr", "bcr_reduction",
                "val_interval", "fold", "augment_flips"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    result = trainer.train(cfg)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"best checkpoint:  {result.best_checkpoint} (val dice {result.best_val_dice:.4f})")
    print(f"loss log:         {result.loss_log}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    records = trainer.evaluate(args.ckpt, args.data, split=args.split,
                               out_csv=args.out, fold=args.fold)
    from .metrics import aggregate
    agg = aggregate(records)
    print(f"evaluated {len(records)} cases; mean dice {agg['mean']['dice']:.4f}; "
          f"metrics at {args.out}")
    return EXIT_OK


def _cmd_embed(args) -> int:
    rows = trainer.embed_analysis(args.ckpt, args.data, split=args.split, out_csv=args.out)
    print(f"wrote {len(rows)} embedding distances to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    reports = gc.run_suite(seed=args.seed, mode=args.mode)
    print(gc.format_report(reports))
    if any(not r.passed for r in reports):
        return EXIT_VERIFICATION
    return EXIT_OK


def _cmd_export_slices(args) -> int:
    paths = trainer.export_slices(args.ckpt, args.data, args.case, args.out)
    for p in paths:
        print(p)
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "embed": _cmd_embed,
    "gradcheck": _cmd_gradcheck,
    "export-slices": _cmd_export_slices,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (gc.VerificationError, trainer.DivergenceError) as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return EXIT_VERIFICATION
    except (VolumeFormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
