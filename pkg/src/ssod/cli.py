"""Command-line entry point.

    ssod generate-data --out data/ [--seed 0]
    ssod train --config run.cfg [--seed 1] [--out runs/x] [--resume ckpt] [--set key=value ...]
    ssod evaluate CHECKPOINT --data data/ [--split test]
    ssod analyze CHECKPOINT --data data/ [--tau1 t --tau2 t] [--out dir]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, load_config, parse_config_text
from .errors import ConfigError, DataError, NumericError, StructureError
from .synthdata import DatasetSpec, generate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _cmd_generate(args) -> None:
    try:
        spec = DatasetSpec(num_images=args.num_images, labeled_fraction=args.labeled_fraction,
                           num_test=args.num_test, seed=args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    root = generate(spec, args.out)
    print(f"wrote {spec.num_images} train and {spec.num_test} test images to {root}")


def _train_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.set:
        cfg = parse_config_text("\n".join(args.set), cfg)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out_dir"] = args.out
    if args.data is not None:
        over["data_dir"] = args.data
    return cfg.with_overrides(**over) if over else cfg


def _cmd_train(args) -> None:
    from .harness import train

    cfg = _train_config(args)
    if not Path(cfg.data_dir).is_dir():
        raise DataError(f"dataset directory not found: {cfg.data_dir}")
    history = train(cfg, resume=args.resume, log=print)
    evals = [h for h in history if "ap50" in h]
    if evals:
        print(f"final AP50 {evals[-1]['ap50']:.4f}  AP50:95 {evals[-1]['ap50_95']:.4f}")


def _cmd_evaluate(args) -> None:
    from .harness import evaluate

    rep = evaluate(args.checkpoint, args.data, args.split)
    text = json.dumps(rep.to_dict(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def _cmd_analyze(args) -> None:
    from .harness import analysis_csv, analyze

    if (args.tau1 is None) != (args.tau2 is None):
        raise ConfigError("give both --tau1 and --tau2 or neither")
    rep = analyze(args.checkpoint, args.data, args.tau1, args.tau2)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "analysis.json").write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
    (out / "analysis.csv").write_text(analysis_csv(rep))
    for tag, s in rep["stats"].items():
        f = s["fractions"]
        print(f"{tag:10s} n={s['count']:6d}  tp={f['tp']:.3f}  loc_fp={f['loc_fp']:.3f}  cls_fp={f['cls_fp']:.3f}")
    print(f"wrote {out / 'analysis.json'} and {out / 'analysis.csv'}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssod", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render the synthetic shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-images", type=int, default=500)
    g.add_argument("--labeled-fraction", type=float, default=0.1)
    g.add_argument("--num-test", type=int, default=200)
    g.set_defaults(fn=_cmd_generate)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--data", help="dataset directory (overrides data_dir)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("evaluate", help="AP50 and AP50:95 of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("test", "labeled", "unlabeled_gt"))
    e.add_argument("--out", help="also write the report to this JSON file")
    e.set_defaults(fn=_cmd_evaluate)

    a = sub.add_parser("analyze", help="pseudo-label quality against held-back ground truth")
    a.add_argument("checkpoint")
    a.add_argument("--data", required=True)
    a.add_argument("--tau1", type=float)
    a.add_argument("--tau2", type=float)
    a.add_argument("--out", help="report directory (default: the run directory)")
    a.set_defaults(fn=_cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ConfigError, StructureError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
