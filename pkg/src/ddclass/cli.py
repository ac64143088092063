"""Command-line entry point: ``ddclass {train,eval,report,gen-data,inspect}``.

Exit codes: 0 on success, 2 on usage or config errors, 1 on runtime errors
(the message carries the failing phase in brackets).  Logging verbosity is
read from ``DDCLASS_LOG`` (quiet, info or debug; default info).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import parse_config, serialize_config
from .data import (
    gen_synthetic,
    load_dataset,
    load_params,
    read_header,
    save_dataset,
    split_train_val,
)
from .decomposition import parse_grid
from .errors import ConfigError, DDClassError, PhaseError
from .pipelines import build_predictor, evaluate, load_data, run_pipeline, save_run
from .report import load_reports, write_report

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def _setup_logging():
    name = os.environ.get("DDCLASS_LOG", "info").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"DDCLASS_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logger = logging.getLogger("ddclass")
    logger.setLevel(LOG_LEVELS[name])
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        logger.addHandler(handler)


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        out["workers"] = args.workers
    return out


def cmd_train(args) -> int:
    cfg = parse_config(Path(args.config), _overrides(args))
    result = run_pipeline(cfg)
    out = save_run(result, args.out, serialize_config(cfg))
    final = result.report.final
    print(f"{cfg.pipeline}: val {final['val_accuracy']:.4f} (train {final['train_accuracy']:.4f})")
    print(f"wrote {out / 'report.jsonl'} and {out / 'model.dprm'}")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg_path = Path(args.config) if args.config else run / "run.cfg"
    cfg = parse_config(cfg_path, _overrides(args))
    params = load_params(run / "model.dprm" if run.is_dir() else run)
    if args.data:
        sets = [("data", load_dataset(args.data))]
    else:
        train, val = load_data(cfg)
        sets = [("train", train), ("val", val)]
    predictor = build_predictor(cfg, params, sets[0][1].sample_shape, sets[0][1].num_classes)
    for name, ds in sets:
        acc, loss = evaluate(predictor, ds.images, ds.labels)
        print(f"{name}: accuracy {acc:.4f} loss {loss:.4f} ({len(ds)} samples)")
    return 0


def cmd_report(args) -> int:
    comp = write_report(load_reports(args.runs), args.out)
    print(comp.text(), end="")
    return 0


def _param(text: str):
    if "=" not in text:
        raise UsageError(f"--param expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    for conv in (int, float):
        try:
            return key, conv(value)
        except ValueError:
            pass
    return key, None if value == "none" else value


def cmd_gen_data(args) -> int:
    params = dict(_param(p) for p in args.param)
    ds = gen_synthetic(args.kind, args.count, parse_grid(args.shape) if "x" in args.shape
                       else (int(args.shape),), args.classes, seed=args.seed or 0,
                       channels=args.channels, **params)
    if args.split is None:
        save_dataset(args.out, ds)
        print(f"wrote {args.out} ({len(ds)} samples)")
    else:
        train, val = split_train_val(ds, args.split, args.seed or 0)
        save_dataset(f"{args.out}.train", train)
        save_dataset(f"{args.out}.val", val)
        print(f"wrote {args.out}.train ({len(train)}) and {args.out}.val ({len(val)})")
    return 0


def cmd_inspect(args) -> int:
    for path in args.paths:
        p = Path(path)
        if p.read_bytes()[:4] == b"DPRM":
            params = load_params(p)
            print(f"{p}: DPRM, {len(params)} tensors, "
                  f"{sum(v.size for v in params.values())} values")
            for name, v in params.items():
                print(f"  {name}: {v.dtype} {list(v.shape)}")
        else:
            h = read_header(p)
            print(f"{p}: {h['magic']} v{h['version']} dtype={h['dtype']} rank={h['rank']} "
                  f"extents={h['extents']} payload={h['payload_bytes']} bytes")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddclass", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one pipeline and write report + checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("run", help="run directory (or checkpoint file with --config)")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset prefix to evaluate instead of the run's own data")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge run reports into a comparison table")
    p.add_argument("runs", nargs="+", help="run directories, report.jsonl or comparison CSV files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--kind", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--shape", default="32x32")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--split", type=float, help="also split into <out>.train/<out>.val")
    p.add_argument("--param", action="append", default=[], help="generator option key=value")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inspect", help="print container headers")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ddclass {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except PhaseError as exc:
        print(f"ddclass {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DDClassError, OSError, ValueError) as exc:
        print(f"ddclass {args.command}: error: [{args.command}] {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
