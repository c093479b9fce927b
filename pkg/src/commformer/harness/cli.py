"""Command line entry point: ``commformer {train,eval,gradcheck,plot-data}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 missing checkpoint.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from commformer.errors import CheckpointError, CommFormerError, ConfigError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NO_CHECKPOINT = 0, 1, 2, 3

# flag name -> config key
FLAG_KEYS = {"env": "env", "agents": "agents", "sparsity": "sparsity", "steps": "steps", "seed": "seed",
             "stage": "stage", "out": "out"}


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="commformer", description="Learned communication graphs for MARL.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run stage 1, stage 2 or both")
    train.add_argument("--config", help="key = value config file; flags override it")
    train.add_argument("--env", choices=("pp", "pcp", "diag"))
    train.add_argument("--agents", type=int)
    train.add_argument("--sparsity", type=float)
    train.add_argument("--steps", type=int, help="env-step budget (stage 1, or stage 2 alone)")
    train.add_argument("--seed", type=int)
    train.add_argument("--stage", choices=("1", "2", "both"))
    train.add_argument("--dyn-gate", action="store_true", default=None, help="gate the final evaluation")
    train.add_argument("--out", help="run directory (default $COMMFORMER_OUT/<run name>)")
    train.add_argument("--set", action="append", type=_key_value, default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. train.lr=1e-3")
    train.add_argument("--init-from", help="stage-1 checkpoint to start stage 2 from")
    train.add_argument("--resume", help="checkpoint of this run to continue from")
    train.add_argument("--quiet", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int, default=100)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--dyn-gate", action="store_true")
    ev.add_argument("--greedy", action="store_true", help="take the argmax action instead of sampling")

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)

    pd = sub.add_parser("plot-data", help="metrics.jsonl -> per-metric CSV and heatmap SVG frames")
    pd.add_argument("metrics", help="metrics.jsonl, or a run directory containing it")
    pd.add_argument("--out", help="output directory (default <run dir>/plot-data)")
    return parser


def _train(args) -> int:
    from commformer.harness.checkpoint import load_checkpoint
    from commformer.harness.config import load_config
    from commformer.harness.runner import Run, config_from_checkpoint

    for label, path in (("--init-from", args.init_from), ("--resume", args.resume)):
        if path is not None and not (Path(path) / "manifest.json").exists():
            print(f"error: {label} checkpoint {path} not found", file=sys.stderr)
            return EXIT_NO_CHECKPOINT
    overrides = dict(args.set)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    if args.dyn_gate:
        overrides["dyn_gate"] = "true"
    if args.resume and not args.config:
        # continue with the run's own config unless told otherwise
        ckpt = load_checkpoint(args.resume)
        cfg = config_from_checkpoint(ckpt).with_overrides(overrides)
        if "out" not in overrides:
            cfg = cfg.with_overrides({"out": str(Path(args.resume).resolve().parent.parent)})
    else:
        cfg = load_config(args.config, overrides)
    log = (lambda msg: None) if args.quiet else None
    result = Run(cfg, log=log).execute(resume=args.resume, init_from=args.init_from)
    print(json.dumps({"out": result["out"], "eval": result["eval"]}, sort_keys=True))
    return EXIT_OK


def _eval(args) -> int:
    from commformer.harness.runner import run_eval

    if not (Path(args.checkpoint) / "manifest.json").exists():
        print(f"error: checkpoint {args.checkpoint} not found", file=sys.stderr)
        return EXIT_NO_CHECKPOINT
    result = run_eval(args.checkpoint, args.episodes, seed=args.seed, dyn_gate=args.dyn_gate,
                      greedy=args.greedy)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _gradcheck(args) -> int:
    from commformer.harness.gradsuite import run_suite

    results = run_suite(seed=args.seed, tol=args.tol)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def _plot_data(args) -> int:
    from commformer.harness.plotdata import export

    path = Path(args.metrics)
    if path.is_dir():
        path = path / "metrics.jsonl"
    if not path.exists():
        print(f"error: {path} not found", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out) if args.out else path.parent / "plot-data"
    summary = export(path, out)
    print(json.dumps({"out": str(out), **summary}, sort_keys=True))
    return EXIT_OK


COMMANDS = {"train": _train, "eval": _eval, "gradcheck": _gradcheck, "plot-data": _plot_data}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except CommFormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Exception as exc:  # noqa: BLE001 - any other failure still ends the run with a nonzero code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
