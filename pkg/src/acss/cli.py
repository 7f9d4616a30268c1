"""Command line entry point: ``acss run|histogram|validate``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .errors import AcssError, InvalidArgument, ParseError
from .experiments import emit_histogram_data, load_config, paper_scale, run_experiment


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acss", description="aCSS goodness-of-fit experiments")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment grid")
    run.add_argument("--config", required=True)
    run.add_argument("--paper-scale", action="store_true", help="full trial counts and copies")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (overrides output_path)")
    run.add_argument("--jobs", type=int, help="worker processes")
    run.add_argument("--quiet", action="store_true")

    hist = sub.add_parser("histogram", help="bin per-trial p-values")
    hist.add_argument("--in", dest="infile", required=True)
    hist.add_argument("--bins", type=int, required=True)
    hist.add_argument("--out")

    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("--config", required=True)
    return p


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.paper_scale:
        config = paper_scale(config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.jobs is not None:
        config = replace(config, n_jobs=args.jobs)
    out = args.out or config.output_path
    if out is None:
        raise InvalidArgument("no output directory: pass --out or set output_path")

    def progress(done, total):
        if not args.quiet and (done == total or done % 10 == 0):
            print(f"\r{done}/{total} trial units", end="", file=sys.stderr, flush=True)

    summary, _ = run_experiment(config, out, progress)
    if not args.quiet:
        print(file=sys.stderr)
    print("method,signal_level,sigma,rejection_rate,standard_error,n_trials")
    for r in summary:
        print(f"{r.method},{r.signal_level:g},{r.sigma:g},{r.rejection_rate:.4f},"
              f"{r.standard_error:.4f},{r.n_trials}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "histogram":
            text = emit_histogram_data(args.infile, args.bins, args.out)
            if args.out is None:
                sys.stdout.write(text)
            return 0
        config = load_config(args.config)
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return 0
    except ParseError as exc:
        print(f"acss: parse error at line {exc.line}: {exc}", file=sys.stderr)
        return 2
    except (AcssError, ValueError, NotImplementedError, OSError) as exc:
        print(f"acss: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
