"""Command-line entry point: stream generation, experiment runs,
report rendering, and checkpoint inspection."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .harness import (ExperimentConfig, config_from_mapping,
                      describe_pool, parse_config_text, render_report,
                      run_experiment)
from .stream import build_stream, export_stream


def _add_run_parser(sub):
    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--method", action="append", default=None,
                   help="override methods (repeatable)")
    p.add_argument("--seed", action="append", type=int, default=None,
                   help="override seeds (repeatable)")
    # every config key is also overridable by a flag of the same name
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in ("methods", "seeds"):
            p.add_argument(f"--{f.name}", default=None,
                           help=f"override {f.name} (comma separated)")
        else:
            p.add_argument(f"--{f.name}", default=None,
                           help=f"override {f.name}")
    return p


def _run(args) -> int:
    mapping = parse_config_text(Path(args.config).read_text())
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            mapping[f.name] = str(value)
    if args.method:
        mapping["methods"] = ",".join(args.method)
    if args.seed:
        mapping["seeds"] = ",".join(str(s) for s in args.seed)
    config = config_from_mapping(mapping)
    results = run_experiment(config)
    print(f"results written to {results}")
    print(render_report(results))
    return 0


def _gen_stream(args) -> int:
    stages = build_stream(args.scenario, args.stages, args.samples,
                          args.test_samples, args.seed, args.image_size)
    export_stream(stages, args.out)
    total = sum(len(s.train) + len(s.test) for s in stages)
    print(f"wrote {len(stages)} stages ({total} samples) to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="odex",
        description="continual learning with distribution-gated model expansion")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-stream", help="generate and export a synthetic stream")
    g.add_argument("--scenario", required=True,
                   choices=("shifting_source", "transformed"))
    g.add_argument("--stages", type=int, default=5)
    g.add_argument("--samples", type=int, default=200, help="train samples per stage")
    g.add_argument("--test-samples", type=int, default=50)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)

    _add_run_parser(sub)

    r = sub.add_parser("report", help="render the report table for a results dir")
    r.add_argument("--dir", required=True)

    i = sub.add_parser("inspect-pool", help="summarize a pool checkpoint")
    i.add_argument("--checkpoint", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "gen-stream":
            return _gen_stream(args)
        if args.command == "run":
            return _run(args)
        if args.command == "report":
            print(render_report(args.dir))
            return 0
        if args.command == "inspect-pool":
            print(describe_pool(args.checkpoint))
            return 0
        raise ValueError(f"unknown command {args.command!r}")
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
