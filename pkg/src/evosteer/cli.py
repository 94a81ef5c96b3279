"""``evosteer`` command line: train / bench / replay / mock-critic."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .bench import ConfigError, ReplayMismatch, RunConfig, cmd_replay, cmd_train, run_bench


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evosteer", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, help_ in (("train", "train one policy per environment"),
                        ("bench", "run the method matrix and write metrics")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, metavar="PATH")
        s.add_argument("--out", metavar="DIR", help="override the config's output directory")
        s.add_argument("--seed", type=int, help="override the config's global seed")
        s.add_argument("--workers", type=int, default=1, metavar="N")

    s = sub.add_parser("replay", help="re-run one recorded episode and check it matches")
    s.add_argument("trace", metavar="TRACES_JSONL")
    s.add_argument("episode_id", help="method/env/episode, as in traces.jsonl")

    s = sub.add_parser("mock-critic", help="serve the mock critic over HTTP")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--wrong-first", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            cmd_train(_load(args))
        elif args.command == "bench":
            cfg = _load(args)
            table, _ = run_bench(cfg, workers=args.workers)
            sys.stdout.write(table.csv_text())
        elif args.command == "replay":
            cmd_replay(args.trace, args.episode_id)
        elif args.command == "mock-critic":
            from .mock_critic import MockCriticServer

            srv = MockCriticServer(args.host, args.port, wrong_first=args.wrong_first)
            print(f"mock critic listening on {srv.url}", flush=True)
            try:
                srv.serve_forever()
            except KeyboardInterrupt:
                pass
    except (ConfigError, ReplayMismatch, FileNotFoundError, KeyError, OSError) as exc:
        print(f"evosteer {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
