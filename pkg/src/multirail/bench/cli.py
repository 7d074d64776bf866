"""nezha-bench: allreduce benchmark sweeps, simulator scenarios and presets."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from ..config import parse_sizes
from ..transport import ENV_DIR
from .records import CI_ITERS, FULL_ITERS, BenchConfig, FailureInjection
from .presets import PRESETS, run_preset

log = logging.getLogger("nezha-bench")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nezha-bench", description=__doc__)
    p.add_argument("--ranks", type=int, default=2, help="world size")
    p.add_argument("--rank", type=int, help="play only this rank (shaped transport, one process per rank)")
    p.add_argument("--sizes", default="2KB:64MB", help="'2KB:64MB' (powers of two) or '1KB,8MB'")
    p.add_argument("--iters", type=int, help=f"operations per size (default {CI_ITERS}, --full: {FULL_ITERS})")
    p.add_argument("--full", action="store_true", help=f"run {FULL_ITERS} operations per size")
    p.add_argument("--warmup", type=int, default=100, help="leading operations excluded from the mean")
    p.add_argument("--rails", help="rails TOML file (default: two shaped TCP rails)")
    p.add_argument("--algorithm", default="ring", choices=["ring", "ring-chunked"])
    p.add_argument("--scheduler", default="nezha", choices=["nezha", "fixed", "slice"])
    p.add_argument("--transport", default="inmem", choices=["shaped", "inmem"])
    p.add_argument("--clock", choices=["wall", "virtual"],
                   help="timing source (default: virtual in memory, wall on sockets)")
    p.add_argument("--output", help="CSV path (a directory for --preset)")
    p.add_argument("--balancer-state", help="JSON allocation table to load and save")
    p.add_argument("--fail-rail", action="append", default=[], metavar="ID@MS",
                   help="take a rail down MS milliseconds into the run (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", help=f"simulator preset: {', '.join(PRESETS)}")
    p.add_argument("--quick", action="store_true", help="coarser preset sweeps")
    p.add_argument("--scenario", help="simulator scenario TOML")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _forward_args(argv: list[str]) -> list[str]:
    """argv without any --rank, for re-launching one process per rank."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--rank":
            skip = True
            continue
        if a.startswith("--rank="):
            continue
        out.append(a)
    return out


def _print_rows(header, rows, stream=None):
    stream = stream or sys.stdout
    stream.write(",".join(header) + "\n")
    for r in rows:
        stream.write(",".join(str(x) for x in r) + "\n")


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.preset:
            if args.preset not in PRESETS:
                parser.error(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
            res = run_preset(args.preset, args.output or ".", quick=args.quick)
            _print_rows(res["header"], res["rows"])
            print(f"wrote {res['csv']} and {res['plot']}", file=sys.stderr)
            return 0
        if args.scenario:
            from ..simnet.scenario import Scenario, run_scenario, write_csv
            header, rows = run_scenario(Scenario.load(args.scenario))
            sys.stdout.write(write_csv(header, rows, args.output))
            return 0

        iters = args.iters if args.iters is not None else (FULL_ITERS if args.full else CI_ITERS)
        fail_rank = args.rank or 0
        cfg = BenchConfig(world_size=args.ranks, sizes=parse_sizes(args.sizes), iters=iters, warmup=args.warmup,
                          algorithm=args.algorithm, rails=args.rails, scheduler=args.scheduler,
                          transport=args.transport, output=args.output, seed=args.seed,
                          failures=[FailureInjection.parse(f, fail_rank) for f in args.fail_rail],
                          balancer_state=args.balancer_state, clock=args.clock)
        cfg.profiles()  # surface rail config errors before launching anything
        if args.rank is not None and not 0 <= args.rank < args.ranks:
            parser.error(f"--rank {args.rank} outside 0..{args.ranks - 1}")
        if cfg.transport == "shaped" and args.rank is None:
            from .runner import spawn_ranks
            return spawn_ranks(_forward_args(argv), cfg.world_size)
        if cfg.transport == "shaped" and ENV_DIR not in os.environ:
            log.warning("%s unset; using the default rendezvous directory", ENV_DIR)
        from .runner import run_benchmark
        records = run_benchmark(cfg, args.rank if cfg.transport == "shaped" else None)
        if args.rank in (None, 0):
            from .records import HEADER
            _print_rows(HEADER, [r.row() for r in records])
        return 0
    except Exception as exc:  # config, rendezvous, rank failures, wrong sums
        print(f"nezha-bench: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
