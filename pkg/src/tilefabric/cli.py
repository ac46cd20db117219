"""Command-line driver.

    tilefabric [run] --pattern ag-pull --world-size 2 --m 8 --n 8 --k 8 --verify
    tilefabric sweep --pattern fd-bsp,fd-fused --kv-len 64,128,256 --out fd.csv

Exit codes: 0 success, 1 verification mismatch (or a failed sweep cell
under --verify), 2 invalid flags, 3 deadlock / runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import bench
from .fabric import DeadlockError, FabricError
from .tilemath import TileSpec

PRESETS = {
    # shapes and world size as published; the M / kv_len sweeps are ours
    "paper-ag-gemm": {
        "pattern": "ag-pull", "world_size": 8, "n": 28672, "k": 8192,
        "sweep": {"m": [2 ** i for i in range(14)]},
    },
    "desk-ag-gemm": {
        "pattern": "ag-pull", "world_size": 8, "n": 448, "k": 128,
        "sweep": {"m": [2 ** i for i in range(8)]},
    },
    "paper-fd": {
        "pattern": "fd-fused", "world_size": 8, "heads": 96, "head_dim": 128,
        "sweep": {"kv_len": [2 ** i for i in range(15, 20)]},
    },
    "desk-fd": {
        "pattern": "fd-fused", "world_size": 8, "heads": 8, "head_dim": 32,
        "sweep": {"kv_len": [2 ** i for i in range(10, 16)], "world_size": list(range(1, 9))},
    },
}

_INT_AXES = ("world_size", "m", "n", "k", "heads", "head_dim", "kv_len")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _add_common(p, listy: bool):
    kind = str if listy else int
    lst = " (comma-separated list)" if listy else ""
    p.add_argument("--pattern", type=str, help="one of " + ", ".join(bench.PATTERNS) + lst)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--world-size", type=kind, help="number of ranks" + lst)
    p.add_argument("--m", type=kind, help="rows of A" + lst)
    p.add_argument("--n", type=kind, help="columns of B" + lst)
    p.add_argument("--k", type=kind, help="shared dimension, split over ranks" + lst)
    p.add_argument("--heads", type=kind, help="query heads" + lst)
    p.add_argument("--head-dim", type=kind, help="head dimension" + lst)
    p.add_argument("--kv-len", type=kind, help="global KV length, split over ranks" + lst)
    p.add_argument("--tiles", type=str, default=None, help="GEMM tile sizes bm,bn,bk (default 16,16,16)")
    p.add_argument("--skew", action="append", default=[], help="rank:millis delay on a rank's first compute")
    p.add_argument("--launch-cost-us", type=float, default=20.0, help="synthetic launch cost in microseconds")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verify", action="store_true", help="check against the brute-force oracle first")
    p.add_argument("--fold-order", choices=("rank", "arrival"), default="rank")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parsers():
    run = _Parser(prog="tilefabric", description="Run one pattern with warmup and timed iterations.")
    _add_common(run, listy=False)
    run.add_argument("--summary", help="summary JSON output path")
    run.add_argument("--dry-run", action="store_true", help="print the resolved configuration and exit")

    sw = _Parser(prog="tilefabric sweep", description="Run the cartesian product of comma-separated flag values.")
    _add_common(sw, listy=True)
    sw.add_argument("--dat", help="gnuplot data path (default: <out>.dat)")
    sw.add_argument("--dry-run", action="store_true", help="list the grid cells and exit")
    return run, sw


def _base_kwargs(args) -> dict:
    kw = {}
    if args.preset:
        kw.update({k: v for k, v in PRESETS[args.preset].items() if k != "sweep"})
    for name in ("pattern",) + _INT_AXES:
        val = getattr(args, name)
        if val is not None:
            kw[name] = val
    kw.update(
        skew=bench.parse_skew(args.skew),
        launch_cost=args.launch_cost_us * 1e-6,
        iters=args.iters,
        warmup=args.warmup,
        seed=args.seed,
        verify=args.verify,
        fold_order=args.fold_order,
    )
    if args.tiles:
        kw["tiles"] = TileSpec.parse(args.tiles)
    return kw


def _run(argv) -> int:
    parser, _ = build_parsers()
    args = parser.parse_args(argv)
    _logging(args.verbose)
    try:
        kw = _base_kwargs(args)
    except ValueError as exc:
        parser.error(str(exc))
    if args.preset:
        # a single run takes the first value of the preset's sweep axes
        for axis, values in PRESETS[args.preset]["sweep"].items():
            if getattr(args, axis) is None:
                kw[axis] = values[0]
    if "pattern" not in kw:
        parser.error("--pattern or --preset is required")
    try:
        cfg = bench.RunConfig(**kw)
    except (ValueError, TypeError) as exc:
        parser.error(str(exc))

    if args.dry_run:
        print(_describe(cfg, PRESETS.get(args.preset)))
        return 0

    try:
        result = bench.benchmark(cfg)
    except bench.VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 1
    except DeadlockError as exc:
        print(f"deadlock: {exc}", file=sys.stderr)
        return 3
    except FabricError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3

    summary = result.summary()
    summary["tax_report"] = result.reports[-1].as_dict()
    if args.out:
        bench.write_csv(args.out, bench.RUN_FIELDS, result.rows)
    if args.summary:
        bench.write_json(args.summary, summary)
    print(json.dumps(summary, indent=2, default=str))
    return 0


def _describe(cfg: bench.RunConfig, preset=None) -> str:
    if cfg.family == "ag":
        shape = f"M={cfg.m}, N={cfg.n}, K={cfg.k}, tiles={cfg.tiles.bm}x{cfg.tiles.bn}x{cfg.tiles.bk}"
    else:
        shape = f"H={cfg.heads}, d={cfg.head_dim}, kv_len={cfg.kv_len}, batch=1"
    lines = [
        f"pattern={cfg.pattern}",
        f"{shape}, W={cfg.world_size}",
        f"skew={bench.format_skew(cfg.skew) or 'none'}, launch_cost_us={cfg.launch_cost * 1e6:g}",
        f"iters={cfg.iters}, warmup={cfg.warmup}, seed={cfg.seed}, verify={cfg.verify}",
    ]
    if preset:
        for axis, values in preset["sweep"].items():
            lines.append(f"sweep {axis}: {', '.join(str(v) for v in values)}")
    return "\n".join(lines)


def _split(value, cast):
    return [cast(v) for v in str(value).split(",") if v.strip()]


def _sweep(argv) -> int:
    _, parser = build_parsers()
    args = parser.parse_args(argv)
    _logging(args.verbose)
    axes = {}
    if args.preset:
        axes.update(PRESETS[args.preset]["sweep"])
    try:
        for name in ("pattern",) + _INT_AXES:
            val = getattr(args, name)
            if val is not None:
                axes[name] = _split(val, str if name == "pattern" else int)
        for p in axes.get("pattern", []):
            if p not in bench.PATTERNS:
                raise ValueError(f"unknown pattern {p!r}")
        base = _base_kwargs(argparse.Namespace(**{**vars(args), **{n: None for n in ("pattern",) + _INT_AXES}}))
        if "pattern" not in axes and "pattern" not in base:
            raise ValueError("--pattern or --preset is required")
        cells = bench.grid(base, axes)
    except ValueError as exc:
        parser.error(str(exc))

    if args.dry_run:
        for cell in cells:
            print({k: v for k, v in cell.items() if k in ("pattern",) + _INT_AXES})
        return 0

    rows = bench.sweep(cells)
    if args.out:
        bench.write_csv(args.out, bench.SWEEP_FIELDS, rows)
        bench.write_gnuplot(args.dat or args.out + ".dat", rows)
    else:
        import csv
        writer = csv.DictWriter(sys.stdout, fieldnames=bench.SWEEP_FIELDS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
        if args.dat:
            bench.write_gnuplot(args.dat, rows)
    failed = [r for r in rows if r["error"] or (args.verify and r["verified"] is not True)]
    if failed:
        print(f"{len(failed)} of {len(rows)} cells failed", file=sys.stderr)
        return 1 if args.verify else 3
    return 0


def _logging(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and argv[0] == "sweep":
            return _sweep(argv[1:])
        if argv and argv[0] == "run":
            argv = argv[1:]
        return _run(argv)
    except _UsageError:
        return 2
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
