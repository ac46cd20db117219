"""Benchmark harness: seeded inputs, warmup + timed iterations, oracle
verification and CSV/JSON emission for single runs and sweeps."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
from collections import defaultdict
from typing import Optional, Sequence

import numpy as np

from . import _validation
from .ag_gemm import AgGemmProblem, run_ag_gemm
from .fabric import WorldConfig
from .flash_decode import FdVariant, run_fd
from .oracles import max_rel_error, naive_matmul, softmax_attention
from .tilemath import DecodeProblem, TileSpec

logger = logging.getLogger(__name__)

PATTERNS = {
    "ag-baseline": ("ag", "baseline"),
    "ag-pull": ("ag", "pull"),
    "ag-push": ("ag", "push"),
    "fd-bsp": ("fd", FdVariant.BSP),
    "fd-ag": ("fd", FdVariant.INDEPENDENT_AG),
    "fd-wait": ("fd", FdVariant.FINE_WAITS),
    "fd-fused": ("fd", FdVariant.FUSED),
}
BASELINE = {"ag": "ag-baseline", "fd": "fd-bsp"}
FD_TOLERANCE = 1e-5

RUN_FIELDS = [
    "pattern", "world_size", "m", "n", "k", "heads", "head_dim", "kv_len",
    "bm", "bn", "bk", "skew", "launch_cost_us", "seed", "iteration",
    "latency_ms", "makespan_ms", "launch_count", "launch_tax_us",
    "bulk_sync_tax_ms", "wait_idle_ms", "staged_bytes", "verified",
]

SWEEP_FIELDS = [
    "pattern", "world_size", "m", "n", "k", "heads", "head_dim", "kv_len",
    "bm", "bn", "bk", "skew", "launch_cost_us", "seed", "iters", "warmup",
    "median_ms", "p10_ms", "p90_ms", "makespan_median_ms", "launch_count",
    "launch_tax_us", "bulk_sync_tax_ms", "wait_idle_ms", "staged_bytes",
    "verified", "max_error", "speedup", "error",
]


class VerificationError(RuntimeError):
    def __init__(self, pattern, max_error, tolerance):
        self.max_error = max_error
        self.tolerance = tolerance
        super().__init__(
            f"{pattern}: output differs from oracle, max error {max_error:.3e} (tolerance {tolerance:.1e})"
        )


def parse_skew(specs) -> dict:
    """``["0:50", "2:5.5"]`` or ``"0:50,2:5.5"`` (rank:millis) -> {rank: seconds}."""
    if isinstance(specs, str):
        specs = [specs]
    out = {}
    for spec in specs or ():
        for item in spec.split(","):
            item = item.strip()
            if not item:
                continue
            rank, sep, millis = item.partition(":")
            if not sep:
                raise ValueError(f"skew {item!r} is not rank:millis")
            out[int(rank)] = float(millis) / 1000.0
    return out


def format_skew(skew: dict) -> str:
    return ",".join(f"{r}:{s * 1000:g}" for r, s in sorted(skew.items()))


@dataclasses.dataclass(frozen=True)
class RunConfig:
    pattern: str
    world_size: int = 2
    m: int = 16
    n: int = 448
    k: int = 128
    heads: int = 8
    head_dim: int = 32
    kv_len: int = 1024
    tiles: TileSpec = TileSpec()
    skew: dict = dataclasses.field(default_factory=dict)
    launch_cost: float = 20e-6
    iters: int = 500
    warmup: int = 100
    seed: int = 0
    verify: bool = False
    fold_order: str = "rank"

    def __post_init__(self):
        _validation.check_choice(self.pattern, PATTERNS, "pattern")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.family == "ag":
            _validation.check_divisible(self.k, self.world_size, "K")
            if min(self.m, self.n, self.k) < 1:
                raise ValueError("M, N and K must be positive")
        else:
            _validation.check_divisible(self.kv_len, self.world_size, "kv_len")
            if min(self.heads, self.head_dim, self.kv_len) < 1:
                raise ValueError("heads, head_dim and kv_len must be positive")
        self.world_config()

    @property
    def family(self) -> str:
        return PATTERNS[self.pattern][0]

    @property
    def variant(self):
        return PATTERNS[self.pattern][1]

    def world_config(self) -> WorldConfig:
        return WorldConfig(self.world_size, launch_cost=self.launch_cost, skew=dict(self.skew),
                           seed=self.seed)

    def problem(self):
        if self.family == "ag":
            return AgGemmProblem.random(self.m, self.n, self.k, self.world_size, self.tiles, self.seed)
        return DecodeProblem.random(self.heads, self.head_dim, self.kv_len, self.world_size, self.seed)

    def shape_fields(self) -> dict:
        ag = self.family == "ag"
        return {
            "pattern": self.pattern,
            "world_size": self.world_size,
            "m": self.m if ag else "",
            "n": self.n if ag else "",
            "k": self.k if ag else "",
            "heads": "" if ag else self.heads,
            "head_dim": "" if ag else self.head_dim,
            "kv_len": "" if ag else self.kv_len,
            "bm": self.tiles.bm if ag else "",
            "bn": self.tiles.bn if ag else "",
            "bk": self.tiles.bk if ag else "",
            "skew": format_skew(self.skew),
            "launch_cost_us": round(self.launch_cost * 1e6, 6),
            "seed": self.seed,
        }

    def shape_key(self) -> tuple:
        """Everything but the pattern name; rows sharing it are comparable."""
        f = self.shape_fields()
        f.pop("pattern")
        return (self.family,) + tuple(f.values())


def execute(cfg: RunConfig, prob, world_cfg: Optional[WorldConfig] = None):
    world_cfg = world_cfg or cfg.world_config()
    if cfg.family == "ag":
        run = run_ag_gemm(prob, cfg.variant, world_cfg)
        return run, run.c
    run = run_fd(prob, cfg.variant, world_cfg, cfg.fold_order)
    return run, run.outputs


def check_against_oracle(cfg: RunConfig, prob, outputs) -> float:
    """Max error of all ranks' outputs vs the brute-force oracle; raises
    :class:`VerificationError` when out of tolerance. AG+GEMM must match
    bitwise, flash decode within a normwise relative 1e-5."""
    if cfg.family == "ag":
        ref = naive_matmul(prob.a, prob.b)
        err = max(float(np.max(np.abs(out.astype(np.float64) - ref))) for out in outputs)
        exact = all(np.array_equal(out, ref) for out in outputs)
        if not exact:
            raise VerificationError(cfg.pattern, err, 0.0)
        return err
    ref = softmax_attention(prob.q, prob.k, prob.v, prob.scale)
    err = max(max_rel_error(out, ref) for out in outputs)
    if not err <= FD_TOLERANCE:
        raise VerificationError(cfg.pattern, err, FD_TOLERANCE)
    return err


@dataclasses.dataclass
class BenchResult:
    config: RunConfig
    rows: list
    latencies_ms: list
    makespans_ms: list
    verified: bool
    max_error: Optional[float]
    reports: list

    def summary(self) -> dict:
        lat = np.asarray(self.latencies_ms)
        mk = np.asarray(self.makespans_ms)
        last = self.reports[-1]
        out = dict(self.config.shape_fields())
        out.update({
            "iters": self.config.iters,
            "warmup": self.config.warmup,
            "median_ms": float(np.median(lat)),
            "p10_ms": float(np.percentile(lat, 10)),
            "p90_ms": float(np.percentile(lat, 90)),
            "makespan_median_ms": float(np.median(mk)),
            "launch_count": last.total_launches,
            "launch_tax_us": last.total_launch_tax_ns / 1e3,
            "bulk_sync_tax_ms": float(np.median([r.bulk_sync_tax_ns for r in self.reports])) / 1e6,
            "wait_idle_ms": float(np.median([r.wait_idle_ns for r in self.reports])) / 1e6,
            "staged_bytes": last.staged_bytes,
            "verified": self.verified,
            "max_error": self.max_error if self.max_error is not None else "",
        })
        return out


def benchmark(cfg: RunConfig) -> BenchResult:
    """Warm up, then time ``cfg.iters`` runs. With ``cfg.verify`` the first
    run is checked against the oracle before anything is timed."""
    prob = cfg.problem()
    world_cfg = cfg.world_config()
    verified, max_error, reference = False, None, None
    if cfg.verify:
        _, outputs = execute(cfg, prob, world_cfg)
        max_error = check_against_oracle(cfg, prob, outputs)
        verified = True
        reference = outputs[0]
    for _ in range(cfg.warmup):
        execute(cfg, prob, world_cfg)
    rows, lat, mk, reports = [], [], [], []
    for it in range(cfg.iters):
        run, outputs = execute(cfg, prob, world_cfg)
        if reference is not None and cfg.fold_order == "rank" and not np.array_equal(outputs[0], reference):
            raise VerificationError(cfg.pattern, max_rel_error(outputs[0], reference), 0.0)
        rep = run.report
        lat.append(run.world.wall_ns / 1e6)
        mk.append(rep.makespan_ns / 1e6)
        reports.append(rep)
        row = dict(cfg.shape_fields())
        row.update({
            "iteration": it,
            "latency_ms": lat[-1],
            "makespan_ms": mk[-1],
            "launch_count": rep.total_launches,
            "launch_tax_us": rep.total_launch_tax_ns / 1e3,
            "bulk_sync_tax_ms": rep.bulk_sync_tax_ns / 1e6,
            "wait_idle_ms": rep.wait_idle_ns / 1e6,
            "staged_bytes": rep.staged_bytes,
            "verified": verified,
        })
        rows.append(row)
    return BenchResult(cfg, rows, lat, mk, verified, max_error, reports)


def write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=str)


def grid(base: dict, axes: dict) -> list:
    """Cartesian product of ``axes`` (name -> values) over ``base`` kwargs,
    restricted per pattern to the axes that pattern actually uses."""
    ag_axes = {"m", "n", "k", "tiles"}
    fd_axes = {"heads", "head_dim", "kv_len"}
    cells = []
    seen = set()
    for pattern in axes.get("pattern", [base.get("pattern")]):
        family = PATTERNS[pattern][0]
        irrelevant = fd_axes if family == "ag" else ag_axes
        names = [a for a in axes if a != "pattern" and a not in irrelevant]
        for values in itertools.product(*(axes[a] for a in names)):
            kwargs = dict(base)
            kwargs.update(zip(names, values))
            kwargs["pattern"] = pattern
            key = tuple(sorted((k, repr(v)) for k, v in kwargs.items()))
            if key not in seen:
                seen.add(key)
                cells.append(kwargs)
    return cells


def sweep(cells: Sequence[dict]) -> list:
    """Run each cell; a failing cell is recorded in its row's ``error`` column
    and the sweep continues. Adds ``speedup`` = baseline median / variant
    median for cells whose baseline pattern ran with the same shape."""
    rows = []
    configs = []
    for kwargs in cells:
        row = {f: "" for f in SWEEP_FIELDS}
        cfg = None
        try:
            cfg = RunConfig(**kwargs)
            row.update(cfg.shape_fields())
            row.update(benchmark(cfg).summary())
        except Exception as exc:  # noqa: BLE001 - recorded in-row
            logger.warning("sweep cell %s failed: %s", kwargs, exc)
            row.update({k: v for k, v in kwargs.items() if k in row and not isinstance(v, (dict, TileSpec))})
            if cfg is not None:
                row.update(cfg.shape_fields())
            row["verified"] = False
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
        configs.append(cfg)

    base_median = {}
    for cfg, row in zip(configs, rows):
        if cfg is not None and not row["error"] and cfg.pattern == BASELINE[cfg.family]:
            base_median[cfg.shape_key()] = row["median_ms"]
    for cfg, row in zip(configs, rows):
        if cfg is None or row["error"]:
            continue
        base = base_median.get(cfg.shape_key())
        if base is not None and row["median_ms"] > 0:
            row["speedup"] = base / row["median_ms"]
    return rows


def write_gnuplot(path, rows) -> None:
    """Speedup-vs-size table: one block per (family, world size, fixed
    shape), x = M (ag) or kv_len (fd), one column per pattern."""
    blocks = defaultdict(lambda: defaultdict(dict))
    patterns = defaultdict(list)
    for row in rows:
        if row.get("error") or row.get("speedup") in ("", None):
            continue
        family = PATTERNS[row["pattern"]][0]
        x_name = "m" if family == "ag" else "kv_len"
        fixed = tuple((f, row[f]) for f in SWEEP_FIELDS[1:14] if f != x_name)
        key = (family, fixed)
        blocks[key][row[x_name]][row["pattern"]] = row["speedup"]
        if row["pattern"] not in patterns[key]:
            patterns[key].append(row["pattern"])
    with open(path, "w") as fh:
        for key, by_x in blocks.items():
            family, fixed = key
            x_name = "m" if family == "ag" else "kv_len"
            cols = patterns[key]
            fh.write("# " + " ".join(f"{k}={v}" for k, v in fixed if v != "") + "\n")
            fh.write(f"# {x_name} " + " ".join(cols) + "\n")
            for x in sorted(by_x, key=float):
                vals = [by_x[x].get(p, "NaN") for p in cols]
                fh.write(f"{x} " + " ".join(f"{v:.6g}" if v != "NaN" else v for v in vals) + "\n")
            fh.write("\n\n")
