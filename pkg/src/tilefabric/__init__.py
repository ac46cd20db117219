"""Desk-scale multi-rank runtime for fused communication/computation patterns."""
from .ag_gemm import AgGemmProblem, AllGatherGemm, run_ag_gemm, run_baseline, run_pull, run_push
from .fabric import (
    BoundsError,
    ConfigError,
    DeadlockError,
    FabricError,
    RankCtx,
    SignalBoard,
    SymmetricTensor,
    WorkerError,
    WorldConfig,
    launch_world,
)
from .flash_decode import FdVariant, FlashDecoder, run_fd
from .taxmeter import EventKind, TaskEvent, TaxReport, report
from .tilemath import (
    AttnPartial,
    DecodeProblem,
    TileSpec,
    attention_partial,
    combine_partials,
    finalize,
    gemm_acc,
)

__version__ = "0.1.0"
