"""Deterministic desk-scale testbed for data-parallel training strategies.

Three strategies over the same miniature GPT-2 and the same autodiff tape:

- single: one worker, optional gradient accumulation
- ddp: replicated parameters, bucketed gradient AllReduce overlapped with
  the backward pass
- fsdp: parameters sharded across workers in layer units, gathered around
  each use and reduce-scattered on the way back

Workers are threads; collectives are synchronous, in-process, and bitwise
deterministic, so any strategy/world-size combination can be replayed and
diffed exactly.
"""

from .collectives import CollectiveCallRecord, WorkerGroup, run_on_ranks
from .data import (
    BatchPlan,
    ByteTokenizer,
    TokenDataset,
    WordTokenizer,
    clean_text,
    load_corpus_text,
    synthetic_corpus_text,
    synthetic_token_stream,
)
from .ddp import DdpReplica, allocate_buckets
from .errors import (
    AccountingError,
    IngestionError,
    InvariantError,
    ProtocolError,
    ShapeMismatchError,
    StateError,
    ValidationError,
)
from .estimator import Gpt2Trainer
from .fsdp import FsdpWorker, plan_units
from .harness import (
    ComparisonResult,
    RunConfig,
    RunResult,
    compare_strategies,
    run_experiment,
)
from .metrics import CSV_COLUMNS, EpochRecord, MemoryLedger, read_records
from .model import (
    ModelConfig,
    ParameterSet,
    init_params,
    load_checkpoint,
    model_forward,
    save_checkpoint,
    sequence_loss,
)
from .optim import Adam, Sgd, make_optimizer
from .strategy import SingleWorker
from .tensor import Tape, Tensor, backward
from .timing import CostModel, VirtualClock, WallClock, make_clock

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AccountingError",
    "BatchPlan",
    "ByteTokenizer",
    "CollectiveCallRecord",
    "ComparisonResult",
    "CostModel",
    "CSV_COLUMNS",
    "DdpReplica",
    "EpochRecord",
    "FsdpWorker",
    "Gpt2Trainer",
    "IngestionError",
    "InvariantError",
    "MemoryLedger",
    "ModelConfig",
    "ParameterSet",
    "ProtocolError",
    "RunConfig",
    "RunResult",
    "Sgd",
    "ShapeMismatchError",
    "SingleWorker",
    "StateError",
    "Tape",
    "Tensor",
    "TokenDataset",
    "ValidationError",
    "VirtualClock",
    "WallClock",
    "WorkerGroup",
    "allocate_buckets",
    "backward",
    "clean_text",
    "compare_strategies",
    "init_params",
    "load_checkpoint",
    "load_corpus_text",
    "make_clock",
    "make_optimizer",
    "model_forward",
    "plan_units",
    "read_records",
    "run_experiment",
    "run_on_ranks",
    "save_checkpoint",
    "sequence_loss",
    "synthetic_corpus_text",
    "synthetic_token_stream",
    "WordTokenizer",
]
