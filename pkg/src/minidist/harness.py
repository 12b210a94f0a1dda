"""Experiment runner: spin up worker threads, train, and record metrics.

A run is fully described by a RunConfig; (config, seed) determines every
byte of the metrics CSV and the final checkpoint when timing is "simulated"
(the default). "wall" timing reads the real clock and is the one
intentionally nondeterministic option.

Per epoch each rank trains over its shard of the batch plan, then the ranks
merge loss sums and token counts over collectives (token-weighted, so the
merged value equals the loss of the concatenated stream), gather per-rank
peak-memory and elapsed-time values, and rank 0 appends one CSV row.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .collectives import WorkerGroup, run_on_ranks
from .data import (
    BatchPlan,
    ByteTokenizer,
    TokenDataset,
    WordTokenizer,
    clean_text,
    encode_documents,
    load_corpus_text,
    synthetic_token_stream,
)
from .ddp import DdpReplica
from .errors import ValidationError
from .fsdp import FsdpWorker
from .metrics import (
    CSV_HEADER,
    EpochRecord,
    MemoryLedger,
    summarize_records,
    tokens_per_second,
)
from .model import ModelConfig, init_params, save_checkpoint, sequence_loss
from .optim import make_optimizer
from .strategy import SingleWorker
from .timing import CostModel, make_clock

STRATEGIES = ("single", "ddp", "fsdp")


@dataclass
class RunConfig:
    strategy: str = "single"
    world_size: int = 1
    epochs: int = 5
    global_batch: int = 8
    seq_len: int = 64
    learning_rate: float = 0.01
    optimizer: str = "sgd"
    bucket_cap: int = 32768       # elements per DDP gradient bucket
    accumulation: int = 1
    seed: int = 0
    corpus: str | None = None
    synthetic_tokens: int = 100_000
    tokenizer: str = "bytes"      # bytes | words
    timing: str = "simulated"     # simulated | wall
    time_data_loading: bool = False
    include_activation_memory: bool = False
    out_dir: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    tokens: np.ndarray | None = None   # in-memory id stream; overrides corpus
    cost: CostModel = field(default_factory=CostModel)
    collective_timeout_s: float = 60.0

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.world_size < 1:
            raise ValidationError(f"world_size must be >= 1, got {self.world_size}")
        if self.strategy == "single" and self.world_size != 1:
            raise ValidationError("single strategy runs with world_size 1")
        if self.strategy == "ddp" and self.accumulation != 1:
            raise ValidationError("ddp does not support accumulation; use fsdp or single")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.global_batch < 1 or self.global_batch % self.world_size != 0:
            raise ValidationError(
                f"global_batch {self.global_batch} must be a positive multiple "
                f"of world_size {self.world_size}"
            )
        if self.seq_len < 2:
            raise ValidationError(f"seq_len must be >= 2, got {self.seq_len}")
        if self.seq_len - 1 > self.model.max_seq_len:
            raise ValidationError(
                f"seq_len {self.seq_len} needs max_seq_len >= {self.seq_len - 1}, "
                f"model has {self.model.max_seq_len}"
            )
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.accumulation < 1:
            raise ValidationError(f"accumulation must be >= 1, got {self.accumulation}")
        if self.bucket_cap < 1:
            raise ValidationError(f"bucket_cap must be >= 1, got {self.bucket_cap}")
        if self.tokenizer not in ("bytes", "words"):
            raise ValidationError(f"tokenizer must be 'bytes' or 'words', got {self.tokenizer!r}")
        if self.timing not in ("simulated", "wall"):
            raise ValidationError(f"timing must be 'simulated' or 'wall', got {self.timing!r}")
        if self.synthetic_tokens < self.seq_len:
            raise ValidationError("synthetic_tokens must cover at least one sequence")
        return self


@dataclass
class RunResult:
    config: RunConfig
    records: list
    initial_loss: float
    summary: dict
    final_params: object
    csv_path: str | None = None
    checkpoint_path: str | None = None

    @property
    def final_loss(self):
        return self.records[-1].loss


def build_dataset(config):
    """Token ids -> TokenDataset per the config's data source."""
    if config.tokens is not None:
        ids = np.asarray(config.tokens, dtype=np.int64)
    elif config.corpus is not None:
        docs = load_corpus_text(config.corpus)
        if config.tokenizer == "words":
            tok = WordTokenizer((clean_text(d) for d in docs),
                                max_vocab=config.model.vocab_size)
        else:
            tok = ByteTokenizer()
        ids = encode_documents(docs, tok)
    else:
        ids = synthetic_token_stream(config.synthetic_tokens, config.seed)
    if ids.size and (ids.min() < 0 or ids.max() >= config.model.vocab_size):
        raise ValidationError(
            f"corpus ids reach {ids.max()}, model vocab_size is {config.model.vocab_size}"
        )
    dataset = TokenDataset(ids, config.seq_len)
    need = config.global_batch * config.accumulation
    if dataset.n_sequences < need:
        raise ValidationError(
            f"dataset yields {dataset.n_sequences} sequences, need at least {need} "
            f"for one optimizer step"
        )
    return dataset


def build_strategy(config, rank, group, ledger, clock, rng=None):
    params = init_params(config.model, seed=config.seed)
    optimizer = make_optimizer(config.optimizer)
    cost = config.cost if config.timing == "simulated" else None
    common = dict(ledger=ledger, clock=clock, cost_model=cost, rng=rng)
    if config.strategy == "single":
        return SingleWorker(config.model, params, optimizer,
                            accumulation=config.accumulation, **common)
    if config.strategy == "ddp":
        return DdpReplica(config.model, params, group, rank, config.bucket_cap,
                          optimizer, accumulation=config.accumulation, **common)
    return FsdpWorker(config.model, params, group, rank, optimizer,
                      accumulation=config.accumulation, **common)


def run_experiment(config):
    """Train per the config; returns a RunResult. With out_dir set, writes
    metrics.csv (incrementally, one row per epoch) and model.ckpt."""
    config.validate()
    dataset = build_dataset(config)
    plan = BatchPlan(config.global_batch, config.world_size, config.seed)
    cost = config.cost if config.timing == "simulated" else None
    group = WorkerGroup(config.world_size, cost_model=cost,
                        timeout_s=config.collective_timeout_s)

    csv_path = checkpoint_path = None
    csv_file = None
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = str(out / "metrics.csv")
        checkpoint_path = str(out / "model.ckpt")
        csv_file = open(csv_path, "w", newline="")

    records = []
    shared = {"initial_loss": None, "params": None}

    def emit(record):
        records.append(record)
        if csv_file is not None:
            csv_file.write(record.csv_row() + "\n")
            csv_file.flush()

    def worker(rank):
        clock = make_clock(config.timing)
        group.attach_clock(rank, clock)
        ledger = MemoryLedger(config.include_activation_memory)
        strategy = build_strategy(config, rank, group, ledger, clock)
        k = config.accumulation
        for epoch in range(config.epochs):
            ledger.epoch_start()
            if config.time_data_loading:
                t0 = clock.now()
                batches = plan.shard_batches(dataset, epoch, rank)
            else:
                batches = plan.shard_batches(dataset, epoch, rank)
                t0 = clock.now()
            n_steps = len(batches) // k
            loss_sum = 0.0
            token_sum = 0
            norm_sum = 0.0
            for s in range(n_steps):
                for j in range(k):
                    loss, count = strategy.forward_backward(batches[s * k + j])
                    loss_sum += loss
                    token_sum += count
                    if epoch == 0 and s == 0 and j == 0:
                        # all ranks must enter this collective, so gate on the
                        # loop indices only (shared state would race)
                        first = group.all_reduce_sum(
                            rank, np.array([loss, float(count)]), timed=False)
                        if rank == 0:
                            shared["initial_loss"] = first[0] / first[1]
                strategy.step(config.learning_rate)
                norm_sum += strategy.collect_metrics()["grad_norm"]
            elapsed = clock.now() - t0
            totals = group.all_reduce_sum(
                rank, np.array([loss_sum, float(token_sum)]), timed=False)
            peaks = group.all_gather(
                rank, np.array([float(ledger.epoch_peak_bytes)]), timed=False)
            times = group.all_gather(rank, np.array([float(elapsed)]), timed=False)
            ledger.check_transients_clear()
            if rank == 0:
                wall = float(times.max())
                emit(EpochRecord(
                    strategy=config.strategy,
                    epoch=epoch + 1,
                    loss=float(totals[0] / totals[1]),
                    grad_norm=norm_sum / n_steps,
                    throughput=tokens_per_second(float(totals[1]), wall),
                    peak_mem_bytes=int(peaks.max()),
                    wall_time_s=wall,
                    per_rank_peak_bytes=[int(p) for p in peaks],
                ))
        final = strategy.full_parameters()
        if rank == 0:
            shared["params"] = final

    try:
        if csv_file is not None:
            csv_file.write(CSV_HEADER + "\n")
            csv_file.flush()
        run_on_ranks(group, worker)
    finally:
        if csv_file is not None:
            csv_file.close()

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, shared["params"])
    return RunResult(
        config=config,
        records=records,
        initial_loss=shared["initial_loss"],
        summary=summarize_records(records),
        final_params=shared["params"],
        csv_path=csv_path,
        checkpoint_path=checkpoint_path,
    )


def evaluate_loss(config, params, dataset):
    """Mean per-token loss over the dataset with no tape and no updates."""
    total = 0.0
    count = 0
    for i in range(dataset.n_sequences):
        loss, n = sequence_loss(config, params, dataset.sequence(i))
        total += float(loss.values)
        count += n
    if count == 0:
        raise ValidationError("evaluation dataset has no sequences")
    return total / count


_COMPARE_KEYS = ("epochs", "global_batch", "seq_len", "seed", "corpus",
                 "synthetic_tokens", "tokenizer", "model")


@dataclass
class ComparisonResult:
    results: list
    summaries: dict
    table: str
    flags: dict
    csv_path: str | None = None


def _format_cell(value):
    return f"{value:.6g}"


def comparison_table(summaries):
    """Aligned text table: one summary row per metric, one column per run."""
    from .metrics import SUMMARY_ROWS
    names = list(summaries)
    label_w = max(len(r) for r in SUMMARY_ROWS)
    col_w = {n: max(len(n), *(len(_format_cell(summaries[n][r])) for r in SUMMARY_ROWS))
             for n in names}
    lines = [" " * label_w + "  " + "  ".join(n.rjust(col_w[n]) for n in names)]
    for row in SUMMARY_ROWS:
        cells = "  ".join(_format_cell(summaries[n][row]).rjust(col_w[n]) for n in names)
        lines.append(row.ljust(label_w) + "  " + cells)
    return "\n".join(lines)


def compare_strategies(configs, out_dir=None):
    """Run several configs over the same model and data and tabulate them.

    Configs must agree on everything that defines the learning problem
    (model, data source, seed, batch geometry, epochs); they may differ in
    strategy, world size, and strategy knobs. Refuses mismatched setups.
    """
    if len(configs) < 2:
        raise ValidationError("compare needs at least two run configs")
    for cfg in configs:
        cfg.validate()
    base = configs[0]
    for cfg in configs[1:]:
        for key in _COMPARE_KEYS:
            if getattr(cfg, key) != getattr(base, key):
                raise ValidationError(
                    f"comparison refused: configs disagree on {key} "
                    f"({getattr(base, key)!r} vs {getattr(cfg, key)!r})"
                )
    results = []
    for i, cfg in enumerate(configs):
        run_dir = str(Path(out_dir) / f"run{i}_{cfg.strategy}") if out_dir else None
        results.append(run_experiment(replace(cfg, out_dir=run_dir)))

    summaries = {}
    for i, res in enumerate(results):
        name = res.config.strategy
        if name in summaries:
            name = f"{name}#{i}"
        summaries[name] = res.summary
    table = comparison_table(summaries)

    by_strategy = {}
    for res in results:
        by_strategy.setdefault(res.config.strategy, res)
    flags = {"loss_decreased_all": all(r.final_loss < r.initial_loss for r in results)}
    if "fsdp" in by_strategy and "ddp" in by_strategy:
        flags["fsdp_peak_mem_lt_ddp"] = (
            by_strategy["fsdp"].summary["Avg. Memory"]
            < by_strategy["ddp"].summary["Avg. Memory"])
    if "fsdp" in by_strategy and "single" in by_strategy:
        flags["fsdp_peak_mem_lt_single"] = (
            by_strategy["fsdp"].summary["Avg. Memory"]
            < by_strategy["single"].summary["Avg. Memory"])

    csv_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = str(out / "comparison.csv")
        with open(csv_path, "w", newline="") as f:
            f.write(CSV_HEADER + "\n")
            for res in results:
                for record in res.records:
                    f.write(record.csv_row() + "\n")
        (out / "comparison.txt").write_text(table + "\n")
    return ComparisonResult(results=results, summaries=summaries, table=table,
                            flags=flags, csv_path=csv_path)
