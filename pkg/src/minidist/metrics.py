"""Run metrics: throughput, loss, gradient norms, and the simulated memory
ledger.

The ledger does not inspect the allocator; it counts payload bytes the
caller declares, classed as param/grad/opt/act. The headline peak covers
parameters, gradients, and optimizer state; activation bytes are tracked
under "act" and excluded unless include_activations_in_peak is set. Strategy
code declares its own residency model (replica buffers, bucket storage,
gathered shards), which is what the comparison measures.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import AccountingError, ValidationError

CSV_COLUMNS = ("strategy", "epoch", "loss", "grad_norm", "throughput",
               "peak_mem_bytes", "wall_time_s")
CSV_HEADER = ",".join(CSV_COLUMNS)

SUMMARY_ROWS = ("Avg. Loss", "Avg. Gradient Norm", "Total Training Time",
                "Avg. Memory", "Avg. Throughput")

LEDGER_CLASSES = ("param", "grad", "opt", "act")


def tokens_per_second(total_tokens, seconds):
    if seconds <= 0:
        raise ValidationError(f"elapsed seconds must be positive, got {seconds}")
    if total_tokens < 0:
        raise ValidationError(f"token count must be >= 0, got {total_tokens}")
    return total_tokens / seconds


def per_token_loss(total_loss, token_count):
    if token_count <= 0:
        raise ValidationError(f"token count must be positive, got {token_count}")
    return total_loss / token_count


def grad_l2_norm(arrays):
    """Global L2 norm over a list of arrays, summed in list order."""
    total = 0.0
    for a in arrays:
        a = np.asarray(a)
        total += float((a * a).sum())
    return float(np.sqrt(total))


def normalize_grads(arrays):
    """Scale gradients to unit global norm.

    Returns (normalized copies, norm, degenerate). A zero gradient cannot be
    normalized; it comes back as zeros with degenerate=True. Reported for
    inspection only; the training update uses raw averaged gradients.
    """
    norm = grad_l2_norm(arrays)
    if norm == 0.0:
        return [np.array(a, dtype=np.float64) for a in arrays], 0.0, True
    return [np.asarray(a, dtype=np.float64) / norm for a in arrays], norm, False


class MemoryLedger:
    """Byte accounting for one rank; raises on negative balances."""

    def __init__(self, include_activations_in_peak=False):
        self.include_activations_in_peak = include_activations_in_peak
        self._current = {c: 0 for c in LEDGER_CLASSES}
        self._by_tag = {}
        self._peak = 0
        self._epoch_peak = 0
        self.events = []

    def _headline(self):
        total = self._current["param"] + self._current["grad"] + self._current["opt"]
        if self.include_activations_in_peak:
            total += self._current["act"]
        return total

    def _check(self, cls, nbytes):
        if cls not in LEDGER_CLASSES:
            raise ValidationError(f"unknown ledger class {cls!r}")
        if nbytes < 0:
            raise ValidationError(f"byte count must be >= 0, got {nbytes}")
        return int(nbytes)

    def alloc(self, cls, nbytes, tag=None):
        nbytes = self._check(cls, nbytes)
        self._current[cls] += nbytes
        if tag is not None:
            self._by_tag[tag] = self._by_tag.get(tag, 0) + nbytes
        self.events.append(("alloc", cls, tag, nbytes))
        head = self._headline()
        if head > self._peak:
            self._peak = head
        if head > self._epoch_peak:
            self._epoch_peak = head

    def free(self, cls, nbytes, tag=None):
        nbytes = self._check(cls, nbytes)
        if self._current[cls] < nbytes:
            raise AccountingError(
                f"free of {nbytes} bytes underflows class {cls!r} at {self._current[cls]}"
            )
        if tag is not None:
            have = self._by_tag.get(tag, 0)
            if have < nbytes:
                raise AccountingError(f"free of {nbytes} bytes underflows tag {tag!r} at {have}")
            self._by_tag[tag] = have - nbytes
        self._current[cls] -= nbytes
        self.events.append(("free", cls, tag, nbytes))

    def current_bytes(self, cls=None):
        if cls is None:
            return sum(self._current.values())
        if cls not in LEDGER_CLASSES:
            raise ValidationError(f"unknown ledger class {cls!r}")
        return self._current[cls]

    def outstanding(self, tag):
        return self._by_tag.get(tag, 0)

    @property
    def peak_bytes(self):
        return self._peak

    @property
    def epoch_peak_bytes(self):
        return self._epoch_peak

    def epoch_start(self):
        """Reset the per-epoch peak window to the current residency."""
        self._epoch_peak = self._headline()

    def check_transients_clear(self, classes=("act",)):
        for cls in classes:
            if self._current[cls] != 0:
                raise AccountingError(
                    f"class {cls!r} still holds {self._current[cls]} bytes at a quiesce point"
                )


@dataclass
class EpochRecord:
    strategy: str
    epoch: int
    loss: float
    grad_norm: float
    throughput: float
    peak_mem_bytes: int
    wall_time_s: float
    per_rank_peak_bytes: list = field(default_factory=list)

    def csv_row(self):
        return (f"{self.strategy},{self.epoch},{self.loss!r},{self.grad_norm!r},"
                f"{self.throughput!r},{self.peak_mem_bytes},{self.wall_time_s!r}")


def read_records(path):
    """Parse a metrics CSV back into EpochRecords (per-rank detail is not
    round-tripped; the CSV carries the max)."""
    records = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(CSV_COLUMNS):
            raise ValidationError(f"unexpected CSV header {header}")
        for row in reader:
            if len(row) != len(CSV_COLUMNS):
                raise ValidationError(f"malformed CSV row {row}")
            records.append(EpochRecord(
                strategy=row[0], epoch=int(row[1]), loss=float(row[2]),
                grad_norm=float(row[3]), throughput=float(row[4]),
                peak_mem_bytes=int(row[5]), wall_time_s=float(row[6])))
    return records


def summarize_records(records):
    """Aggregate epoch rows into the comparison-table values.

    Memory is reported in bytes, time in seconds, throughput in tokens/s.
    """
    if not records:
        raise ValidationError("cannot summarize an empty record list")
    n = len(records)
    return {
        "Avg. Loss": sum(r.loss for r in records) / n,
        "Avg. Gradient Norm": sum(r.grad_norm for r in records) / n,
        "Total Training Time": sum(r.wall_time_s for r in records),
        "Avg. Memory": sum(r.peak_mem_bytes for r in records) / n,
        "Avg. Throughput": sum(r.throughput for r in records) / n,
    }
