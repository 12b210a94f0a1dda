"""Deterministic in-process collectives over worker threads.

One WorkerGroup serves W ranks running in threads of the same process.
Every collective is a synchronous rendezvous: a call completes only when all
W ranks have entered the matching call, identified by a per-rank sequence
number that must line up across ranks. The first arrival fixes the op kind
and payload signature; a later rank that disagrees poisons the call so every
participant raises instead of hanging, and a rank that never shows up trips
a timeout that names the missing ranks.

Reductions are computed once per call in ascending rank order, so results
are bitwise identical on every rank and across runs. Payload byte accounting
is logical, not algorithmic: broadcast moves len, all_reduce moves 2*len
(reduce then redistribute), all_gather and reduce_scatter move world*shard.
Each rank keeps its own CollectiveCallRecord log.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, ValidationError


@dataclass
class CollectiveCallRecord:
    op: str
    seq: int
    payload_bytes: int
    seconds: float
    timed: bool


class _PendingCall:
    __slots__ = ("sig", "first_rank", "contributions", "entry_times", "result",
                 "done", "error", "departed", "completion_time", "cost_seconds")

    def __init__(self, sig, first_rank):
        self.sig = sig
        self.first_rank = first_rank
        self.contributions = {}
        self.entry_times = {}
        self.result = None
        self.done = False
        self.error = None
        self.departed = 0
        self.completion_time = None
        self.cost_seconds = 0.0


def _check_payload(op, values):
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.dtype != np.float64:
        raise ValidationError(f"{op} payload must be a 1-d float64 array")
    if arr.size == 0:
        raise ValidationError(f"{op} payload must not be empty")
    return arr


class WorkerGroup:
    """Rendezvous point and telemetry log for W in-process ranks."""

    def __init__(self, world_size, cost_model=None, timeout_s=60.0):
        if world_size < 1:
            raise ValidationError(f"world_size must be >= 1, got {world_size}")
        self.world_size = world_size
        self.cost_model = cost_model
        self.timeout_s = timeout_s
        self._cv = threading.Condition()
        self._calls = {}
        self._next_seq = [0] * world_size
        self._in_call = [False] * world_size
        self._clocks = [None] * world_size
        self._records = [[] for _ in range(world_size)]
        self._abort_error = None

    def _check_rank(self, rank):
        if not 0 <= rank < self.world_size:
            raise ValidationError(f"rank {rank} out of range for world_size {self.world_size}")

    def attach_clock(self, rank, clock):
        self._check_rank(rank)
        self._clocks[rank] = clock

    def records(self, rank):
        self._check_rank(rank)
        return list(self._records[rank])

    def abort(self, error=None):
        """Poison every pending and future call; blocked ranks raise."""
        with self._cv:
            if self._abort_error is None:
                self._abort_error = error or ProtocolError("worker group aborted")
            self._cv.notify_all()

    @property
    def aborted(self):
        return self._abort_error is not None

    # ---- collectives ------------------------------------------------------

    def barrier(self, rank, timed=True):
        self._rendezvous(rank, "barrier", None, (), 0, timed)

    def broadcast(self, rank, values, root=0, timed=True):
        """Every rank passes a same-length buffer; all return root's values."""
        self._check_rank(root)
        arr = _check_payload("broadcast", values)
        return self._rendezvous(rank, "broadcast", arr, (arr.size, root), arr.size * 8, timed)

    def all_reduce_sum(self, rank, values, timed=True):
        arr = _check_payload("all_reduce_sum", values)
        return self._rendezvous(rank, "all_reduce_sum", arr, (arr.size,), 2 * arr.size * 8, timed)

    def all_gather(self, rank, shard, timed=True):
        arr = _check_payload("all_gather", shard)
        return self._rendezvous(rank, "all_gather", arr, (arr.size,),
                                self.world_size * arr.size * 8, timed)

    def reduce_scatter_sum(self, rank, values, timed=True):
        arr = _check_payload("reduce_scatter_sum", values)
        if arr.size % self.world_size != 0:
            raise ValidationError(
                f"reduce_scatter_sum length {arr.size} not divisible by world_size {self.world_size}"
            )
        return self._rendezvous(rank, "reduce_scatter_sum", arr, (arr.size,), arr.size * 8, timed)

    # ---- rendezvous machinery --------------------------------------------

    def _compute_result(self, op, call):
        ordered = [call.contributions[r] for r in range(self.world_size)]
        if op == "barrier":
            return None
        if op == "broadcast":
            root = call.sig[2]
            return call.contributions[root]
        if op == "all_gather":
            return np.concatenate(ordered)
        # fixed ascending-rank summation: bitwise reproducible
        acc = ordered[0].copy()
        for contrib in ordered[1:]:
            acc += contrib
        return acc

    def _rendezvous(self, rank, op, arr, shape_sig, payload_bytes, timed):
        self._check_rank(rank)
        sig = (op,) + shape_sig
        clock = self._clocks[rank]
        wall_start = time.perf_counter()
        with self._cv:
            if self._abort_error is not None:
                raise ProtocolError(f"rank {rank}: group aborted") from self._abort_error
            if self._in_call[rank]:
                raise ProtocolError(
                    f"rank {rank} entered a collective from two threads at once"
                )
            self._in_call[rank] = True
            try:
                seq = self._next_seq[rank]
                self._next_seq[rank] += 1
                call = self._calls.get(seq)
                if call is None:
                    call = _PendingCall(sig, rank)
                    self._calls[seq] = call
                if call.error is None and call.sig != sig:
                    call.error = ProtocolError(
                        f"collective mismatch at seq {seq}: rank {call.first_rank} "
                        f"called {call.sig}, rank {rank} called {sig}"
                    )
                    self._cv.notify_all()
                if call.error is None:
                    call.contributions[rank] = arr
                    if clock is not None:
                        call.entry_times[rank] = clock.now()
                    if len(call.contributions) == self.world_size:
                        call.result = self._compute_result(op, call)
                        if self.cost_model is not None:
                            call.cost_seconds = self.cost_model.collective_seconds(payload_bytes)
                        if len(call.entry_times) == self.world_size:
                            call.completion_time = max(call.entry_times.values()) + call.cost_seconds
                        call.done = True
                        self._cv.notify_all()
                deadline = time.monotonic() + self.timeout_s
                while not call.done and call.error is None and self._abort_error is None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0 or not self._cv.wait(timeout=remaining):
                        missing = sorted(set(range(self.world_size)) - set(call.contributions))
                        call.error = ProtocolError(
                            f"collective {op} seq {seq} timed out waiting for ranks {missing}"
                        )
                        self._cv.notify_all()
                        break
                call.departed += 1
                if call.departed == self.world_size:
                    self._calls.pop(seq, None)
                # a poisoned call names the actual disagreement; prefer it over
                # the generic abort that another rank's failure may have caused
                if call.error is not None:
                    raise call.error
                if self._abort_error is not None and not call.done:
                    raise ProtocolError(f"rank {rank}: group aborted") from self._abort_error
                if op == "reduce_scatter_sum":
                    shard = arr.size // self.world_size
                    out = call.result[rank * shard:(rank + 1) * shard].copy()
                elif op == "barrier":
                    out = None
                else:
                    out = call.result.copy()
                if timed and clock is not None and call.completion_time is not None:
                    clock.sync_to(call.completion_time)
                seconds = call.cost_seconds if (self.cost_model is not None and
                                                clock is not None and clock.virtual) \
                    else time.perf_counter() - wall_start
                self._records[rank].append(
                    CollectiveCallRecord(op, seq, payload_bytes, seconds, timed))
                return out
            finally:
                self._in_call[rank] = False


def run_on_ranks(group, fn):
    """Run fn(rank) on one thread per rank; abort the group if any thread
    raises so the rest cannot hang, then re-raise the lowest rank's error."""
    world = group.world_size
    results = [None] * world
    errors = [None] * world

    def body(rank):
        try:
            results[rank] = fn(rank)
        except BaseException as e:  # noqa: BLE001 - propagated after join
            errors[rank] = e
            group.abort(e)

    threads = [threading.Thread(target=body, args=(r,), name=f"rank-{r}") for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for rank, err in enumerate(errors):
        if err is not None:
            raise RuntimeError(f"rank {rank} failed: {err}") from err
    return results
