"""Collective semantics: results against a serial oracle, composition
identities, and the failure modes (mismatch, reentrancy, timeout, abort)."""

import threading
import time

import numpy as np
import pytest

from minidist.collectives import WorkerGroup, run_on_ranks
from minidist.errors import ProtocolError, ValidationError
from minidist.model import ModelConfig, checkpoint_bytes, init_params
from minidist.timing import CostModel, VirtualClock


def serial_sum(payloads):
    """Oracle: ascending-rank accumulation, the documented reduction order."""
    acc = payloads[0].copy()
    for p in payloads[1:]:
        acc += p
    return acc


# ---- basic results --------------------------------------------------------

def test_world_one_ops_are_identity():
    g = WorkerGroup(1)
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(g.broadcast(0, x.copy()), x)
    assert np.array_equal(g.all_reduce_sum(0, x.copy()), x)
    assert np.array_equal(g.all_gather(0, x.copy()), x)
    assert np.array_equal(g.reduce_scatter_sum(0, x.copy()), x)
    g.barrier(0)


def test_broadcast_delivers_root_values():
    g = WorkerGroup(3)
    outs = [None] * 3

    def fn(rank):
        outs[rank] = g.broadcast(rank, np.array([1.0, 2.0, 3.0]) * (rank + 1))

    run_on_ranks(g, fn)
    for rank in range(3):
        assert outs[rank].tolist() == [1.0, 2.0, 3.0]


def test_broadcast_nonzero_root():
    g = WorkerGroup(2)
    outs = [None] * 2

    def fn(rank):
        outs[rank] = g.broadcast(rank, np.array([float(rank)]), root=1)

    run_on_ranks(g, fn)
    assert outs[0].tolist() == [1.0]
    assert outs[1].tolist() == [1.0]


def test_all_reduce_small_values():
    g = WorkerGroup(2)
    payloads = [np.array([1.0, 2.0]), np.array([3.0, 4.0])]
    outs = [None] * 2
    run_on_ranks(g, lambda r: outs.__setitem__(r, g.all_reduce_sum(r, payloads[r])))
    assert outs[0].tolist() == [4.0, 6.0]
    assert outs[1].tolist() == [4.0, 6.0]


def test_all_gather_concatenates_in_rank_order():
    g = WorkerGroup(2)
    payloads = [np.array([1.0, 2.0]), np.array([3.0, 4.0])]
    outs = [None] * 2
    run_on_ranks(g, lambda r: outs.__setitem__(r, g.all_gather(r, payloads[r])))
    assert outs[0].tolist() == [1.0, 2.0, 3.0, 4.0]
    assert outs[1].tolist() == [1.0, 2.0, 3.0, 4.0]


def test_reduce_scatter_leaves_rank_segments():
    g = WorkerGroup(2)
    payloads = [np.array([1.0, 2.0, 3.0, 4.0]), np.array([10.0, 20.0, 30.0, 40.0])]
    outs = [None] * 2
    run_on_ranks(g, lambda r: outs.__setitem__(r, g.reduce_scatter_sum(r, payloads[r])))
    assert outs[0].tolist() == [11.0, 22.0]
    assert outs[1].tolist() == [33.0, 44.0]


# ---- bit-exactness against the serial oracle ------------------------------

@pytest.mark.parametrize("world", [1, 2, 4])
def test_all_reduce_bit_exact_vs_serial_sum(world):
    rng = np.random.default_rng(100 + world)
    for trial in range(10):
        payloads = [rng.standard_normal(37) * 10.0 ** rng.integers(-3, 4)
                    for _ in range(world)]
        expected = serial_sum(payloads)
        g = WorkerGroup(world)
        outs = [None] * world
        run_on_ranks(g, lambda r: outs.__setitem__(
            r, g.all_reduce_sum(r, payloads[r].copy())))
        for out in outs:
            assert np.array_equal(out, expected), "sum differs from serial oracle"


@pytest.mark.parametrize("world", [1, 2, 4])
def test_gather_scatter_composition_equals_all_reduce(world):
    rng = np.random.default_rng(200 + world)
    payloads = [rng.standard_normal(12 * world) for _ in range(world)]
    expected = serial_sum(payloads)
    g = WorkerGroup(world)
    outs = [None] * world

    def fn(rank):
        part = g.reduce_scatter_sum(rank, payloads[rank].copy())
        outs[rank] = g.all_gather(rank, part)

    run_on_ranks(g, fn)
    for out in outs:
        assert np.array_equal(out, expected)


def test_results_independent_of_arrival_order():
    # stagger rank entries; the reduction must not depend on thread timing
    rng = np.random.default_rng(7)
    payloads = [rng.standard_normal(16) for _ in range(4)]
    expected = serial_sum(payloads)
    for trial in range(5):
        g = WorkerGroup(4)
        delays = rng.random(4) * 0.01
        outs = [None] * 4

        def fn(rank):
            time.sleep(delays[rank])
            outs[rank] = g.all_reduce_sum(rank, payloads[rank].copy())

        run_on_ranks(g, fn)
        for out in outs:
            assert np.array_equal(out, expected)


def test_parameter_broadcast_makes_checkpoints_identical():
    config = ModelConfig(d_model=8, n_heads=2, d_ff=16, n_layers=1,
                         vocab_size=11, max_seq_len=6)
    g = WorkerGroup(2)
    blobs = [None] * 2

    def fn(rank):
        params = init_params(config, seed=rank)  # deliberately different
        params.load_flat(g.broadcast(rank, params.to_flat(), root=0))
        blobs[rank] = checkpoint_bytes(params)

    run_on_ranks(g, fn)
    assert blobs[0] == blobs[1]
    assert blobs[0] == checkpoint_bytes(init_params(config, seed=0))


# ---- telemetry ------------------------------------------------------------

def test_payload_byte_accounting():
    g = WorkerGroup(2)

    def fn(rank):
        g.broadcast(rank, np.zeros(10))
        g.all_reduce_sum(rank, np.zeros(10))
        g.all_gather(rank, np.zeros(10))
        g.reduce_scatter_sum(rank, np.zeros(10))
        g.barrier(rank)

    run_on_ranks(g, fn)
    for rank in range(2):
        recs = g.records(rank)
        assert [r.op for r in recs] == ["broadcast", "all_reduce_sum", "all_gather",
                                        "reduce_scatter_sum", "barrier"]
        assert [r.payload_bytes for r in recs] == [80, 160, 160, 80, 0]
        assert [r.seq for r in recs] == [0, 1, 2, 3, 4]


def test_virtual_clock_sync_to_slowest_entry_plus_cost():
    cost = CostModel(collective_latency_s=1.0, seconds_per_byte=0.0)
    g = WorkerGroup(2, cost_model=cost)
    clocks = [VirtualClock(), VirtualClock()]
    done = [None, None]

    def fn(rank):
        g.attach_clock(rank, clocks[rank])
        clocks[rank].advance(float(rank) * 5.0)  # rank1 enters at t=5
        g.all_reduce_sum(rank, np.array([1.0]))
        done[rank] = clocks[rank].now()

    run_on_ranks(g, fn)
    assert done[0] == done[1] == 6.0  # max entry 5 + latency 1


def test_untimed_calls_do_not_advance_clocks():
    cost = CostModel(collective_latency_s=1.0, seconds_per_byte=0.0)
    g = WorkerGroup(2, cost_model=cost)
    clocks = [VirtualClock(), VirtualClock()]

    def fn(rank):
        g.attach_clock(rank, clocks[rank])
        g.all_reduce_sum(rank, np.array([1.0]), timed=False)
        return clocks[rank].now()

    times = run_on_ranks(g, fn)
    assert times == [0.0, 0.0]


# ---- failure modes --------------------------------------------------------

def test_op_mismatch_poisons_call_on_all_ranks():
    g = WorkerGroup(2)
    errors = [None] * 2

    def fn(rank):
        try:
            if rank == 0:
                g.all_reduce_sum(rank, np.zeros(4))
            else:
                g.all_gather(rank, np.zeros(4))
        except ProtocolError as e:
            errors[rank] = e
            raise

    with pytest.raises(RuntimeError, match="rank 0"):
        run_on_ranks(g, fn)
    assert errors[0] is not None and errors[1] is not None
    assert "mismatch" in str(errors[0])


def test_size_mismatch_poisons_call():
    g = WorkerGroup(2)

    def fn(rank):
        g.all_reduce_sum(rank, np.zeros(4 if rank == 0 else 5))

    with pytest.raises(RuntimeError, match="mismatch"):
        run_on_ranks(g, fn)


def test_root_mismatch_poisons_broadcast():
    g = WorkerGroup(2)

    def fn(rank):
        g.broadcast(rank, np.zeros(3), root=rank)

    with pytest.raises(RuntimeError, match="mismatch"):
        run_on_ranks(g, fn)


def test_same_rank_reentrancy_detected():
    g = WorkerGroup(2, timeout_s=10.0)
    caught = []
    collided = threading.Event()

    def imposter():
        # wait until the legitimate rank-0 call is actually inside
        deadline = time.monotonic() + 5.0
        while not g._in_call[0] and time.monotonic() < deadline:
            time.sleep(0.001)
        try:
            g.all_reduce_sum(0, np.zeros(3))
        except ProtocolError as e:
            caught.append(e)
        collided.set()

    t = threading.Thread(target=imposter)
    t.start()

    def fn(rank):
        if rank == 1:
            collided.wait(5)  # hold back so the real call stays pending
        g.all_reduce_sum(rank, np.zeros(3))

    # the legitimate call must still complete once rank 1 arrives
    run_on_ranks(g, fn)
    t.join()
    assert len(caught) == 1
    assert "two threads" in str(caught[0])


def test_timeout_names_missing_ranks():
    g = WorkerGroup(3, timeout_s=0.2)
    with pytest.raises(ProtocolError, match=r"\[1, 2\]"):
        g.all_reduce_sum(0, np.zeros(2))


def test_abort_poisons_pending_and_future_calls():
    g = WorkerGroup(2, timeout_s=30.0)
    released = []

    def waiter():
        try:
            g.all_reduce_sum(0, np.zeros(2))
        except ProtocolError as e:
            released.append(e)

    t = threading.Thread(target=waiter)
    t.start()
    import time
    time.sleep(0.05)
    g.abort()
    t.join(timeout=5)
    assert not t.is_alive()
    assert len(released) == 1
    with pytest.raises(ProtocolError):
        g.barrier(1)
    assert g.aborted


def test_worker_exception_aborts_group():
    g = WorkerGroup(2, timeout_s=30.0)

    def fn(rank):
        if rank == 1:
            raise ValueError("boom on rank 1")
        g.all_reduce_sum(rank, np.zeros(2))  # would hang without the abort

    with pytest.raises(RuntimeError, match="rank 0|rank 1"):
        run_on_ranks(g, fn)


def test_payload_validation():
    g = WorkerGroup(1)
    with pytest.raises(ValidationError):
        g.all_reduce_sum(0, np.zeros((2, 2)))           # not 1-d
    with pytest.raises(ValidationError):
        g.all_reduce_sum(0, np.array([1, 2]))           # not float64
    with pytest.raises(ValidationError):
        g.all_reduce_sum(0, np.array([], dtype=float))  # empty
    with pytest.raises(ValidationError):
        g.all_reduce_sum(2, np.zeros(2))                # rank out of range
    g2 = WorkerGroup(2)
    with pytest.raises(ValidationError):
        g2.reduce_scatter_sum(0, np.zeros(3))           # not divisible


# ---- randomized schedules -------------------------------------------------

def test_randomized_schedules_complete_and_match_oracle():
    rng = np.random.default_rng(42)
    for trial in range(60):
        world = int(rng.choice([1, 2, 4]))
        n_calls = int(rng.integers(1, 7))
        schedule = []
        for _ in range(n_calls):
            op = str(rng.choice(["broadcast", "all_reduce_sum", "all_gather",
                                 "reduce_scatter_sum", "barrier"]))
            size = int(rng.integers(1, 9)) * world
            schedule.append((op, size))
        payloads = [[rng.standard_normal(size) for _, size in schedule]
                    for _ in range(world)]

        expected = []
        for i, (op, size) in enumerate(schedule):
            ranks = [payloads[r][i] for r in range(world)]
            if op == "broadcast":
                expected.append([ranks[0]] * world)
            elif op == "all_reduce_sum":
                expected.append([serial_sum(ranks)] * world)
            elif op == "all_gather":
                expected.append([np.concatenate(ranks)] * world)
            elif op == "reduce_scatter_sum":
                s = serial_sum(ranks)
                shard = size // world
                expected.append([s[r * shard:(r + 1) * shard] for r in range(world)])
            else:
                expected.append([None] * world)

        g = WorkerGroup(world, timeout_s=20.0)
        outs = [[None] * n_calls for _ in range(world)]

        def fn(rank):
            for i, (op, size) in enumerate(schedule):
                arg = payloads[rank][i].copy()
                if op == "barrier":
                    g.barrier(rank)
                else:
                    outs[rank][i] = getattr(g, op)(rank, arg)

        run_on_ranks(g, fn)
        for rank in range(world):
            for i, (op, _) in enumerate(schedule):
                if op == "barrier":
                    continue
                assert np.array_equal(outs[rank][i], expected[i][rank]), \
                    f"trial {trial} call {i} ({op}) wrong on rank {rank}"
