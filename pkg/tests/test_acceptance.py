"""Acceptance gate: the nine headline guarantees of the package, each
verified end to end with its tolerance pinned, each reporting one verdict
line so a teed test log shows the checklist at a glance."""

import filecmp
import functools
import sys
import time

import numpy as np
import pytest

from minidist.collectives import WorkerGroup, run_on_ranks
from minidist.data import BatchPlan, TokenDataset, synthetic_token_stream
from minidist.ddp import DdpReplica, allocate_buckets
from minidist.finite_diff import finite_difference_grad, max_relative_error
from minidist.fsdp import FsdpWorker, plan_units
from minidist.harness import RunConfig, run_experiment
from minidist.metrics import grad_l2_norm, read_records, tokens_per_second
from minidist.model import (ModelConfig, checkpoint_bytes, count_parameters,
                            default_unit_plan, init_params, sequence_loss)
from minidist.optim import Adam, Sgd
from minidist.strategy import SingleWorker
from minidist.tensor import (Tape, Tensor, add, col_slice, concat_cols,
                             cross_entropy_next_token, dropout, embed_rows,
                             gelu, layer_norm, masked_softmax_rows, matmul,
                             mul, scale, softmax_rows, sum_all, transpose)

DESK = ModelConfig()  # d_model 64, 2 layers, vocab 512
MICRO = ModelConfig(d_model=8, n_heads=2, d_ff=16, n_layers=1,
                    vocab_size=64, max_seq_len=12)

GRAD_TOL = 1e-4
PARITY_TOL = 1e-9


_CAPMAN = None


@pytest.fixture(autouse=True)
def _remember_capture_manager(request):
    global _CAPMAN
    _CAPMAN = request.config.pluginmanager.getplugin("capturemanager")
    yield


def _emit(line):
    # fd-level capture swallows even sys.__stdout__; suspend it so the
    # verdict lands in the terminal (and any teed log)
    if _CAPMAN is not None:
        with _CAPMAN.global_and_fixture_disabled():
            print("\n" + line, flush=True)
    else:
        print("\n" + line, file=sys.__stdout__, flush=True)


def verdict(label):
    """Print one PASS/FAIL line per guarantee, past pytest's capture."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                _emit(f"FAIL {label}")
                raise
            _emit(f"PASS {label}")
        return wrapper

    return deco


def union_batches(rng, steps, batch, seq_len, vocab):
    return [[rng.integers(0, vocab, size=seq_len) for _ in range(batch)]
            for _ in range(steps)]


def micro_tokens(n=500, seed=1):
    return synthetic_token_stream(n, seed) % MICRO.vocab_size


# ---- 1/9 gradients --------------------------------------------------------

def _op_error(build, x0, floor=1e-8):
    """Analytic gradient of build(leaf) vs central differences at x0."""
    x0 = np.asarray(x0, dtype=np.float64)

    def value(a):
        return float(build(Tensor(a)).values)

    with Tape() as tape:
        leaf = Tensor(x0, requires_grad=True)
        tape.backward(build(leaf))
    numeric = finite_difference_grad(value, x0)
    return max_relative_error(leaf.grad, numeric, floor=floor)


def _generic_point(params, rng):
    # init-scale weights leave some gradients down in finite-difference
    # noise; redraw at O(1) magnitudes for a meaningful relative check
    for name, t in params:
        if t.ndim >= 2:
            t.assign(0.3 * rng.standard_normal(t.shape))
        elif name.endswith(".g"):
            t.assign(1.0 + 0.2 * rng.standard_normal(t.shape))
        else:
            t.assign(0.1 * rng.standard_normal(t.shape))


@verdict("1/9 gradients: every op and the full model within 1e-4 of "
         "central differences, under 60 s")
def test_gradients_against_central_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    x23 = rng.standard_normal((2, 3))
    x33 = rng.standard_normal((3, 3))
    c23 = rng.standard_normal((2, 3))
    c32 = rng.standard_normal((3, 2))
    bias = rng.standard_normal(3)
    gain = 1.0 + 0.2 * rng.standard_normal(3)
    tril = np.tril(np.ones((3, 3), dtype=bool))
    table = rng.standard_normal((4, 3))
    c43 = rng.standard_normal((4, 3))
    ids = np.array([1, 0, 3, 1])
    targets = np.array([2, 0, 1])

    def replayed_dropout(t):
        return sum_all(mul(dropout(t, 0.25, np.random.default_rng(50)), c23))

    ops = [
        ("add", lambda t: sum_all(mul(add(t, c23), c23)), x23),
        ("add bias", lambda t: sum_all(mul(add(Tensor(x23), t), c23)), bias),
        ("mul", lambda t: sum_all(mul(mul(t, c23), c23)), x23),
        ("scale", lambda t: sum_all(scale(t, 1.7)), x23),
        ("matmul lhs", lambda t: sum_all(mul(matmul(t, c32), c23[:, :2])), x23),
        ("matmul rhs", lambda t: sum_all(matmul(Tensor(x23), t)), c32),
        ("transpose", lambda t: sum_all(mul(transpose(t), c23.T)), x23),
        ("sum", sum_all, x23),
        ("softmax", lambda t: sum_all(mul(softmax_rows(t), c23)), x23),
        ("masked softmax", lambda t: sum_all(mul(masked_softmax_rows(t, tril), x33)), x33),
        ("layer_norm x", lambda t: sum_all(mul(layer_norm(t, Tensor(gain), Tensor(bias)), c23)), x23),
        ("layer_norm gain", lambda t: sum_all(mul(layer_norm(Tensor(x23), t, Tensor(bias)), c23)), gain),
        ("layer_norm bias", lambda t: sum_all(mul(layer_norm(Tensor(x23), Tensor(gain), t), c23)), bias),
        ("gelu", lambda t: sum_all(mul(gelu(t), c23)), x23),
        ("embed_rows", lambda t: sum_all(mul(embed_rows(t, ids), c43)), table),
        ("col_slice", lambda t: sum_all(mul(col_slice(t, 1, 3), c23[:, 1:3])), x23),
        ("concat_cols", lambda t: sum_all(mul(concat_cols([t, Tensor(x23)]), np.ones((2, 6)))), x23),
        ("dropout", replayed_dropout, x23),
        ("cross_entropy", lambda t: cross_entropy_next_token(t, targets)[0], x33),
    ]
    for name, build, x0 in ops:
        err = _op_error(build, x0)
        assert err <= GRAD_TOL, f"{name}: rel err {err:.3e}"

    # whole desk model: summed next-token loss on a short sequence
    params = init_params(DESK, seed=0)
    _generic_point(params, np.random.default_rng(7))
    seq = np.random.default_rng(8).integers(0, DESK.vocab_size, size=8)
    params.zero_grad()
    with Tape() as tape:
        loss, _ = sequence_loss(DESK, params, seq)
        tape.backward(loss)

    def loss_value():
        loss, _ = sequence_loss(DESK, params, seq)
        return float(loss.values)

    coord_rng = np.random.default_rng(9)
    for name, t in params:
        base = t.values.copy()
        coords = [int(c) for c in
                  coord_rng.choice(t.size, size=min(2, t.size), replace=False)]

        def f(a, t=t, base=base):
            t.assign(a)
            try:
                return loss_value()
            finally:
                t.assign(base)

        numeric = finite_difference_grad(f, base, coords=coords)
        for c in coords:
            a = t.grad.reshape(-1)[c]
            n = numeric.reshape(-1)[c]
            err = abs(a - n) / (abs(n) + GRAD_TOL)
            assert err <= GRAD_TOL, f"{name}[{c}]: rel err {err:.3e}"

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0, f"gradient checks took {elapsed:.1f}s"


# ---- 2/9 collectives ------------------------------------------------------

def _serial_sum(payloads):
    acc = payloads[0].copy()
    for p in payloads[1:]:
        acc += p
    return acc


@verdict("2/9 collectives: reductions bit-exact vs serial rank-order sum, "
         "gather-scatter composition identical, 1000 random schedules clean")
def test_collectives_bit_exact_and_deadlock_free():
    rng = np.random.default_rng(100)
    for world in (1, 2, 4):
        for trial in range(5):
            payloads = [rng.standard_normal(24) * 10.0 ** rng.integers(-3, 4)
                        for _ in range(world)]
            expected = _serial_sum(payloads)
            g = WorkerGroup(world)
            reduced = [None] * world
            composed = [None] * world

            def fn(rank):
                reduced[rank] = g.all_reduce_sum(rank, payloads[rank].copy())
                part = g.reduce_scatter_sum(rank, payloads[rank].copy())
                composed[rank] = g.all_gather(rank, part)

            run_on_ranks(g, fn)
            for rank in range(world):
                assert np.array_equal(reduced[rank], expected)
                assert np.array_equal(composed[rank], expected)

    completed = 0
    srng = np.random.default_rng(1234)
    for trial in range(1000):
        world = int(srng.choice([1, 2, 4]))
        schedule = []
        for _ in range(int(srng.integers(1, 4))):
            op = str(srng.choice(["broadcast", "all_reduce_sum", "all_gather",
                                  "reduce_scatter_sum", "barrier"]))
            schedule.append((op, int(srng.integers(1, 5)) * world))
        payloads = [[srng.standard_normal(size) for _, size in schedule]
                    for _ in range(world)]
        g = WorkerGroup(world, timeout_s=30.0)
        outs = [[None] * len(schedule) for _ in range(world)]

        def fn(rank):
            for i, (op, _) in enumerate(schedule):
                if op == "barrier":
                    g.barrier(rank)
                else:
                    outs[rank][i] = getattr(g, op)(rank, payloads[rank][i].copy())

        run_on_ranks(g, fn)  # a deadlock would trip the timeout and raise
        for i, (op, size) in enumerate(schedule):
            ranks = [payloads[r][i] for r in range(world)]
            if op == "all_reduce_sum":
                want = _serial_sum(ranks)
                assert all(np.array_equal(outs[r][i], want) for r in range(world))
            elif op == "broadcast":
                assert all(np.array_equal(outs[r][i], ranks[0]) for r in range(world))
        completed += 1
    assert completed == 1000


# ---- 3/9 bucket plans and launch order ------------------------------------

def _retrace(sizes, cap):
    """Hand-trace of the greedy rule: fill from the last parameter back,
    close a bucket on overflow, isolate anything larger than the cap."""
    out, cur, used = [], [], 0
    for idx in range(len(sizes) - 1, -1, -1):
        if sizes[idx] > cap:
            if cur:
                out.append(cur)
                cur, used = [], 0
            out.append([idx])
        elif cur and used + sizes[idx] > cap:
            out.append(cur)
            cur, used = [idx], sizes[idx]
        else:
            cur.append(idx)
            used += sizes[idx]
    if cur:
        out.append(cur)
    return out


@verdict("3/9 ddp buckets: 50 random plans match the hand-trace oracle and "
         "every step of a 3-epoch run launches buckets in ascending order")
def test_bucket_plans_and_launch_order():
    rng = np.random.default_rng(31)
    for trial in range(50):
        n = int(rng.integers(1, 30))
        cap = int(rng.integers(1, 50))
        sizes = [int(rng.integers(1, 2 * cap + 1)) for _ in range(n)]
        assert allocate_buckets(sizes, cap) == _retrace(sizes, cap), (sizes, cap)

    # default-size model, default cap, real epoch shuffling
    dataset = TokenDataset(synthetic_token_stream(64 * 32, 3), seq_len=64)
    plan = BatchPlan(global_batch=8, world_size=2, seed=3)
    cap = RunConfig(strategy="ddp").bucket_cap
    group = WorkerGroup(2)
    histories = [None, None]

    def fn(rank):
        rep = DdpReplica(DESK, init_params(DESK, seed=0), group, rank,
                         bucket_cap=cap, optimizer=Sgd())
        for epoch in range(3):
            for batch in plan.shard_batches(dataset, epoch, rank):
                rep.forward_backward(batch)
                rep.step(0.01)
        histories[rank] = (len(rep.buckets), rep.launch_history)

    run_on_ranks(group, fn)
    for n_buckets, history in histories:
        assert n_buckets >= 3
        assert len(history) == 3 * plan.n_batches(dataset)
        for launches in history:
            assert launches == list(range(n_buckets))


# ---- 4/9 strategy parity --------------------------------------------------

@verdict("4/9 parity: 20 default-size steps, ddp (world 2 and 4) and fsdp "
         "(accumulation 1 and 2) within 1e-9 of one worker, under 5 min")
def test_distributed_matches_single_worker():
    start = time.perf_counter()
    rng = np.random.default_rng(41)
    batches = union_batches(rng, steps=20, batch=8, seq_len=64,
                            vocab=DESK.vocab_size)
    lr = 0.01

    params = init_params(DESK, seed=0)
    worker = SingleWorker(DESK, params, Sgd())
    for batch in batches:
        worker.forward_backward(batch)
        worker.step(lr)
    reference = params.to_flat()

    def run_ddp(world):
        group = WorkerGroup(world)
        finals = [None] * world

        def fn(rank):
            rep = DdpReplica(DESK, init_params(DESK, seed=0), group, rank,
                             bucket_cap=32768, optimizer=Sgd())
            for batch in batches:
                rep.forward_backward(batch[rank::world])
                rep.step(lr)
            finals[rank] = rep.params.to_flat()

        run_on_ranks(group, fn)
        return finals

    def run_fsdp(world, k):
        group = WorkerGroup(world)
        finals = [None] * world

        def fn(rank):
            w = FsdpWorker(DESK, init_params(DESK, seed=0), group, rank, Sgd(),
                           accumulation=k)
            for batch in batches:
                mine = batch[rank::world]
                half = len(mine) // k
                for j in range(k):
                    w.forward_backward(mine[j * half:(j + 1) * half])
                w.step(lr)
            finals[rank] = w.full_parameters().to_flat()

        run_on_ranks(group, fn)
        return finals

    for world in (2, 4):
        for flat in run_ddp(world):
            diff = float(np.max(np.abs(flat - reference)))
            assert diff <= PARITY_TOL, f"ddp world {world}: {diff:.3e}"
        for k in (1, 2):
            for flat in run_fsdp(world, k):
                diff = float(np.max(np.abs(flat - reference)))
                assert diff <= PARITY_TOL, f"fsdp world {world} k={k}: {diff:.3e}"

    elapsed = time.perf_counter() - start
    assert elapsed < 300.0, f"parity runs took {elapsed:.1f}s"


# ---- 5/9 checkpoint and state consistency ---------------------------------

@verdict("5/9 state: ddp rank checkpoints byte-identical after every step, "
         "fsdp gathers consistent at every step, adam state exactly shard-sized")
def test_checkpoints_and_shard_state_consistent():
    rng = np.random.default_rng(51)
    batches = union_batches(rng, steps=5, batch=4, seq_len=10,
                            vocab=MICRO.vocab_size)

    group = WorkerGroup(2)
    ddp_blobs = [[], []]

    def ddp_fn(rank):
        rep = DdpReplica(MICRO, init_params(MICRO, seed=0), group, rank,
                         bucket_cap=200, optimizer=Sgd())
        for batch in batches:
            rep.forward_backward(batch[rank::2])
            rep.step(0.05)
            ddp_blobs[rank].append(checkpoint_bytes(rep.full_parameters()))

    run_on_ranks(group, ddp_fn)
    for step, (b0, b1) in enumerate(zip(*ddp_blobs)):
        assert b0 == b1, f"ddp replicas diverged at step {step}"

    group = WorkerGroup(2)
    fsdp_blobs = [[], []]
    state_report = [None, None]

    def fsdp_fn(rank):
        w = FsdpWorker(MICRO, init_params(MICRO, seed=0), group, rank, Adam())
        for batch in batches:
            w.forward_backward(batch[rank::2])
            w.step(0.05)
            fsdp_blobs[rank].append(checkpoint_bytes(w.full_parameters()))
        per_moment = sum(m.nbytes for _, (m, v) in w.optimizer_state_arrays())
        state_report[rank] = (per_moment, w.optimizer.state_bytes(), w.shard_bytes)

    run_on_ranks(group, fsdp_fn)
    for step, (b0, b1) in enumerate(zip(*fsdp_blobs)):
        assert b0 == b1, f"fsdp gathers diverged at step {step}"
    for per_moment, total, shard_bytes in state_report:
        assert per_moment == shard_bytes          # one moment per shard entry
        assert total == 2 * shard_bytes           # adam holds two moments


# ---- 6/9 memory accounting ------------------------------------------------

@verdict("6/9 memory: on a 4-layer default-width model at world 2, fsdp peak "
         "beats ddp and equals shard residency plus one full unit exactly")
def test_sharded_peak_memory_beats_replicated():
    model = ModelConfig(n_layers=4)
    assert count_parameters(model) == 207_744
    tokens = synthetic_token_stream(16 * 16, 5) % model.vocab_size

    def run(strategy):
        cfg = RunConfig(strategy=strategy, world_size=2, epochs=1,
                        global_batch=2, seq_len=16, model=model, tokens=tokens)
        return run_experiment(cfg).records[0].peak_mem_bytes

    pbytes = count_parameters(model) * 8
    ddp_peak = run("ddp")
    fsdp_peak = run("fsdp")
    assert ddp_peak == 3 * pbytes  # replica params + buckets + accumulators

    units = plan_units(init_params(model), default_unit_plan(model), 2)
    shard_residency = 2 * sum(u.shard_len for u in units) * 8  # params + grads
    largest_unit = max(u.padded_len for u in units) * 8
    assert fsdp_peak == shard_residency + largest_unit
    assert fsdp_peak < ddp_peak


# ---- 7/9 training makes progress ------------------------------------------

@verdict("7/9 training: every strategy starts within 2% of ln(vocab) on the "
         "synthetic corpus and epoch 5 beats epoch 1")
def test_every_strategy_learns_on_synthetic_corpus():
    for strategy, world in (("single", 1), ("ddp", 2), ("fsdp", 2)):
        result = run_experiment(RunConfig(strategy=strategy, world_size=world,
                                          epochs=5, synthetic_tokens=4160))
        label = f"{strategy} world {world}"
        assert result.initial_loss == pytest.approx(
            np.log(DESK.vocab_size), rel=0.02), label
        assert result.records[4].loss < result.records[0].loss, label


# ---- 8/9 reported metrics reconcile ---------------------------------------

@verdict("8/9 metrics: csv columns equal an independent recomputation from "
         "raw counters, and the gradient norm ignores how arrays are split")
def test_reported_metrics_match_recomputation(tmp_path):
    tokens = micro_tokens()
    config = RunConfig(strategy="single", epochs=3, global_batch=4, seq_len=10,
                       learning_rate=0.05, model=MICRO, tokens=tokens,
                       out_dir=str(tmp_path / "run"))
    result = run_experiment(config)
    rows = read_records(result.csv_path)

    # replay the schedule with a hand-rolled loop and a mirrored clock
    dataset = TokenDataset(tokens, config.seq_len)
    plan = BatchPlan(config.global_batch, 1, config.seed)
    params = init_params(MICRO, seed=config.seed)
    worker = SingleWorker(MICRO, params, Sgd())
    pcount = params.total_parameter_count
    t = 0.0
    for epoch in range(config.epochs):
        t_epoch = t
        loss_sum, token_sum, norm_sum, n_steps = 0.0, 0, 0.0, 0
        for batch in plan.shard_batches(dataset, epoch, 0):
            loss, count = worker.forward_backward(batch)
            t += config.cost.compute_seconds(count, pcount)
            worker.step(config.learning_rate)
            loss_sum += loss
            token_sum += count
            norm_sum += worker.collect_metrics()["grad_norm"]
            n_steps += 1
        wall = t - t_epoch
        row = rows[epoch]
        assert row.loss == loss_sum / token_sum
        assert row.grad_norm == norm_sum / n_steps
        assert row.wall_time_s == wall
        assert row.throughput == tokens_per_second(float(token_sum), wall)

    # ddp rows: token arithmetic and the throughput identity hold exactly
    ddp = run_experiment(RunConfig(strategy="ddp", world_size=2, epochs=2,
                                   global_batch=4, seq_len=10,
                                   learning_rate=0.05, model=MICRO,
                                   tokens=tokens))
    per_epoch_tokens = plan.n_batches(dataset) * config.global_batch * (config.seq_len - 1)
    for row in ddp.records:
        assert row.throughput == tokens_per_second(float(per_epoch_tokens),
                                                   row.wall_time_s)

    rng = np.random.default_rng(81)
    flat = rng.standard_normal(128)
    whole = grad_l2_norm([flat])
    for trial in range(30):
        cuts = np.sort(rng.choice(np.arange(1, 128), size=5, replace=False))
        assert grad_l2_norm(np.split(flat, cuts)) == pytest.approx(whole, rel=1e-12)


# ---- 9/9 determinism ------------------------------------------------------

@verdict("9/9 determinism: rerunning an identical config reproduces the "
         "metrics csv and the checkpoint byte for byte, for every strategy")
def test_identical_configs_reproduce_bytes(tmp_path):
    for strategy, world in (("single", 1), ("ddp", 2), ("fsdp", 2)):
        outs = []
        for attempt in ("a", "b"):
            out = tmp_path / f"{strategy}-{attempt}"
            run_experiment(RunConfig(strategy=strategy, world_size=world,
                                     epochs=2, global_batch=4, seq_len=10,
                                     learning_rate=0.05, model=MICRO,
                                     tokens=micro_tokens(),
                                     out_dir=str(out)))
            outs.append(out)
        a, b = outs
        assert filecmp.cmp(a / "metrics.csv", b / "metrics.csv", shallow=False), strategy
        assert filecmp.cmp(a / "model.ckpt", b / "model.ckpt", shallow=False), strategy
