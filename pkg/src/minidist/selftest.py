"""Built-in sanity suite behind `minidist selftest`.

Three groups: gradient checks against central differences, collective
results against a serial reduction, and cross-strategy parity on a small
model. Prints one line per check; returns 0 only if every check passes.
"""

from __future__ import annotations

import numpy as np

from .collectives import WorkerGroup, run_on_ranks
from .data import synthetic_token_stream
from .finite_diff import finite_difference_grad, max_relative_error
from .harness import RunConfig, run_experiment
from .model import ModelConfig, init_params, sequence_loss
from .tensor import Tape

GRAD_TOL = 1e-4
PARITY_TOL = 1e-9


def _check(name, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f"  ({detail})" if detail else ""))
    return bool(ok)


def check_gradients():
    config = ModelConfig.tiny(d_model=8, n_heads=2, d_ff=16, n_layers=1,
                              vocab_size=17, max_seq_len=12)
    params = init_params(config, seed=3)
    rng = np.random.default_rng(11)
    seq = rng.integers(0, config.vocab_size, size=9)

    ok = True
    for name in ("tok_emb", "h0.attn.wq", "h0.mlp.w1", "ln_f.g", "head.w"):
        tensor = params[name]

        def loss_at(flat, tensor=tensor):
            saved = tensor.values.copy()
            tensor.assign(flat.reshape(tensor.values.shape))
            try:
                loss, _ = sequence_loss(config, params, seq)
                return float(loss.values)
            finally:
                tensor.assign(saved)

        with Tape() as tape:
            loss, _ = sequence_loss(config, params, seq)
            tape.backward(loss)
        analytic = tensor.grad.ravel()
        coords = rng.choice(tensor.values.size, size=min(20, tensor.values.size),
                            replace=False)
        numeric = finite_difference_grad(loss_at, tensor.values.ravel().copy(),
                                         coords=coords)
        err = max_relative_error(analytic[coords], numeric[coords])
        ok &= _check(f"gradient {name}", err <= GRAD_TOL, f"max rel err {err:.2e}")
        params.zero_grad()
    return ok


def check_collectives():
    ok = True
    for world in (2, 4):
        rng = np.random.default_rng(world)
        payloads = [rng.standard_normal(24) for _ in range(world)]
        expected = payloads[0].copy()
        for p in payloads[1:]:
            expected = expected + p
        group = WorkerGroup(world)
        got = [None] * world

        def fn(rank):
            got[rank] = group.all_reduce_sum(rank, payloads[rank].copy())

        run_on_ranks(group, fn)
        exact = all(np.array_equal(g, expected) for g in got)
        ok &= _check(f"all_reduce_sum W={world} matches serial sum exactly", exact)

        group2 = WorkerGroup(world)
        composed = [None] * world

        def fn2(rank):
            part = group2.reduce_scatter_sum(rank, payloads[rank].copy())
            composed[rank] = group2.all_gather(rank, part)

        run_on_ranks(group2, fn2)
        exact2 = all(np.array_equal(g, expected) for g in composed)
        ok &= _check(f"all_gather(reduce_scatter) W={world} equals all_reduce", exact2)
    return ok


def check_parity(quick=False):
    model = ModelConfig.tiny(n_layers=1, vocab_size=64, max_seq_len=16)
    tokens = synthetic_token_stream(800, seed=5) % 64
    base = dict(epochs=2, global_batch=4, seq_len=9, learning_rate=0.05,
                model=model, tokens=tokens, seed=7)
    single = run_experiment(RunConfig(strategy="single", world_size=1, **base))
    ref = single.final_params

    ok = True
    worlds = (2,) if quick else (2, 4)
    for world in worlds:
        for strategy in ("ddp", "fsdp"):
            res = run_experiment(RunConfig(strategy=strategy, world_size=world, **base))
            diff = max(
                np.max(np.abs(ref[name].values - res.final_params[name].values))
                for name in ref.names()
            )
            ok &= _check(f"{strategy} W={world} matches single worker",
                         diff <= PARITY_TOL, f"max param diff {diff:.2e}")
    return ok


def run_selftest(quick=False):
    groups = [
        ("gradients", check_gradients),
        ("collectives", check_collectives),
        ("parity", lambda: check_parity(quick=quick)),
    ]
    all_ok = True
    for name, fn in groups:
        print(f"-- {name}")
        all_ok &= fn()
    print("selftest:", "OK" if all_ok else "FAILED")
    return 0 if all_ok else 2
