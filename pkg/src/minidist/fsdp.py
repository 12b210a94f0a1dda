"""Fully sharded data parallel over flattened parameter units.

Parameters are grouped into units (embeddings, each transformer block, the
head), flattened in canonical order, zero-padded to a multiple of the world
size, and split into equal rank shards; each rank keeps only its shard of
parameters, gradients, and optimizer state. A forward pass walks the units
in order: all-gather the unit's full flat buffer, run that stage for every
sequence in the micro-batch, then free the full buffer (reshard after
forward). During backward each unit completes in reverse order; when the
last of its parameters receives a gradient, the unit re-gathers its
parameters for the backward window, flattens and pads the full gradient,
reduce-scatters it, and adds the resulting shard into the local gradient
shard. With accumulation k, the optimizer runs every k micro-batches on
shard gradients divided by world * k. Padding stays zero through every
gather, scatter, and update.

The memory ledger records the residency this models: persistent shard bytes
for parameters, gradients, and optimizer state, plus one transient
full-unit window at a time, so the per-rank peak is the shard total plus the
largest unit.
"""

from __future__ import annotations

import numpy as np

from .errors import InvariantError, StateError, ValidationError
from .model import embed_stage, block_stage, head_stage
from .strategy import Strategy
from .tensor import Tape, Tensor, cross_entropy_next_token, scale


class FsdpUnit:
    """Static plan for one unit: member layout inside the padded flat buffer."""

    __slots__ = ("index", "name", "members", "true_len", "padded_len", "shard_len")

    def __init__(self, index, name, members, world_size):
        self.index = index
        self.name = name
        self.members = []  # (param name, shape, size, offset)
        offset = 0
        for pname, shape in members:
            size = int(np.prod(shape))
            self.members.append((pname, tuple(shape), size, offset))
            offset += size
        self.true_len = offset
        self.padded_len = -(-offset // world_size) * world_size
        self.shard_len = self.padded_len // world_size

    def shard_valid_len(self, rank):
        """Entries of this rank's shard that map below true_len (the rest is
        padding owned by the tail ranks)."""
        lo = rank * self.shard_len
        return int(np.clip(self.true_len - lo, 0, self.shard_len))


def plan_units(params, unit_plan, world_size):
    """Turn (name, [param names]) groups into FsdpUnits; the groups must
    partition the parameter set exactly, in order."""
    covered = []
    units = []
    for index, (uname, member_names) in enumerate(unit_plan):
        if not member_names:
            raise ValidationError(f"unit {uname!r} has no parameters")
        members = []
        for pname in member_names:
            if pname not in params:
                raise ValidationError(f"unit {uname!r} names unknown parameter {pname!r}")
            members.append((pname, params[pname].shape))
        covered.extend(member_names)
        units.append(FsdpUnit(index, uname, members, world_size))
    if covered != params.names():
        raise ValidationError("unit plan must cover parameters exactly once, in order")
    return units


class _UnitRuntime:
    __slots__ = ("spec", "shard", "grad_shard", "tensors", "full_open",
                 "hooks_done", "comm_done")

    def __init__(self, spec):
        self.spec = spec
        self.shard = None
        self.grad_shard = None
        self.tensors = None
        self.full_open = False
        self.hooks_done = 0
        self.comm_done = False


def gpt_stages(config, rng=None):
    """Stage callables matching default_unit_plan: embed, blocks, head.

    The first stage receives the raw sequence and drops the last token (its
    target has no successor); the head stage emits next-token logits.
    """
    stages = [lambda p, seq: embed_stage(config, p, np.asarray(seq)[:-1], rng)]
    for i in range(config.n_layers):
        stages.append(lambda p, x, i=i: block_stage(config, p, i, x, rng))
    stages.append(lambda p, x: head_stage(config, p, x))
    return stages


def gpt_final_loss(logits, seq):
    return cross_entropy_next_token(logits, np.asarray(seq)[1:])


class FsdpWorker(Strategy):
    name = "fsdp"

    def __init__(self, config, params, group, rank, optimizer, accumulation=1,
                 unit_plan=None, stages=None, final_loss=None, ledger=None,
                 clock=None, cost_model=None, rng=None):
        if accumulation < 1:
            raise ValidationError(f"accumulation must be >= 1, got {accumulation}")
        self.config = config
        self.group = group
        self.rank = rank
        self.optimizer = optimizer
        self.accumulation = accumulation
        self.ledger = ledger
        self.clock = clock
        self.cost_model = cost_model
        self.rng = rng

        if unit_plan is None:
            from .model import default_unit_plan
            unit_plan = default_unit_plan(config)
        self.stages = stages if stages is not None else gpt_stages(config, rng)
        self.final_loss = final_loss or gpt_final_loss
        specs = plan_units(params, unit_plan, group.world_size)
        if len(self.stages) != len(specs):
            raise ValidationError(
                f"{len(specs)} units need {len(specs)} stages, got {len(self.stages)}"
            )
        self.param_names = params.names()
        self.param_count = sum(s.true_len for s in specs)

        # start from rank 0's values, then keep only this rank's shards
        params.load_flat(group.broadcast(rank, params.to_flat(), root=0))
        self.units = []
        for spec in specs:
            runtime = _UnitRuntime(spec)
            flat = np.zeros(spec.padded_len)
            for pname, _, size, offset in spec.members:
                flat[offset:offset + size] = params[pname].values.reshape(-1)
            lo = rank * spec.shard_len
            runtime.shard = flat[lo:lo + spec.shard_len].copy()
            self.units.append(runtime)

        self.shard_bytes = sum(u.spec.shard_len * 8 for u in self.units)
        self.max_unit_bytes = max(u.spec.padded_len * 8 for u in self.units)
        if ledger is not None:
            ledger.alloc("param", self.shard_bytes, tag="fsdp.param_shards")

        self._micro_count = 0
        self._opt_bytes_ledgered = 0
        self._last_grad_norm = None

    # ---- unit lifecycle --------------------------------------------------

    def _materialize(self, unit):
        if unit.full_open:
            raise StateError(f"unit {unit.spec.name!r} is already materialized")
        full = self.group.all_gather(self.rank, unit.shard)
        if self.ledger is not None:
            self.ledger.alloc("param", unit.spec.padded_len * 8, tag="fsdp.full_unit")
        full.setflags(write=False)
        tensors = {}
        for pname, shape, size, offset in unit.spec.members:
            t = Tensor._wrap(full[offset:offset + size].reshape(shape), requires_grad=True)
            t.accumulator.post_hooks.append(lambda _idx, u=unit: self._unit_hook(u))
            tensors[pname] = t
        unit.tensors = tensors
        unit.full_open = True
        unit.hooks_done = 0
        unit.comm_done = False

    def _free_full(self, unit):
        # the tape keeps the values it saved for backward; the ledger models
        # the communication buffer being released
        if self.ledger is not None:
            self.ledger.free("param", unit.spec.padded_len * 8, tag="fsdp.full_unit")
        unit.full_open = False

    def _unit_hook(self, unit):
        unit.hooks_done += 1
        if unit.hooks_done > len(unit.spec.members):
            raise InvariantError(f"unit {unit.spec.name!r} over-counted gradient hooks")
        if unit.hooks_done == len(unit.spec.members):
            self._unit_comm(unit)

    def _unit_comm(self, unit):
        """Backward-side communication for one completed unit: re-gather the
        parameter window, then reduce-scatter the padded full gradient."""
        if unit.comm_done:
            raise InvariantError(f"unit {unit.spec.name!r} already reduced this micro-batch")
        spec = unit.spec
        regathered = self.group.all_gather(self.rank, unit.shard)
        if self.ledger is not None:
            self.ledger.alloc("param", spec.padded_len * 8, tag="fsdp.regather")
            self.ledger.free("param", spec.padded_len * 8, tag="fsdp.regather")
        del regathered

        flat = np.zeros(spec.padded_len)
        for pname, _, size, offset in spec.members:
            g = unit.tensors[pname].grad
            if g is not None:
                flat[offset:offset + size] = g.reshape(-1)
        if self.ledger is not None:
            self.ledger.alloc("grad", spec.padded_len * 8, tag="fsdp.full_grad")
        mine = self.group.reduce_scatter_sum(self.rank, flat)
        if unit.grad_shard is None:
            unit.grad_shard = np.zeros(spec.shard_len)
            if self.ledger is not None:
                self.ledger.alloc("grad", spec.shard_len * 8, tag="fsdp.grad_shards")
        unit.grad_shard += mine
        if self.ledger is not None:
            self.ledger.free("grad", spec.padded_len * 8, tag="fsdp.full_grad")
        unit.tensors = None
        unit.comm_done = True

    def _finish_backward(self):
        # units whose parameters saw no gradient still owe a collective; all
        # ranks share the graph, so the pattern and order match everywhere
        for unit in reversed(self.units):
            if not unit.comm_done:
                self._unit_comm(unit)

    # ---- strategy interface ----------------------------------------------

    def forward_backward(self, sequences):
        if self._micro_count >= self.accumulation:
            raise StateError("accumulation cycle complete; call step() first")
        sequences = list(sequences)
        with Tape() as tape:
            carries = sequences
            for runtime, stage in zip(self.units, self.stages):
                self._materialize(runtime)
                tensors = runtime.tensors
                carries = [stage(tensors, c) for c in carries]
                self._free_full(runtime)
            total = None
            count = 0
            for out, seq in zip(carries, sequences):
                loss, n = self.final_loss(out, seq)
                total = loss if total is None else total + loss
                count += n
            if total is None:
                raise ValidationError("micro-batch must contain at least one sequence")
            mean = scale(total, 1.0 / count)
            act = tape.activation_bytes
            if self.ledger is not None:
                self.ledger.alloc("act", act, tag="activations")
            tape.backward(mean)
            self._finish_backward()
        if self.ledger is not None:
            self.ledger.free("act", act, tag="activations")
        if self.clock is not None and self.cost_model is not None:
            self.clock.advance(self.cost_model.compute_seconds(count, self.param_count))
        self._micro_count += 1
        return float(total.values), count

    def step(self, lr):
        if self._micro_count == 0 or self._micro_count % self.accumulation != 0:
            raise StateError(
                f"step() requires {self.accumulation} accumulated micro-batches, "
                f"have {self._micro_count}"
            )
        denom = float(self.group.world_size * self._micro_count)
        averaged = []
        local_sq = 0.0
        for unit in self.units:
            avg = unit.grad_shard / denom
            averaged.append(avg)
            local_sq += float((avg * avg).sum())
        total_sq = self.group.all_reduce_sum(
            self.rank, np.array([local_sq]), timed=False)
        self._last_grad_norm = float(np.sqrt(total_sq[0]))
        for unit, avg in zip(self.units, averaged):
            new_shard = self.optimizer.step_buffer(unit.spec.name, unit.shard, avg, lr)
            valid = unit.spec.shard_valid_len(self.rank)
            if np.any(new_shard[valid:] != 0.0):
                raise InvariantError(
                    f"unit {unit.spec.name!r} padding drifted from zero after update"
                )
            unit.shard = new_shard
            unit.grad_shard[:] = 0.0
        if self.ledger is not None:
            total = self.optimizer.state_bytes()
            if total > self._opt_bytes_ledgered:
                self.ledger.alloc("opt", total - self._opt_bytes_ledgered, tag="opt.state")
                self._opt_bytes_ledgered = total
        self._micro_count = 0

    def collect_metrics(self):
        if self._last_grad_norm is None:
            raise StateError("no step has been applied yet")
        return {"grad_norm": self._last_grad_norm}

    def full_parameters(self):
        """Gather every unit and rebuild a full ParameterSet; collective, so
        all ranks must call it together."""
        from .model import ParameterSet
        named = []
        for unit in self.units:
            full = self.group.all_gather(self.rank, unit.shard, timed=False)
            for pname, shape, size, offset in unit.spec.members:
                named.append((pname, Tensor(full[offset:offset + size].reshape(shape),
                                            requires_grad=True)))
        return ParameterSet(named)

    def optimizer_state_arrays(self):
        """(unit name, moment arrays) for locality checks; empty for SGD."""
        out = []
        for unit in self.units:
            arrays = getattr(self.optimizer, "state_arrays", lambda k: None)(unit.spec.name)
            if arrays is not None:
                out.append((unit.spec.name, arrays))
        return out
