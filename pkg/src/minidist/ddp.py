"""Distributed data parallel with bucketed gradient AllReduce.

Construction broadcasts rank 0's parameters so replicas start identical,
then assigns parameters to fixed-size buckets walking the parameter list in
reverse, since gradients near the output finish first during backward. Each
parameter's accumulator gets a post hook: when it fires, the gradient is
copied into the bucket's flat buffer, and once every view in a bucket is
filled the bucket is ready. Ready buckets launch AllReduce strictly in
ascending bucket index; a later bucket that happens to finish early waits
for its turn. When the last bucket has launched, the hook blocks until all
handles drain. step() averages the bucket contents by world size, scatters
them back to the parameter gradient slots, and runs the optimizer, leaving
every replica bit-identical.

Collectives here are synchronous rendezvous, so "launch" completes the
reduction eagerly and the returned handle is already done; the launch-order
and drain contracts are what matter and are what the tests pin down.
"""

from __future__ import annotations

import numpy as np

from .errors import InvariantError, StateError, ValidationError
from .metrics import grad_l2_norm
from .model import unused_parameters
from .strategy import Strategy, batch_loss
from .tensor import Tape


def allocate_buckets(sizes, cap):
    """Greedy allocation over reversed parameter order.

    A new bucket starts when the next parameter would push the current one
    past cap elements; a parameter larger than cap gets a dedicated bucket.
    Returns a list of buckets, each a list of parameter indices in the order
    they were assigned.
    """
    if cap < 1:
        raise ValidationError(f"bucket cap must be >= 1, got {cap}")
    buckets = []
    current = []
    current_size = 0
    for idx in range(len(sizes) - 1, -1, -1):
        size = sizes[idx]
        if size < 1:
            raise ValidationError(f"parameter {idx} has non-positive size {size}")
        if size > cap:
            if current:
                buckets.append(current)
                current, current_size = [], 0
            buckets.append([idx])
            continue
        if current and current_size + size > cap:
            buckets.append(current)
            current, current_size = [], 0
        current.append(idx)
        current_size += size
    if current:
        buckets.append(current)
    return buckets


class Bucket:
    """Flat gradient buffer with per-parameter views."""

    __slots__ = ("index", "buffer", "views", "offset_of", "ready", "launched")

    def __init__(self, index, param_indices, sizes):
        self.index = index
        self.views = []
        self.offset_of = {}
        offset = 0
        for pidx in param_indices:
            self.views.append((pidx, offset, sizes[pidx]))
            self.offset_of[pidx] = (offset, sizes[pidx])
            offset += sizes[pidx]
        self.buffer = np.zeros(offset)
        self.ready = set()
        self.launched = False

    @property
    def is_ready(self):
        return len(self.ready) == len(self.views)

    def reset(self):
        self.ready.clear()
        self.launched = False


class _Handle:
    """Completion token for a launched AllReduce. The rendezvous collective
    finishes eagerly, so this only tracks that the drain happened."""

    __slots__ = ("bucket_index", "done")

    def __init__(self, bucket_index):
        self.bucket_index = bucket_index
        self.done = True

    def wait(self):
        if not self.done:  # cannot happen with eager collectives; guard anyway
            raise StateError(f"bucket {self.bucket_index} reduction incomplete")


class DdpReplica(Strategy):
    name = "ddp"

    def __init__(self, config, params, group, rank, bucket_cap, optimizer,
                 accumulation=1, ledger=None, clock=None, cost_model=None,
                 rng=None, loss_fn=None):
        if accumulation != 1:
            raise ValidationError(
                "ddp synchronizes gradients on every backward; accumulation must be 1"
            )
        self.config = config
        self.params = params
        self.group = group
        self.rank = rank
        self.optimizer = optimizer
        self.ledger = ledger
        self.clock = clock
        self.cost_model = cost_model
        self.rng = rng
        self.loss_fn = loss_fn

        params.load_flat(group.broadcast(rank, params.to_flat(), root=0))

        sizes = params.sizes()
        self.bucket_plan = allocate_buckets(sizes, bucket_cap)
        self.buckets = [Bucket(i, idxs, sizes) for i, idxs in enumerate(self.bucket_plan)]
        self._bucket_of = {}
        for b in self.buckets:
            for pidx, _, _ in b.views:
                self._bucket_of[pidx] = b
        if len(self._bucket_of) != len(params):
            raise InvariantError("bucket plan does not cover every parameter exactly once")

        for _, t in params:
            t.accumulator.post_hooks.append(self._autograd_hook)

        self._next_launch = 0
        self._handles = []
        self._synced = False
        self._in_backward = False
        self._step_launches = []
        self.launch_history = []
        self._grads_ledgered = False
        self._opt_bytes_ledgered = 0
        self._last_grad_norm = None
        if ledger is not None:
            ledger.alloc("param", params.total_bytes, tag="replica")
            bucket_bytes = sum(b.buffer.nbytes for b in self.buckets)
            ledger.alloc("grad", bucket_bytes, tag="ddp.buckets")

    # ---- backward-path hooks ---------------------------------------------

    def _autograd_hook(self, param_index):
        """Copy one parameter's gradient into its bucket view and launch any
        buckets whose turn has come."""
        if not self._in_backward:
            raise StateError("gradient hook fired outside forward_backward")
        bucket = self._bucket_of[param_index]
        if param_index in bucket.ready:
            raise InvariantError(
                f"parameter {param_index} reported ready twice in one backward"
            )
        grad = self.params.tensor(param_index).grad
        offset, size = bucket.offset_of[param_index]
        bucket.buffer[offset:offset + size] = grad.reshape(-1)
        bucket.ready.add(param_index)
        self._launch_ready_in_order()

    def _mark_unused_ready(self, param_index):
        bucket = self._bucket_of[param_index]
        if param_index in bucket.ready:
            raise InvariantError(f"parameter {param_index} already marked ready")
        offset, size = bucket.offset_of[param_index]
        bucket.buffer[offset:offset + size] = 0.0
        bucket.ready.add(param_index)

    def _launch_ready_in_order(self):
        while (self._next_launch < len(self.buckets)
               and self.buckets[self._next_launch].is_ready):
            bucket = self.buckets[self._next_launch]
            bucket.buffer[:] = self.group.all_reduce_sum(self.rank, bucket.buffer)
            bucket.launched = True
            self._handles.append(_Handle(bucket.index))
            self._step_launches.append(bucket.index)
            self._next_launch += 1
        if self._next_launch == len(self.buckets):
            for handle in self._handles:
                handle.wait()
            self._synced = True

    # ---- strategy interface ----------------------------------------------

    def forward_backward(self, sequences):
        if self._synced:
            raise StateError("gradients already synchronized; call step() first")
        self._step_launches = []
        self._in_backward = True
        try:
            with Tape() as tape:
                total, mean, count = batch_loss(self.config, self.params, sequences,
                                                self.rng, self.loss_fn)
                for name in unused_parameters(tape, self.params, root=mean):
                    self._mark_unused_ready(
                        self.params[name].accumulator.parameter_index)
                act = tape.activation_bytes
                if self.ledger is not None:
                    self.ledger.alloc("act", act, tag="activations")
                tape.backward(mean)
            # normally every bucket launched from the hooks; a bucket made of
            # only unused parameters can still be pending if no later hook ran
            self._launch_ready_in_order()
        finally:
            self._in_backward = False
        if self.ledger is not None:
            self.ledger.free("act", act, tag="activations")
            if not self._grads_ledgered:
                self.ledger.alloc("grad", self.params.total_bytes, tag="grad.accumulators")
                self._grads_ledgered = True
        if not self._synced:
            missing = [b.index for b in self.buckets if not b.launched]
            raise InvariantError(f"backward finished with unlaunched buckets {missing}")
        self.launch_history.append(list(self._step_launches))
        if self.clock is not None and self.cost_model is not None:
            self.clock.advance(self.cost_model.compute_seconds(
                count, self.params.total_parameter_count))
        return float(total.values), count

    def step(self, lr):
        if not self._synced:
            raise StateError("step() before gradient synchronization completed")
        world = self.group.world_size
        grads = [None] * len(self.params)
        for bucket in self.buckets:
            bucket.buffer /= world
            for pidx, offset, size in bucket.views:
                t = self.params.tensor(pidx)
                g = bucket.buffer[offset:offset + size].reshape(t.shape).copy()
                t.accumulator.accumulated = g
                grads[pidx] = g
        self._last_grad_norm = grad_l2_norm(grads)
        for i, (name, t) in enumerate(self.params):
            t.assign(self.optimizer.step_buffer(name, t.values, grads[i], lr))
        if self.ledger is not None:
            total = self.optimizer.state_bytes()
            if total > self._opt_bytes_ledgered:
                self.ledger.alloc("opt", total - self._opt_bytes_ledgered, tag="opt.state")
                self._opt_bytes_ledgered = total
        self.params.zero_grad()
        for bucket in self.buckets:
            bucket.reset()
        self._next_launch = 0
        self._handles = []
        self._synced = False

    def collect_metrics(self):
        if self._last_grad_norm is None:
            raise StateError("no step has been applied yet")
        return {"grad_norm": self._last_grad_norm}

    def full_parameters(self):
        return self.params
