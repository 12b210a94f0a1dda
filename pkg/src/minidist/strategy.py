"""Training-strategy interface and the single-worker baseline.

A strategy owns its parameters and the step lifecycle:

    for each step:
        forward_backward(micro_batch)   x accumulation
        step(lr)

forward_backward returns (loss sum, target-token count) for the micro-batch;
step applies the optimizer to gradients averaged over everything accumulated
since the last step. collect_metrics reports the global post-average gradient
norm of the step just applied. full_parameters returns a complete parameter
set for checkpointing (a collective for sharded strategies, so every rank
must call it together).
"""

from __future__ import annotations

import numpy as np

from .errors import StateError, ValidationError
from .metrics import grad_l2_norm
from .model import sequence_loss
from .tensor import Tape, scale


class Strategy:
    name = "base"

    def forward_backward(self, sequences):
        raise NotImplementedError

    def step(self, lr):
        raise NotImplementedError

    def collect_metrics(self):
        raise NotImplementedError

    def full_parameters(self):
        raise NotImplementedError


def batch_loss(config, params, sequences, rng=None, loss_fn=None):
    """Graph for one micro-batch: (loss sum tensor, mean loss tensor, count)."""
    loss_fn = loss_fn or sequence_loss
    total = None
    count = 0
    for seq in sequences:
        loss, n = loss_fn(config, params, seq, rng)
        total = loss if total is None else total + loss
        count += n
    if total is None:
        raise ValidationError("micro-batch must contain at least one sequence")
    return total, scale(total, 1.0 / count), count


class SingleWorker(Strategy):
    """One replica, no communication; the equivalence oracle for the others.

    Supports gradient accumulation: accumulators sum per-micro-batch mean-loss
    gradients, and step divides by the number of micro-batches, which equals
    one step on the concatenated batch when token counts match.
    """

    name = "single"

    def __init__(self, config, params, optimizer, accumulation=1, ledger=None,
                 clock=None, cost_model=None, rng=None, loss_fn=None):
        if accumulation < 1:
            raise ValidationError(f"accumulation must be >= 1, got {accumulation}")
        self.config = config
        self.params = params
        self.optimizer = optimizer
        self.accumulation = accumulation
        self.ledger = ledger
        self.clock = clock
        self.cost_model = cost_model
        self.rng = rng
        self.loss_fn = loss_fn
        self._micro_count = 0
        self._grads_ledgered = False
        self._opt_bytes_ledgered = 0
        self._last_grad_norm = None
        if ledger is not None:
            ledger.alloc("param", params.total_bytes, tag="replica")

    def forward_backward(self, sequences):
        if self._micro_count >= self.accumulation:
            raise StateError("accumulation cycle complete; call step() first")
        with Tape() as tape:
            total, mean, count = batch_loss(self.config, self.params, sequences,
                                            self.rng, self.loss_fn)
            act = tape.activation_bytes
            if self.ledger is not None:
                self.ledger.alloc("act", act, tag="activations")
            tape.backward(mean)
        if self.ledger is not None:
            self.ledger.free("act", act, tag="activations")
            if not self._grads_ledgered:
                self.ledger.alloc("grad", self.params.total_bytes, tag="grad.accumulators")
                self._grads_ledgered = True
        if self.clock is not None and self.cost_model is not None:
            self.clock.advance(self.cost_model.compute_seconds(
                count, self.params.total_parameter_count))
        self._micro_count += 1
        return float(total.values), count

    def step(self, lr):
        if self._micro_count == 0:
            raise StateError("step() before any forward_backward")
        inv = 1.0 / self._micro_count
        grads = []
        for name, t in self.params:
            g = t.grad
            grads.append(np.zeros(t.shape) if g is None else g * inv)
        self._last_grad_norm = grad_l2_norm(grads)
        for (name, t), g in zip(self.params, grads):
            t.assign(self.optimizer.step_buffer(name, t.values, g, lr))
        self._ledger_opt_state()
        self.params.zero_grad()
        self._micro_count = 0

    def _ledger_opt_state(self):
        if self.ledger is None:
            return
        total = self.optimizer.state_bytes()
        if total > self._opt_bytes_ledgered:
            self.ledger.alloc("opt", total - self._opt_bytes_ledgered, tag="opt.state")
            self._opt_bytes_ledgered = total

    def collect_metrics(self):
        if self._last_grad_norm is None:
            raise StateError("no step has been applied yet")
        return {"grad_norm": self._last_grad_norm}

    def full_parameters(self):
        return self.params
