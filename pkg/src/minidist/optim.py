"""Optimizers operating on plain float64 buffers.

Updates are functional (new array in, caller swaps it), which lets the same
code drive full parameter tensors and FSDP shard slices. State is created
per buffer key on first use; its byte footprint is exposed so strategies can
ledger it.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


class Sgd:
    """Plain gradient descent, no momentum; the equivalence oracle baseline."""

    name = "sgd"
    state_bytes_per_value = 0

    def __init__(self):
        self._states = {}

    def step_buffer(self, key, values, grads, lr):
        return values - lr * grads

    def state_bytes(self):
        return 0


class Adam:
    """Adam with bias correction; stateful, so excluded from the exact
    cross-strategy equivalence checks."""

    name = "adam"
    state_bytes_per_value = 16  # two float64 moments

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValidationError("adam betas must be in [0, 1)")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._states = {}

    def step_buffer(self, key, values, grads, lr):
        state = self._states.get(key)
        if state is None:
            state = {"m": np.zeros_like(values), "v": np.zeros_like(values), "t": 0}
            self._states[key] = state
        state["t"] += 1
        state["m"] = self.beta1 * state["m"] + (1.0 - self.beta1) * grads
        state["v"] = self.beta2 * state["v"] + (1.0 - self.beta2) * grads * grads
        m_hat = state["m"] / (1.0 - self.beta1 ** state["t"])
        v_hat = state["v"] / (1.0 - self.beta2 ** state["t"])
        return values - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_bytes(self):
        return sum(s["m"].nbytes + s["v"].nbytes for s in self._states.values())

    def state_arrays(self, key):
        state = self._states.get(key)
        return None if state is None else (state["m"], state["v"])


def make_optimizer(name):
    if name == "sgd":
        return Sgd()
    if name == "adam":
        return Adam()
    raise ValidationError(f"unknown optimizer {name!r} (expected 'sgd' or 'adam')")
