"""Estimator-style wrapper around the training harness.

Gpt2Trainer follows the scikit-learn conventions that make sense for a
language model trainer: constructor stores hyperparameters untouched,
fit(X) trains and sets trailing-underscore attributes, get_params/set_params
work with clone and grid search. There is no predict/transform; scoring is
negative per-token loss so that higher is better.
"""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import (
    ByteTokenizer,
    TokenDataset,
    clean_text,
    encode_documents,
    synthetic_token_stream,
)
from .errors import ValidationError
from .harness import RunConfig, evaluate_loss, run_experiment
from .model import ModelConfig


def _as_token_ids(X, vocab_size):
    """Accept None (synthetic data), an iterable of strings, or a 1-D
    integer id array; return ids or None."""
    if X is None:
        return None
    if isinstance(X, str):
        X = [X]
    if isinstance(X, (list, tuple)) and X and all(isinstance(d, str) for d in X):
        return encode_documents([clean_text(d) for d in X], ByteTokenizer())
    ids = np.asarray(X)
    if ids.ndim != 1:
        raise ValidationError(f"X must be 1-D token ids or a list of strings, "
                              f"got array with shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValidationError(f"token ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValidationError(f"token ids must lie in [0, {vocab_size}), "
                              f"found range [{ids.min()}, {ids.max()}]")
    return ids.astype(np.int64)


class Gpt2Trainer(BaseEstimator):
    """Train a small GPT-2 style model with a chosen data-parallel strategy.

    Parameters mirror RunConfig; X for fit may be None (synthetic corpus), a
    list of document strings (byte-tokenized), or a 1-D array of token ids.
    """

    def __init__(self, strategy="single", world_size=1, epochs=3,
                 global_batch=8, seq_len=64, learning_rate=0.01,
                 optimizer="sgd", bucket_cap=32768, accumulation=1,
                 seed=0, synthetic_tokens=20_000, d_model=64, n_heads=4,
                 d_ff=128, n_layers=2, vocab_size=512, max_seq_len=128,
                 timing="simulated"):
        self.strategy = strategy
        self.world_size = world_size
        self.epochs = epochs
        self.global_batch = global_batch
        self.seq_len = seq_len
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.bucket_cap = bucket_cap
        self.accumulation = accumulation
        self.seed = seed
        self.synthetic_tokens = synthetic_tokens
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_layers = n_layers
        self.vocab_size = vocab_size
        self.max_seq_len = max_seq_len
        self.timing = timing

    def _run_config(self, tokens):
        for name in ("epochs", "world_size", "global_batch", "seq_len"):
            value = getattr(self, name)
            if not isinstance(value, numbers.Integral):
                raise ValidationError(f"{name} must be an integer, got {value!r}")
        model = ModelConfig(d_model=self.d_model, n_heads=self.n_heads,
                            d_ff=self.d_ff, n_layers=self.n_layers,
                            vocab_size=self.vocab_size,
                            max_seq_len=self.max_seq_len)
        return RunConfig(
            strategy=self.strategy, world_size=self.world_size,
            epochs=self.epochs, global_batch=self.global_batch,
            seq_len=self.seq_len, learning_rate=self.learning_rate,
            optimizer=self.optimizer, bucket_cap=self.bucket_cap,
            accumulation=self.accumulation, seed=self.seed,
            synthetic_tokens=self.synthetic_tokens, timing=self.timing,
            model=model, tokens=tokens,
        ).validate()

    def fit(self, X=None, y=None):
        tokens = _as_token_ids(X, self.vocab_size)
        config = self._run_config(tokens)
        result = run_experiment(config)
        self.params_ = result.final_params
        self.model_config_ = config.model
        self.history_ = result.records
        self.initial_loss_ = result.initial_loss
        self.final_loss_ = result.final_loss
        self.n_parameters_ = result.final_params.total_parameter_count
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "this Gpt2Trainer instance is not fitted yet; call fit first")

    def score(self, X=None, y=None):
        """Negative mean per-token loss on X (or on the training source when
        X is None), so higher is better."""
        self._check_fitted()
        tokens = _as_token_ids(X, self.vocab_size)
        if tokens is None:
            tokens = synthetic_token_stream(self.synthetic_tokens, self.seed)
            tokens = tokens[tokens < self.vocab_size]
        dataset = TokenDataset(tokens, self.seq_len)
        return -evaluate_loss(self.model_config_, self.params_, dataset)

    def loss_curve(self):
        self._check_fitted()
        return [record.loss for record in self.history_]
