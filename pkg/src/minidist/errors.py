"""Exception taxonomy shared across the package.

ValueError subclasses cover bad user input (shapes, configs, malformed data)
so they compose with sklearn-style validation; RuntimeError subclasses cover
broken internal protocol or state.
"""


class ValidationError(ValueError):
    """Invalid argument or configuration value."""


class ShapeMismatchError(ValidationError):
    """Operands have incompatible shapes; message names both."""


class IngestionError(ValidationError):
    """Corpus bytes could not be decoded or parsed."""


class StateError(RuntimeError):
    """An operation was called outside its legal lifecycle window."""


class ProtocolError(RuntimeError):
    """Ranks disagreed about a collective call, or one never showed up."""


class AccountingError(RuntimeError):
    """Memory ledger bookkeeping went negative or unbalanced."""


class InvariantError(RuntimeError):
    """Internal invariant violated; indicates a bug, fail fast."""
