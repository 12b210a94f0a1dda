"""Miniature GPT-2: token/position embeddings, pre-norm causal attention
blocks with a GELU MLP, final layer norm, and a vocab projection.

The forward pass is split into stages (embed, one per block, head) so the
sharded strategy can gather one unit's parameters at a time; plain callers
use model_forward which chains the stages. All stage functions accept any
name->Tensor mapping, so they work with a full ParameterSet or with views
into a gathered flat buffer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import StateError, ValidationError
from .tensor import (
    Tensor,
    add,
    col_slice,
    concat_cols,
    cross_entropy_next_token,
    dropout,
    embed_rows,
    gelu,
    layer_norm,
    masked_softmax_rows,
    matmul,
    scale,
    transpose,
)

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_layers: int = 2
    vocab_size: int = 512
    max_seq_len: int = 128
    dropout_rate: float = 0.0

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_ff", "n_layers", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValidationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @classmethod
    def tiny(cls, **overrides):
        """Default desk-size configuration; small enough for exact testing."""
        return cls(**overrides)

    @classmethod
    def gpt2_small(cls):
        """The 124M GPT-2 release shape; provided for scale reference."""
        return cls(d_model=768, n_heads=12, d_ff=3072, n_layers=12,
                   vocab_size=50257, max_seq_len=1024)


class ParameterSet:
    """Ordered named parameters; order defines parameter_index and the flat
    layout used by broadcast, sharding, and checkpoints."""

    def __init__(self, named_tensors):
        self._names = []
        self._tensors = []
        seen = set()
        for name, t in named_tensors:
            if name in seen:
                raise ValidationError(f"duplicate parameter name {name!r}")
            if not isinstance(t, Tensor) or t.accumulator is None:
                raise ValidationError(f"parameter {name!r} must be a requires_grad Tensor")
            seen.add(name)
            t.accumulator.parameter_index = len(self._tensors)
            self._names.append(name)
            self._tensors.append(t)

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(zip(self._names, self._tensors))

    def __getitem__(self, name):
        try:
            return self._tensors[self._names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def __contains__(self, name):
        return name in self._names

    def names(self):
        return list(self._names)

    def tensor(self, index):
        return self._tensors[index]

    def name(self, index):
        return self._names[index]

    def sizes(self):
        return [t.size for t in self._tensors]

    @property
    def total_parameter_count(self):
        return sum(t.size for t in self._tensors)

    @property
    def total_bytes(self):
        return self.total_parameter_count * 8

    def zero_grad(self):
        for t in self._tensors:
            t.zero_grad()

    def state_arrays(self):
        return [(n, t.values) for n, t in self]

    def to_flat(self):
        return np.concatenate([t.values.reshape(-1) for t in self._tensors])

    def load_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.total_parameter_count:
            raise ValidationError(
                f"flat buffer has {flat.size} values, expected {self.total_parameter_count}"
            )
        off = 0
        for t in self._tensors:
            t.assign(flat[off:off + t.size].reshape(t.shape))
            off += t.size


def parameter_names(config):
    """Canonical parameter order: embeddings, blocks, final norm, head."""
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        p = f"h{i}."
        names += [p + "ln1.g", p + "ln1.b",
                  p + "attn.wq", p + "attn.bq", p + "attn.wk", p + "attn.bk",
                  p + "attn.wv", p + "attn.bv", p + "attn.wo", p + "attn.bo",
                  p + "ln2.g", p + "ln2.b",
                  p + "mlp.w1", p + "mlp.b1", p + "mlp.w2", p + "mlp.b2"]
    names += ["ln_f.g", "ln_f.b", "head.w"]
    return names


def parameter_shape(config, name):
    d, f, v, s = config.d_model, config.d_ff, config.vocab_size, config.max_seq_len
    if name == "tok_emb":
        return (v, d)
    if name == "pos_emb":
        return (s, d)
    if name == "head.w":
        return (d, v)
    # strip a block prefix like "h3." but keep "ln_f.g" whole
    prefix, dot, rest = name.partition(".")
    leaf = rest if (dot and prefix[:1] == "h" and prefix[1:].isdigit()) else name
    return {
        "ln1.g": (d,), "ln1.b": (d,), "ln2.g": (d,), "ln2.b": (d,),
        "ln_f.g": (d,), "ln_f.b": (d,),
        "attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d), "attn.wo": (d, d),
        "attn.bq": (d,), "attn.bk": (d,), "attn.bv": (d,), "attn.bo": (d,),
        "mlp.w1": (d, f), "mlp.b1": (f,), "mlp.w2": (f, d), "mlp.b2": (d,),
    }[leaf]


def init_params(config, seed=0):
    """Weights ~ N(0, 0.02^2), biases 0, norm gains 1; one rng stream in
    canonical parameter order, so a seed pins every value."""
    rng = np.random.default_rng(seed)
    named = []
    for name in parameter_names(config):
        shape = parameter_shape(config, name)
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            values = np.ones(shape)
        elif leaf.startswith("b"):
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, INIT_STD, size=shape)
        named.append((name, Tensor(values, requires_grad=True)))
    return ParameterSet(named)


def default_unit_plan(config):
    """Parameter grouping used by the sharded strategy: embeddings, each
    block, then final norm + head."""
    units = [("embed", ["tok_emb", "pos_emb"])]
    for i in range(config.n_layers):
        block = [n for n in parameter_names(config) if n.startswith(f"h{i}.")]
        units.append((f"block{i}", block))
    units.append(("head", ["ln_f.g", "ln_f.b", "head.w"]))
    return units


def causal_mask(t):
    """Lower-triangular validity mask: position i may attend to j <= i."""
    return np.tril(np.ones((t, t), dtype=bool))


@dataclass
class AttentionInputs:
    q: Tensor
    k: Tensor
    v: Tensor
    d_k: int
    mask: np.ndarray = field(repr=False, default=None)


def causal_attention(inputs):
    """Scaled dot-product attention over the causal prefix.

    Output row t is a convex combination of value rows at positions <= t.
    """
    mask = inputs.mask if inputs.mask is not None else causal_mask(inputs.q.shape[0])
    scores = scale(matmul(inputs.q, transpose(inputs.k)), 1.0 / np.sqrt(inputs.d_k))
    probs = masked_softmax_rows(scores, mask)
    return matmul(probs, inputs.v)


def _validate_tokens(config, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or not np.issubdtype(tokens.dtype, np.integer):
        raise ValidationError("token ids must be a 1-d integer array")
    if tokens.size < 1:
        raise ValidationError("need at least one token")
    if tokens.size > config.max_seq_len:
        raise ValidationError(
            f"sequence length {tokens.size} exceeds max_seq_len {config.max_seq_len}"
        )
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValidationError(f"token id out of range for vocab_size {config.vocab_size}")
    return tokens


def embed_stage(config, params, tokens, rng=None):
    tokens = _validate_tokens(config, tokens)
    x = add(embed_rows(params["tok_emb"], tokens),
            embed_rows(params["pos_emb"], np.arange(tokens.size)))
    if config.dropout_rate > 0.0 and rng is not None:
        x = dropout(x, config.dropout_rate, rng)
    return x


def block_stage(config, params, layer, x, rng=None):
    p = f"h{layer}."
    dh = config.d_head
    mask = causal_mask(x.shape[0])

    h = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], LN_EPS)
    q = add(matmul(h, params[p + "attn.wq"]), params[p + "attn.bq"])
    k = add(matmul(h, params[p + "attn.wk"]), params[p + "attn.bk"])
    v = add(matmul(h, params[p + "attn.wv"]), params[p + "attn.bv"])
    heads = []
    for j in range(config.n_heads):
        lo, hi = j * dh, (j + 1) * dh
        heads.append(causal_attention(AttentionInputs(
            q=col_slice(q, lo, hi), k=col_slice(k, lo, hi), v=col_slice(v, lo, hi),
            d_k=dh, mask=mask)))
    attn = add(matmul(concat_cols(heads), params[p + "attn.wo"]), params[p + "attn.bo"])
    if config.dropout_rate > 0.0 and rng is not None:
        attn = dropout(attn, config.dropout_rate, rng)
    x = add(x, attn)

    h2 = layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], LN_EPS)
    mlp = add(matmul(gelu(add(matmul(h2, params[p + "mlp.w1"]), params[p + "mlp.b1"])),
                     params[p + "mlp.w2"]), params[p + "mlp.b2"])
    if config.dropout_rate > 0.0 and rng is not None:
        mlp = dropout(mlp, config.dropout_rate, rng)
    return add(x, mlp)


def head_stage(config, params, x):
    return matmul(layer_norm(x, params["ln_f.g"], params["ln_f.b"], LN_EPS),
                  params["head.w"])


def model_forward(config, params, tokens, rng=None):
    """Logits [len(tokens) x vocab_size] for next-token prediction."""
    x = embed_stage(config, params, tokens, rng)
    for i in range(config.n_layers):
        x = block_stage(config, params, i, x, rng)
    return head_stage(config, params, x)


def sequence_loss(config, params, seq, rng=None):
    """Summed next-token loss over one sequence: inputs seq[:-1], targets
    seq[1:]. Returns (loss-sum tensor, target count)."""
    seq = np.asarray(seq)
    if seq.ndim != 1 or seq.size < 2:
        raise ValidationError("sequence must be 1-d with at least two tokens")
    logits = model_forward(config, params, seq[:-1], rng)
    return cross_entropy_next_token(logits, seq[1:])


def count_parameters(config):
    return sum(int(np.prod(parameter_shape(config, n))) for n in parameter_names(config))


def unused_parameters(tape, params, root=None):
    """Names of parameters with no path to root on the recorded tape.

    Granularity is the whole tensor. root defaults to the last recorded node
    (the forward output when called right after a forward pass).
    """
    if tape.node_count == 0:
        return set(n for n, _ in params)
    root_id = tape.leaf_id(root) if root is not None else tape.node_count - 1
    if root_id is None:
        raise StateError("root tensor was not recorded on this tape")
    reachable = set()
    stack = [root_id]
    while stack:
        nid = stack.pop()
        if nid in reachable:
            continue
        reachable.add(nid)
        for i in tape.node_inputs(nid):
            if i is not None:
                stack.append(i)
    unused = set()
    for name, t in params:
        leaf = tape.leaf_id(t)
        if leaf is None or leaf not in reachable:
            unused.add(name)
    return unused


# checkpoint format, little endian throughout:
#   magic  8 bytes  b"MDCHKPT1"
#   count  u32      number of records
# then per record:
#   name_len u16, name utf-8 bytes
#   ndim     u8,  ndim x u32 extents
#   data     product(extents) x f64
CHECKPOINT_MAGIC = b"MDCHKPT1"


def checkpoint_bytes(params):
    arrays = params.state_arrays() if isinstance(params, ParameterSet) else list(params)
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(arrays))]
    for name, values in arrays:
        encoded = name.encode("utf-8")
        values = np.asarray(values, dtype=np.float64)
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", values.ndim))
        out.append(struct.pack(f"<{values.ndim}I", *values.shape))
        out.append(values.astype("<f8").tobytes())
    return b"".join(out)


def save_checkpoint(path, params):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params))


def load_checkpoint_bytes(blob):
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValidationError("not a checkpoint: bad magic")
    (count,) = struct.unpack_from("<I", blob, 8)
    off = 12
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        records.append((name, values.astype(np.float64)))
    if off != len(blob):
        raise ValidationError(f"checkpoint has {len(blob) - off} trailing bytes")
    return records


def load_checkpoint(path):
    with open(path, "rb") as f:
        return load_checkpoint_bytes(f.read())


def load_params_from_checkpoint(params, records):
    by_name = dict(records)
    if set(by_name) != set(params.names()):
        raise ValidationError("checkpoint parameter names do not match the model")
    for name, t in params:
        values = by_name[name]
        if values.shape != t.shape:
            raise ValidationError(
                f"checkpoint shape {values.shape} for {name!r} does not match {t.shape}"
            )
        t.assign(values)
