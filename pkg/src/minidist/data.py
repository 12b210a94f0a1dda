"""Corpus ingestion, cleaning, tokenization, batching, and the seeded
synthetic corpus.

Cleaning strips markup tags and control characters, collapses whitespace,
and lowercases; it is idempotent. The default tokenizer is byte level
(every UTF-8 byte maps to one id after the specials), so round trips are
exact and no fitted vocabulary is needed. A word tokenizer is available when
a fitted vocabulary is preferred. Batching permutes sequences per epoch from
a seeded rng and deals each global batch to ranks in strides, so every rank
derives the same plan without communicating.
"""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from .errors import IngestionError, ValidationError

PAD_ID = 0
UNK_ID = 1
EOT_ID = 2
N_SPECIALS = 3
BYTE_VOCAB_SIZE = N_SPECIALS + 256

_TAG_RE = re.compile(r"<[^<>]*>")
_WS_RE = re.compile(r"\s+")
_CTRL = {c: " " for c in range(32)} | {127: " "}


def clean_text(raw):
    """Strip markup tags, drop control characters, collapse whitespace,
    lowercase. Running it twice changes nothing."""
    if not isinstance(raw, str):
        raise ValidationError(f"clean_text expects str, got {type(raw).__name__}")
    text = _TAG_RE.sub(" ", raw)
    text = text.translate(_CTRL)
    text = _WS_RE.sub(" ", text).strip()
    return text.lower()


class ByteTokenizer:
    """UTF-8 bytes shifted past the specials; exact round trip."""

    vocab_size = BYTE_VOCAB_SIZE

    def encode(self, text):
        data = np.frombuffer(text.encode("utf-8"), dtype=np.uint8)
        return data.astype(np.int64) + N_SPECIALS

    def decode(self, ids):
        ids = np.asarray(ids)
        kept = ids[ids >= N_SPECIALS] - N_SPECIALS
        return kept.astype(np.uint8).tobytes().decode("utf-8", errors="replace")


class WordTokenizer:
    """Whitespace words ranked by frequency (ties broken lexically); ids cap
    at max_vocab and unknown words map to UNK."""

    def __init__(self, texts, max_vocab=512):
        if max_vocab <= N_SPECIALS:
            raise ValidationError(f"max_vocab must exceed {N_SPECIALS}, got {max_vocab}")
        counts = {}
        for text in texts:
            for w in text.split():
                counts[w] = counts.get(w, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))[:max_vocab - N_SPECIALS]
        self._id_of = {w: i + N_SPECIALS for i, w in enumerate(ranked)}
        self._word_of = {i: w for w, i in self._id_of.items()}
        self.vocab_size = N_SPECIALS + len(ranked)

    def encode(self, text):
        return np.array([self._id_of.get(w, UNK_ID) for w in text.split()], dtype=np.int64)

    def decode(self, ids):
        return " ".join(self._word_of.get(int(i), "<unk>") for i in np.asarray(ids)
                        if int(i) >= N_SPECIALS)


class TokenDataset:
    """Flat id stream chopped into non-overlapping length-S sequences; the
    tail shorter than S is dropped."""

    def __init__(self, ids, seq_len):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValidationError("token ids must be a 1-d array")
        if seq_len < 2:
            raise ValidationError(f"seq_len must be >= 2, got {seq_len}")
        self.ids = ids
        self.seq_len = seq_len
        self.n_sequences = ids.size // seq_len

    def sequence(self, i):
        if not 0 <= i < self.n_sequences:
            raise ValidationError(f"sequence index {i} out of range")
        return self.ids[i * self.seq_len:(i + 1) * self.seq_len]


class BatchPlan:
    """Seeded epoch permutation and strided rank sharding."""

    def __init__(self, global_batch, world_size, seed):
        if world_size < 1:
            raise ValidationError(f"world_size must be >= 1, got {world_size}")
        if global_batch < 1 or global_batch % world_size != 0:
            raise ValidationError(
                f"global batch {global_batch} must be a positive multiple of world_size {world_size}"
            )
        self.global_batch = global_batch
        self.world_size = world_size
        self.seed = seed

    def n_batches(self, dataset):
        return dataset.n_sequences // self.global_batch

    def epoch_permutation(self, dataset, epoch):
        rng = np.random.default_rng([self.seed, epoch])
        return rng.permutation(dataset.n_sequences)

    def shard_batches(self, dataset, epoch, rank):
        """Rank's micro-batches for one epoch: array [n_batches, B/W, S].

        Global batch g covers permuted slots [g*B, (g+1)*B); rank r takes
        strided positions r, r+W, ... so the union over ranks is exact and
        disjoint. Leftover sequences that do not fill a batch are dropped.
        """
        if not 0 <= rank < self.world_size:
            raise ValidationError(f"rank {rank} out of range")
        perm = self.epoch_permutation(dataset, epoch)
        n = self.n_batches(dataset)
        per_rank = self.global_batch // self.world_size
        out = np.empty((n, per_rank, dataset.seq_len), dtype=np.int64)
        for g in range(n):
            base = g * self.global_batch
            for j in range(per_rank):
                out[g, j] = dataset.sequence(perm[base + rank + j * self.world_size])
        return out


def _read_text_file(path):
    raw = path.read_bytes()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise IngestionError(f"{path}: invalid UTF-8 at byte {e.start}") from None


def load_corpus_text(path):
    """Texts from a .txt file, a .csv with a text-bearing column, or a
    directory of either (sorted by name). Returns a list of documents."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"corpus path {path} does not exist")
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.suffix.lower() in (".txt", ".csv") and p.is_file())
        if not files:
            raise IngestionError(f"corpus directory {path} has no .txt or .csv files")
        docs = []
        for p in files:
            docs.extend(load_corpus_text(p))
        return docs
    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as f:
            try:
                rows = list(csv.reader(f))
            except (csv.Error, UnicodeDecodeError) as e:
                raise IngestionError(f"{path}: {e}") from None
        if not rows:
            raise IngestionError(f"{path}: empty csv")
        header = [h.strip().lower() for h in rows[0]]
        for candidate in ("text", "content", "body"):
            if candidate in header:
                col = header.index(candidate)
                return [row[col] for row in rows[1:] if len(row) > col]
        raise IngestionError(f"{path}: no text/content/body column in {header}")
    return [_read_text_file(path)]


def encode_documents(docs, tokenizer):
    """Clean and tokenize each document, joining them with EOT markers."""
    parts = []
    for doc in docs:
        ids = tokenizer.encode(clean_text(doc))
        if ids.size:
            parts.append(ids)
            parts.append(np.array([EOT_ID], dtype=np.int64))
    if not parts:
        raise IngestionError("corpus contained no usable text after cleaning")
    return np.concatenate(parts)


_WORDS = [
    "the", "a", "model", "train", "data", "batch", "worker", "shard", "grad",
    "loss", "token", "layer", "head", "step", "sync", "bucket", "queue",
    "node", "rank", "clock", "epoch", "seed", "text", "byte", "word", "norm",
    "gate", "path", "tape", "unit", "wave", "stone", "river", "light",
]


def synthetic_corpus_text(n_chars, seed):
    """Deterministic pseudo-prose with bigram structure, so a small model has
    something to learn. About n_chars characters of cleaned text."""
    if n_chars < 1:
        raise ValidationError(f"n_chars must be positive, got {n_chars}")
    rng = np.random.default_rng(seed)
    n = len(_WORDS)
    # fixed sparse bigram preferences plus uniform smoothing
    trans = np.full((n, n), 0.25 / n)
    for i in range(n):
        trans[i, (i + 1) % n] += 0.45
        trans[i, (3 * i + 5) % n] += 0.20
        trans[i, (7 * i + 2) % n] += 0.10
    trans /= trans.sum(axis=1, keepdims=True)
    words = []
    state = int(rng.integers(n))
    total = 0
    sentence_left = int(rng.integers(6, 14))
    while total < n_chars:
        word = _WORDS[state]
        sentence_left -= 1
        if sentence_left == 0:
            word += "."
            sentence_left = int(rng.integers(6, 14))
        words.append(word)
        total += len(word) + 1
        state = int(rng.choice(n, p=trans[state]))
    return clean_text(" ".join(words))


def synthetic_token_stream(n_tokens, seed):
    """n_tokens byte-level ids of synthetic text."""
    text = synthetic_corpus_text(int(n_tokens * 1.05) + 16, seed)
    ids = ByteTokenizer().encode(text)
    if ids.size < n_tokens:  # pathological only for tiny n_tokens
        reps = int(np.ceil(n_tokens / ids.size))
        ids = np.tile(ids, reps)
    return ids[:n_tokens]
