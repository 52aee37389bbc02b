"""Synthetic byte-level corpus with short- and long-range structure.

Three tasks share the 256-token vocabulary without overlapping:

* ``markov``: an order-2 chain over tokens 0..31 with a sparse transition table.
* ``copy``: ``BOS``, k content tokens from 32..95, ``SEP``, then the content
  repeated cyclically. Predicting the copied span needs about k+1 tokens of
  context.
* ``modchain``: episodes of digits 0..16 (tokens 96..112), ``QUERY`` and the
  running sum mod 17 as the answer token.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOCAB = 256
MARKOV_BASE, MARKOV_SIZE = 0, 32
COPY_BASE, COPY_SIZE = 32, 64
DIGIT_BASE, MODULUS = 96, 17
PAD, BOS, SEP, QUERY = 250, 251, 252, 253
TASKS = ("markov", "copy", "modchain")
IGNORE = -1


@dataclass(frozen=True)
class CorpusSpec:
    """Task mixture and sequence lengths.

    ``copy_k`` bounds the content length of copy samples; ``None`` picks
    lengths that fit the sequence. ``seed`` fixes the Markov transition table
    and the default sample stream.
    """

    weights: dict = field(default_factory=lambda: {"markov": 0.4, "copy": 0.4, "modchain": 0.2})
    seq_len: int = 64
    copy_k: tuple[int, int] | None = None
    seed: int = 0
    vocab: int = VOCAB

    def __post_init__(self):
        if self.vocab != VOCAB:
            raise ValueError(f"vocab is fixed at {VOCAB}, got {self.vocab}")
        if set(self.weights) - set(TASKS):
            raise ValueError(f"unknown tasks {sorted(set(self.weights) - set(TASKS))}")
        w = np.array([self.weights.get(t, 0.0) for t in TASKS], dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"task weights must be nonnegative and sum to 1, got {self.weights}")
        if self.seq_len < 8:
            raise ValueError(f"sequence length must be at least 8, got {self.seq_len}")
        lo, hi = self.k_range
        if not 1 <= lo <= hi or 2 * hi + 2 > self.seq_len + 1:
            raise ValueError(f"copy_k={self.k_range} does not fit sequence length {self.seq_len}")

    @property
    def k_range(self) -> tuple[int, int]:
        if self.copy_k is not None:
            return tuple(self.copy_k)
        return 2, max(2, (self.seq_len - 1) // 2 - 1)


def stage_specs(seq_len1: int = 64, seq_len2: int = 256, seed: int = 0) -> tuple[CorpusSpec, CorpusSpec]:
    """Stage-1 mix at the short length; Stage-2 mix oversampling long copies.

    Stage-2 copy content lengths sit around the Stage-1 length so the copied
    span is only predictable with more context than Stage 1 ever provided.
    """
    s1 = CorpusSpec(seq_len=seq_len1, seed=seed)
    hi = min((seq_len2 - 1) // 2 - 1, seq_len1 + seq_len1 // 2)
    s2 = CorpusSpec(
        weights={"markov": 0.2, "copy": 0.6, "modchain": 0.2},
        seq_len=seq_len2, copy_k=(max(2, seq_len1 - seq_len1 // 8), hi), seed=seed,
    )
    return s1, s2


def markov_table(seed: int) -> np.ndarray:
    """Transition probabilities P[a, b, c] = p(next=c | prev2=a, prev1=b)."""
    rng = np.random.default_rng([seed, 0x6D61726B])
    return rng.dirichlet(np.full(MARKOV_SIZE, 0.1), size=(MARKOV_SIZE, MARKOV_SIZE))


@dataclass
class Sample:
    tokens: np.ndarray  # length seq_len + 1
    task: str
    k: int = 0          # copy content length (copy task only)


def _markov(n: int, table: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    out[:2] = rng.integers(0, MARKOV_SIZE, 2)
    cdf = np.cumsum(table, axis=-1)
    u = rng.random(n)
    for t in range(2, n):
        out[t] = min(int(np.searchsorted(cdf[out[t - 2], out[t - 1]], u[t])), MARKOV_SIZE - 1)
    return out + MARKOV_BASE


def _copy(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    content = rng.integers(COPY_BASE, COPY_BASE + COPY_SIZE, k)
    rest = n - k - 2
    reps = np.resize(content, rest)
    return np.concatenate([[BOS], content, [SEP], reps]).astype(np.int64)


def _modchain(n: int, rng: np.random.Generator) -> np.ndarray:
    out = [BOS]
    while len(out) < n:
        m = int(rng.integers(2, 9))
        digits = rng.integers(0, MODULUS, m)
        out.extend((digits + DIGIT_BASE).tolist())
        out.append(QUERY)
        out.append(int(digits.sum() % MODULUS) + DIGIT_BASE)
    return np.asarray(out[:n], dtype=np.int64)


def generate(spec: CorpusSpec, count: int, rng: np.random.Generator | int | None = None,
             task: str | None = None) -> list[Sample]:
    """``count`` samples of length ``seq_len + 1`` (inputs plus shifted targets)."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(spec.seed if rng is None else rng)
    table = markov_table(spec.seed)
    w = np.array([spec.weights.get(t, 0.0) for t in TASKS], dtype=float)
    n = spec.seq_len + 1
    lo, hi = spec.k_range
    out = []
    for _ in range(count):
        t = task if task is not None else TASKS[int(rng.choice(len(TASKS), p=w))]
        if t == "markov":
            s = Sample(_markov(n, table, rng), t)
        elif t == "copy":
            k = int(rng.integers(lo, hi + 1))
            s = Sample(_copy(n, k, rng), t, k)
        elif t == "modchain":
            s = Sample(_modchain(n, rng), t)
        else:
            raise ValueError(f"unknown task {t!r}")
        verify_sample(s)
        out.append(s)
    return out


def verify_sample(s: Sample) -> None:
    """Check the labels a sample carries are consistent with its construction."""
    x = s.tokens
    if x.min() < 0 or x.max() >= VOCAB:
        raise ValueError("token outside [0, 255]")
    if s.task == "copy":
        content = x[1 : 1 + s.k]
        if x[0] != BOS or x[1 + s.k] != SEP:
            raise ValueError("copy sample missing BOS/SEP framing")
        span = x[2 + s.k :]
        if not np.array_equal(span, np.resize(content, len(span))):
            raise ValueError("copy span does not repeat the content")
    elif s.task == "modchain":
        i, acc = 1, 0
        while i < len(x):
            if x[i] == QUERY:
                if i + 1 < len(x) and x[i + 1] != acc % MODULUS + DIGIT_BASE:
                    raise ValueError(f"modchain answer at {i + 1} is wrong")
                acc, i = 0, i + 2
                continue
            acc += int(x[i]) - DIGIT_BASE
            i += 1


def copy_span_mask(s: Sample) -> np.ndarray:
    """Boolean over target positions (length seq_len): True inside the copied span."""
    m = np.zeros(len(s.tokens) - 1, dtype=bool)
    if s.task == "copy":
        m[1 + s.k :] = True  # targets at input index i predict token i+1
    return m


def modchain_answer(digits) -> int:
    return int(np.sum(digits) % MODULUS)


def to_batch(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (inputs, targets) arrays of shape (batch, seq_len)."""
    x = np.stack([s.tokens for s in samples])
    return x[:, :-1], x[:, 1:]


class BatchStream:
    """Deterministic stream of training batches for one corpus spec."""

    def __init__(self, spec: CorpusSpec, batch_size: int, seed: int):
        self.spec = spec
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, spec.seq_len, 0x62617463])

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        return to_batch(generate(self.spec, self.batch_size, self.rng))


# ---------------------------------------------------------------------------
# persistence: length-prefixed binary records


def save_records(samples: list[Sample], path: str | Path) -> None:
    """Each record: u8 task id, u32 k, u32 length, then length uint8 tokens."""
    with open(path, "wb") as f:
        for s in samples:
            f.write(struct.pack("<BII", TASKS.index(s.task), s.k, len(s.tokens)))
            f.write(s.tokens.astype(np.uint8).tobytes())


def load_records(path: str | Path) -> list[Sample]:
    out = []
    data = Path(path).read_bytes()
    pos = 0
    head = struct.calcsize("<BII")
    while pos < len(data):
        if pos + head > len(data):
            raise ValueError(f"truncated record header at byte {pos}")
        tid, k, n = struct.unpack_from("<BII", data, pos)
        pos += head
        if pos + n > len(data):
            raise ValueError(f"truncated record payload at byte {pos}")
        toks = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).astype(np.int64)
        pos += n
        out.append(Sample(toks, TASKS[tid], k))
    return out
