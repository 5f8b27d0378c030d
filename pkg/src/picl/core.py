"""Shared domain types and log-space primitives.

Everything downstream (speakers, listeners, decoders) passes probabilities
around in natural-log space; probability vectors materialize only at API
edges. All types here are immutable values and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

Token = int
ItemId = str

EOS_WORD = "</s>"

# Tolerance for "this log-vector is a normalized distribution".
NORM_TOL = 1e-9

# Incremented every time a distribution is checked; lets benchmark runs prove
# they executed with validation on.
VALIDATION_COUNTS: dict[str, int] = {
    "log_distribution": 0,
    "listener_posterior": 0,
    "suppressor": 0,
}


def logsumexp(values) -> float:
    """log(sum(exp(v))) with max-shifting; -inf iff every input is -inf."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty distribution")
    m = float(np.max(v))
    if m == -np.inf:
        return -np.inf
    return m + float(np.log(np.sum(np.exp(v - m))))


def compare_hypotheses(a: tuple[float, tuple[Token, ...]],
                       b: tuple[float, tuple[Token, ...]]) -> int:
    """Total order on (score, tokens) pairs: higher score first, then the
    lexicographically smaller token-id sequence. Returns -1/0/1."""
    if a[0] != b[0]:
        return -1 if a[0] > b[0] else 1
    if a[1] != b[1]:
        return -1 if tuple(a[1]) < tuple(b[1]) else 1
    return 0


@dataclass(frozen=True)
class Vocabulary:
    """Token alphabet: surface forms plus a reserved end-of-sequence id."""

    words: tuple[str, ...]
    eos_id: Token

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary surface forms must be unique")
        if not 0 <= self.eos_id < len(self.words):
            raise ValueError("eos_id out of range")

    @cached_property
    def word_ids(self) -> dict[str, Token]:
        return {w: i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return len(self.words)

    def caption(self, words: list[str] | tuple[str, ...], complete: bool = True) -> Caption:
        """Build a Caption from surface forms; appends EOS when complete."""
        toks = tuple(self.word_ids[w] for w in words)
        if complete:
            toks = toks + (self.eos_id,)
        return Caption(toks, self.eos_id)

    def text(self, tokens) -> str:
        """Detokenize: space-joined surface forms with EOS stripped."""
        return " ".join(self.words[t] for t in tokens if t != self.eos_id)


@dataclass(frozen=True)
class Caption:
    """A (possibly partial) token sequence; EOS may appear only at the end."""

    tokens: tuple[Token, ...]
    eos_id: Token

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.eos_id in self.tokens[:-1]:
            raise ValueError("EOS may appear only as the final token")

    @property
    def complete(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == self.eos_id

    def __len__(self) -> int:
        return len(self.tokens)

    def append(self, token: Token) -> Caption:
        if self.complete:
            raise ValueError("cannot extend a completed caption")
        return Caption(self.tokens + (token,), self.eos_id)

    @classmethod
    def empty(cls, eos_id: Token) -> Caption:
        return cls((), eos_id)


@dataclass(frozen=True)
class RefGameContext:
    """One reference game: a target item and its distractors."""

    target: ItemId
    distractors: tuple[ItemId, ...]

    def __post_init__(self):
        object.__setattr__(self, "distractors", tuple(self.distractors))
        if len(self.distractors) < 1:
            raise ValueError("need at least one distractor")
        ids = (self.target,) + self.distractors
        if len(set(ids)) != len(ids):
            raise ValueError("context item ids must be distinct")

    @property
    def items(self) -> tuple[ItemId, ...]:
        """All items, target first by convention."""
        return (self.target,) + self.distractors

    @property
    def m(self) -> int:
        return len(self.distractors)


@dataclass(frozen=True)
class LogDistribution:
    """Normalized log-probability vector over tokens (entries <= 0 or -inf)."""

    logp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "logp", np.asarray(self.logp, dtype=float))
        self.logp.setflags(write=False)
        VALIDATION_COUNTS["log_distribution"] += 1
        total = logsumexp(self.logp)
        if not abs(total) <= NORM_TOL:
            raise ValueError(f"log-distribution does not normalize: logsumexp={total!r}")
        if np.any(self.logp > 0.0):
            raise ValueError("log-probabilities must be <= 0")

    @classmethod
    def from_scores(cls, scores) -> LogDistribution:
        """Normalize arbitrary log-scores into a distribution."""
        s = np.asarray(scores, dtype=float)
        return cls(s - logsumexp(s))

    @classmethod
    def from_probs(cls, probs) -> LogDistribution:
        p = np.asarray(probs, dtype=float)
        if np.any(p < 0.0):
            raise ValueError("probabilities must be non-negative")
        with np.errstate(divide="ignore"):
            return cls.from_scores(np.log(p))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)

    def __len__(self) -> int:
        return len(self.logp)


@dataclass(frozen=True)
class DecodeConfig:
    """Beam-search knobs shared by every decoding method.

    `lam` is the informativity weight the active method reads; the dispatcher
    overwrites it from a MethodSpec when one is supplied.
    """

    lam: float = 0.0
    beam_width: int = 16
    pool_size: int = 256
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be positive")
        if self.pool_size < self.beam_width:
            raise ValueError("pool_size must be >= beam_width")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-component seed derived from one global seed."""
    import hashlib

    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:4], "big")
