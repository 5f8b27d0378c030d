"""Base speakers: next-token distributions conditioned on a single item.

The abstract interface mirrors what an image captioner exposes (next-token
log-probabilities given the item and the partial caption so far). The built-in
toy lexicon speaker is deliberately simple enough to enumerate exactly, which
is what the oracle tests lean on.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .core import (
    EOS_WORD,
    Caption,
    ItemId,
    LogDistribution,
    RefGameContext,
    Token,
    Vocabulary,
)


class SpeakerScorer(ABC):
    """Next-token scorer: deterministic for a fixed (item, prefix)."""

    @property
    @abstractmethod
    def vocab(self) -> Vocabulary: ...

    @abstractmethod
    def next_token_logprobs(self, item: ItemId, prefix: Caption) -> LogDistribution:
        """Distribution over the next token (including EOS) given one item."""

    def next_token_logprobs_batch(self, item: ItemId, prefixes) -> list[LogDistribution]:
        """One distribution per prefix; remote scorers answer this in one round trip."""
        return [self.next_token_logprobs(item, p) for p in prefixes]


def next_token_logprobs(speaker: SpeakerScorer, item: ItemId, prefix: Caption) -> LogDistribution:
    if prefix.complete:
        raise ValueError("prefix is already complete")
    return speaker.next_token_logprobs(item, prefix)


def prefix_logprob(speaker: SpeakerScorer, item: ItemId, tokens: tuple[Token, ...]) -> float:
    """Sum of per-step next-token log-probabilities along `tokens`."""
    total = 0.0
    prefix = Caption.empty(speaker.vocab.eos_id)
    for tok in tokens:
        lp = float(speaker.next_token_logprobs(item, prefix).logp[tok])
        if lp == -np.inf:
            return -np.inf
        total += lp
        prefix = prefix.append(tok)
    return total


def sequence_logprob(speaker: SpeakerScorer, item: ItemId, caption: Caption) -> float:
    """Chain-rule log-probability of a complete caption, EOS step included."""
    if not caption.complete:
        raise ValueError("caption must be complete")
    return prefix_logprob(speaker, item, caption.tokens)


@dataclass(frozen=True)
class ToyWorld:
    """A desk-scale benchmark universe of binary-attribute items.

    Items are grouped into 10-item problem sets where the distractors share at
    least `overlap_min` attributes with the target, so captions must name
    attributes that actually discriminate.
    """

    attributes: tuple[str, ...]
    fillers: tuple[str, ...]
    items: dict[ItemId, tuple[int, ...]]
    set_ids: tuple[str, ...]
    problem_sets: tuple[RefGameContext, ...]
    reference_captions: dict[ItemId, Caption]
    overlap_min: int
    seed: int

    def __post_init__(self):
        n_attr = len(self.attributes)
        for item_id, vec in self.items.items():
            if len(vec) != n_attr:
                raise ValueError(f"item {item_id}: attribute vector has wrong length")
            if sum(vec) < 1:
                raise ValueError(f"item {item_id}: needs at least one attribute")
        if len(self.set_ids) != len(self.problem_sets):
            raise ValueError("set_ids and problem_sets must align")
        for set_id, ctx in zip(self.set_ids, self.problem_sets):
            if len(ctx.items) != 10:
                raise ValueError(f"problem set {set_id}: expected exactly 10 items")
            tvec = np.asarray(self.items[ctx.target])
            for d in ctx.distractors:
                overlap = int(np.dot(tvec, np.asarray(self.items[d])))
                if overlap < self.overlap_min:
                    raise ValueError(
                        f"problem set {set_id}: distractor {d} shares {overlap} "
                        f"< overlap_min={self.overlap_min} attributes with target"
                    )

    @cached_property
    def vocabulary(self) -> Vocabulary:
        words = self.attributes + self.fillers + (EOS_WORD,)
        return Vocabulary(words=words, eos_id=len(words) - 1)

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    def attribute_vector(self, item: ItemId) -> np.ndarray:
        return np.asarray(self.items[item], dtype=float)


class ToyLexiconSpeaker(SpeakerScorer):
    """Speaker that utters its item's attribute words, with epsilon noise.

    Construction rule for the next-token distribution:
      * lexicon part: uniform over the item's not-yet-emitted attribute words;
        once at least one attribute word has been emitted, `p_stop` of the
        lexicon mass moves to EOS (all of it when no attribute words remain)
      * mixed with `eps` of a uniform distribution over the full vocabulary
      * already-emitted attribute words and (at the empty prefix) EOS are then
        masked out and the result renormalized
    """

    def __init__(self, world: ToyWorld, eps: float = 0.15, p_stop: float = 0.3):
        if not 0.0 <= eps < 1.0:
            raise ValueError("eps must be in [0, 1)")
        if not 0.0 < p_stop < 1.0:
            raise ValueError("p_stop must be in (0, 1)")
        self.world = world
        self.eps = eps
        self.p_stop = p_stop
        self._cache: dict[tuple, LogDistribution] = {}

    @property
    def vocab(self) -> Vocabulary:
        return self.world.vocabulary

    def next_token_logprobs(self, item: ItemId, prefix: Caption) -> LogDistribution:
        if prefix.complete:
            raise ValueError("prefix is already complete")
        if item not in self.world.items:
            raise ValueError(f"unknown item: {item}")
        n_attr = self.world.n_attributes
        emitted = frozenset(t for t in prefix.tokens if t < n_attr)
        key = (item, emitted, len(prefix) == 0)
        hit = self._cache.get(key)
        if hit is not None:
            return hit

        vocab = self.vocab
        eos = vocab.eos_id
        vec = self.world.items[item]
        true_words = [a for a in range(n_attr) if vec[a]]
        remaining = [a for a in true_words if a not in emitted]
        stop_allowed = any(a in emitted for a in true_words)

        lexicon = np.zeros(vocab.size)
        if stop_allowed:
            if remaining:
                lexicon[eos] = self.p_stop
                lexicon[remaining] = (1.0 - self.p_stop) / len(remaining)
            else:
                lexicon[eos] = 1.0
        else:
            lexicon[remaining] = 1.0 / len(remaining)

        mix = (1.0 - self.eps) * lexicon + self.eps / vocab.size
        if emitted:
            mix[list(emitted)] = 0.0
        if len(prefix) == 0:
            mix[eos] = 0.0
        mix /= mix.sum()
        with np.errstate(divide="ignore"):
            dist = LogDistribution(np.log(mix))
        self._cache[key] = dist
        return dist


def generate_toy_world(
    n_sets: int,
    n_attributes: int,
    overlap_min: int,
    seed: int,
    n_fillers: int = 4,
) -> ToyWorld:
    """Deterministically sample a ToyWorld of 10-item reference games.

    Each set draws a target feature vector, then nine distractors that share
    at least `overlap_min` of the target's attributes. The first distractor is
    forced to miss at least one target attribute so every target has a
    non-empty discriminative reference caption (attributes not carried by all
    of its distractors, in token order).
    """
    if n_sets < 1:
        raise ValueError("n_sets must be >= 1")
    if overlap_min < 0:
        raise ValueError("overlap_min must be >= 0")
    if n_attributes < overlap_min + 2:
        raise ValueError(
            f"n_attributes must be >= overlap_min + 2 (got {n_attributes} < {overlap_min + 2})"
        )
    if n_fillers < 0:
        raise ValueError("n_fillers must be >= 0")

    rng = np.random.default_rng(seed)
    attributes = tuple(f"attr{i:02d}" for i in range(n_attributes))
    fillers = tuple(f"filler{i:02d}" for i in range(n_fillers))

    items: dict[ItemId, tuple[int, ...]] = {}
    set_ids: list[str] = []
    contexts: list[RefGameContext] = []
    reference: dict[ItemId, Caption] = {}

    for s in range(n_sets):
        set_id = f"s{s:03d}"
        target_slot = int(rng.integers(0, 10))
        k_t = int(rng.integers(overlap_min + 1, n_attributes + 1))
        target_attrs = sorted(int(a) for a in rng.choice(n_attributes, size=k_t, replace=False))
        target_set = set(target_attrs)
        outside = [a for a in range(n_attributes) if a not in target_set]

        distractor_sets: list[set[int]] = []
        for j in range(9):
            for _ in range(100):
                if j == 0:
                    n_shared = int(rng.integers(overlap_min, k_t))
                else:
                    n_shared = int(rng.integers(overlap_min, k_t + 1))
                shared = set(int(a) for a in rng.choice(target_attrs, size=n_shared, replace=False))
                n_extra = int(rng.integers(0, len(outside) + 1)) if outside else 0
                extra = set(int(a) for a in rng.choice(outside, size=n_extra, replace=False)) if n_extra else set()
                cand = shared | extra
                if cand and cand != target_set:
                    distractor_sets.append(cand)
                    break
            else:
                raise ValueError(
                    f"could not sample a distractor for set {set_id}: "
                    f"constraints too tight (overlap_min={overlap_min}, n_attributes={n_attributes})"
                )

        slot_ids = [f"{set_id}_i{j}" for j in range(10)]
        target_id = slot_ids[target_slot]
        distractor_ids = [sid for sid in slot_ids if sid != target_id]
        items[target_id] = tuple(1 if a in target_set else 0 for a in range(n_attributes))
        for did, attrs in zip(distractor_ids, distractor_sets):
            items[did] = tuple(1 if a in attrs else 0 for a in range(n_attributes))

        # attribute index == token id because attribute words lead the vocabulary
        discriminative = [
            a for a in target_attrs if not all(a in d for d in distractor_sets)
        ]
        set_ids.append(set_id)
        contexts.append(RefGameContext(target=target_id, distractors=tuple(distractor_ids)))
        eos_id = n_attributes + n_fillers
        reference[target_id] = Caption(tuple(discriminative) + (eos_id,), eos_id)

    return ToyWorld(
        attributes=attributes,
        fillers=fillers,
        items=items,
        set_ids=tuple(set_ids),
        problem_sets=tuple(contexts),
        reference_captions=reference,
        overlap_min=overlap_min,
        seed=seed,
    )


def world_to_json(world: ToyWorld) -> dict:
    """JSON-serializable form of a ToyWorld (documented in README)."""
    return {
        "format": "toy-world/v1",
        "seed": world.seed,
        "overlap_min": world.overlap_min,
        "attributes": list(world.attributes),
        "fillers": list(world.fillers),
        "items": {k: list(v) for k, v in world.items.items()},
        "sets": [
            {
                "set_id": sid,
                "items": sorted(ctx.items),
                "target": ctx.target,
            }
            for sid, ctx in zip(world.set_ids, world.problem_sets)
        ],
        "reference_captions": {
            k: [world.vocabulary.words[t] for t in cap.tokens if t != world.vocabulary.eos_id]
            for k, cap in world.reference_captions.items()
        },
    }


def world_from_json(data: dict) -> ToyWorld:
    if data.get("format") != "toy-world/v1":
        raise ValueError("not a toy-world/v1 file")
    attributes = tuple(data["attributes"])
    fillers = tuple(data["fillers"])
    eos_id = len(attributes) + len(fillers)
    word_ids = {w: i for i, w in enumerate(attributes + fillers)}
    set_ids = []
    contexts = []
    for entry in data["sets"]:
        set_ids.append(entry["set_id"])
        target = entry["target"]
        distractors = tuple(i for i in entry["items"] if i != target)
        contexts.append(RefGameContext(target=target, distractors=distractors))
    reference = {
        k: Caption(tuple(word_ids[w] for w in words) + (eos_id,), eos_id)
        for k, words in data["reference_captions"].items()
    }
    return ToyWorld(
        attributes=attributes,
        fillers=fillers,
        items={k: tuple(v) for k, v in data["items"].items()},
        set_ids=tuple(set_ids),
        problem_sets=tuple(contexts),
        reference_captions=reference,
        overlap_min=data["overlap_min"],
        seed=data["seed"],
    )


def save_world(world: ToyWorld, path: str | Path) -> None:
    Path(path).write_text(json.dumps(world_to_json(world), indent=2, sort_keys=True))


def load_world(path: str | Path) -> ToyWorld:
    return world_from_json(json.loads(Path(path).read_text()))
