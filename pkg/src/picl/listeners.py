"""Listener posteriors over the items of a reference game.

Two families: similarity-softmax listeners (a text/item embedding similarity
normalized over the candidate items, the zero-shot retrieval style) and the
Bayesian listener obtained by inverting the speaker with an item prior.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .core import (
    NORM_TOL,
    VALIDATION_COUNTS,
    Caption,
    ItemId,
    RefGameContext,
    Token,
    logsumexp,
)
from .speakers import SpeakerScorer, ToyWorld, prefix_logprob


class SimilarityScorer(ABC):
    """Deterministic item/text similarity with a softmax temperature."""

    tau: float = 1.0

    @abstractmethod
    def similarity(self, item: ItemId, text: str) -> float: ...

    def batch_similarity(self, texts, items) -> np.ndarray:
        """(len(texts), len(items)) similarity matrix; override for speed."""
        return np.array([[self.similarity(i, t) for i in items] for t in texts], dtype=float)


@dataclass(frozen=True)
class ListenerPosterior:
    """Distribution over the items of one context, target first."""

    logp: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "logp", np.asarray(self.logp, dtype=float))
        self.logp.setflags(write=False)
        VALIDATION_COUNTS["listener_posterior"] += 1
        total = logsumexp(self.logp)
        if not abs(total) <= NORM_TOL:
            raise ValueError(f"listener posterior does not normalize: logsumexp={total!r}")

    @classmethod
    def from_scores(cls, scores) -> ListenerPosterior:
        s = np.asarray(scores, dtype=float)
        return cls(s - logsumexp(s))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)

    @property
    def log_target(self) -> float:
        return float(self.logp[0])

    def __len__(self) -> int:
        return len(self.logp)


def uniform_posterior(n_items: int) -> ListenerPosterior:
    return ListenerPosterior.from_scores(np.zeros(n_items))


class ToySimilarity(SimilarityScorer):
    """Bag-of-attribute-words similarity against toy item feature vectors.

    Text is embedded as counts of attribute words (fillers and unknown words
    contribute nothing). The similarity is the weight-perturbed inner product
    with the item's attribute vector; cosine mode divides by the unweighted
    norms of both vectors, with an all-zero vector pinned to similarity 0.
    """

    def __init__(self, world: ToyWorld, mode: str = "cosine", tau: float = 1.0,
                 weights: np.ndarray | None = None):
        if mode not in ("dot", "cosine"):
            raise ValueError("mode must be 'dot' or 'cosine'")
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self.world = world
        self.mode = mode
        self.tau = tau
        self.weights = (
            np.ones(world.n_attributes) if weights is None else np.asarray(weights, dtype=float)
        )
        if self.weights.shape != (world.n_attributes,):
            raise ValueError("weights must have one entry per attribute")
        self._word_to_attr = {w: i for i, w in enumerate(world.attributes)}

    def _embed(self, text: str) -> np.ndarray:
        bag = np.zeros(self.world.n_attributes)
        for word in text.split():
            idx = self._word_to_attr.get(word)
            if idx is not None:
                bag[idx] += 1.0
        return bag

    def similarity(self, item: ItemId, text: str) -> float:
        return float(self.batch_similarity([text], [item])[0, 0])

    def batch_similarity(self, texts, items) -> np.ndarray:
        bags = np.stack([self._embed(t) for t in texts])
        vecs = np.stack([self.world.attribute_vector(i) for i in items])
        sims = (bags * self.weights) @ vecs.T
        if self.mode == "cosine":
            bn = np.linalg.norm(bags, axis=1, keepdims=True)
            vn = np.linalg.norm(vecs, axis=1, keepdims=True)
            denom = bn @ vn.T
            with np.errstate(invalid="ignore", divide="ignore"):
                sims = np.where(denom > 0, sims / denom, 0.0)
        return sims


def listener_posterior(sim: SimilarityScorer, context: RefGameContext,
                       text, vocab=None) -> ListenerPosterior:
    """Softmax over items of similarity(item, text) / tau, target first.

    `text` may be a detokenized string or a Caption (pass `vocab` to
    detokenize); partial captions are scored like complete ones.
    """
    if isinstance(text, Caption):
        if vocab is None:
            raise ValueError("pass vocab to score a Caption")
        text = vocab.text(text.tokens)
    sims = sim.batch_similarity([text], context.items)[0]
    return ListenerPosterior.from_scores(sims / sim.tau)


def bayesian_posterior(speaker: SpeakerScorer, context: RefGameContext,
                       prefix: tuple[Token, ...] | Caption,
                       prior: ListenerPosterior | None = None) -> ListenerPosterior:
    """Posterior over items by Bayes' rule from speaker prefix likelihoods.

    probs[i] is proportional to prior[i] * P(prefix | item_i); items that give
    the prefix zero probability get exactly zero posterior.
    """
    tokens = prefix.tokens if isinstance(prefix, Caption) else tuple(prefix)
    if len(tokens) < 1:
        raise ValueError("prefix must contain at least one token")
    if prior is None:
        prior = uniform_posterior(len(context.items))
    loglik = np.array([prefix_logprob(speaker, i, tokens) for i in context.items])
    scores = prior.logp + loglik
    if np.all(scores == -np.inf):
        raise ValueError("prefix impossible under all items")
    return ListenerPosterior.from_scores(scores)


def make_eval_listener(world: ToyWorld, perturb_scale: float, seed: int,
                       mode: str = "cosine", tau: float = 1.0) -> ToySimilarity:
    """Held-out evaluative listener: same family, perturbed attribute weights.

    Weights are independent multiplicative factors uniform in
    [1 - perturb_scale, 1 + perturb_scale]; scale 0 reproduces the decoding
    listener exactly.
    """
    if perturb_scale < 0:
        raise ValueError("perturb_scale must be >= 0")
    rng = np.random.default_rng(seed)
    weights = 1.0 + perturb_scale * rng.uniform(-1.0, 1.0, size=world.n_attributes)
    return ToySimilarity(world, mode=mode, tau=tau, weights=weights)
