"""Automatic evaluation: retrieval accuracy, perplexity, and tradeoff sweeps.

Informativeness is the fraction of problems where a held-out evaluative
listener's argmax item is the target. Fluency is the arithmetic mean of
per-caption perplexities. Per-token log-likelihoods are carried in base 2 so
that perplexity is the bit-exact vocabulary size under a uniform model
(2**-mean round-trips exactly where exp(log(.)) does not); the perplexity
value itself is base-independent.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import Caption, DecodeConfig, RefGameContext, Vocabulary
from .decoding import DecodeResult, Method, MethodSpec, run_method
from .listeners import ListenerPosterior, SimilarityScorer, listener_posterior
from .speakers import SpeakerScorer

BEGIN = -1  # bigram begin-of-sequence state; never a predicted token


class LanguageModelScorer(ABC):
    """Fluency judge: per-token log2-likelihoods of a complete caption."""

    @abstractmethod
    def token_log2probs(self, caption: Caption) -> np.ndarray: ...


class UniformLM(LanguageModelScorer):
    """Every token equally likely; perplexity is exactly the vocabulary size."""

    def __init__(self, vocab_size: int):
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        self.vocab_size = vocab_size

    def token_log2probs(self, caption: Caption) -> np.ndarray:
        return np.full(len(caption.tokens), -np.log2(self.vocab_size))


class BigramLM(LanguageModelScorer):
    """Add-k smoothed bigram model, begin and EOS transitions included."""

    def __init__(self, vocab_size: int, k: float, counts: dict[int, dict[int, int]],
                 totals: dict[int, int]):
        self.vocab_size = vocab_size
        self.k = k
        self.counts = counts
        self.totals = totals

    def bigram_prob(self, prev: int, tok: int) -> float:
        c = self.counts.get(prev, {}).get(tok, 0)
        total = self.totals.get(prev, 0)
        return (c + self.k) / (total + self.k * self.vocab_size)

    def token_log2probs(self, caption: Caption) -> np.ndarray:
        prevs = (BEGIN,) + caption.tokens[:-1]
        return np.array(
            [np.log2(self.bigram_prob(p, t)) for p, t in zip(prevs, caption.tokens)]
        )


def train_bigram_lm(captions: list[Caption], k: float, vocab_size: int) -> BigramLM:
    """Estimate an add-k bigram LM from complete captions."""
    if k <= 0:
        raise ValueError("k must be > 0")
    if not captions:
        raise ValueError("corpus must be non-empty")
    counts: dict[int, dict[int, int]] = {}
    totals: dict[int, int] = {}
    for cap in captions:
        if not cap.complete:
            raise ValueError("corpus captions must be complete")
        prev = BEGIN
        for tok in cap.tokens:
            row = counts.setdefault(prev, {})
            row[tok] = row.get(tok, 0) + 1
            totals[prev] = totals.get(prev, 0) + 1
            prev = tok
    return BigramLM(vocab_size=vocab_size, k=k, counts=counts, totals=totals)


def caption_perplexity(lm: LanguageModelScorer, caption: Caption) -> float:
    """exp of the average negative log-likelihood per token (EOS counted).

    Zero-probability tokens yield +inf, which is reported rather than raised.
    """
    if not caption.complete:
        raise ValueError("caption must be complete")
    lls = np.asarray(lm.token_log2probs(caption), dtype=float)
    if lls.size < 1:
        raise ValueError("scorer returned no token scores")
    return float(np.exp2(-np.mean(lls)))


def choose_item(posterior: ListenerPosterior, context: RefGameContext) -> tuple[int, int]:
    """(chosen index, 1-based target rank); ties broken by smaller item id."""
    order = sorted(
        range(len(context.items)),
        key=lambda i: (-posterior.probs[i], context.items[i]),
    )
    return order[0], order.index(0) + 1


def retrieval_accuracy(eval_listener: SimilarityScorer,
                       problems: list[tuple[RefGameContext, Caption]],
                       vocab: Vocabulary) -> float:
    """Fraction of problems whose posterior argmax is the target."""
    if not problems:
        raise ValueError("no problems to evaluate")
    correct = 0
    for context, caption in problems:
        if not caption.complete:
            raise ValueError("captions must be complete")
        posterior = listener_posterior(eval_listener, context, caption, vocab)
        chosen, _ = choose_item(posterior, context)
        correct += chosen == 0
    return correct / len(problems)


@dataclass(frozen=True)
class ProblemEval:
    set_id: str
    target: str
    chosen: str
    target_rank: int
    correct: bool
    caption: str
    perplexity: float


@dataclass(frozen=True)
class EvalReport:
    method: str
    lam: float
    retrieval_accuracy: float
    mean_perplexity: float
    problems: tuple[ProblemEval, ...]


@dataclass(frozen=True)
class SweepRow:
    method: str
    lam: float
    accuracy: float
    mean_ppl: float
    error: str | None = None


@dataclass
class ScorerSet:
    """Everything a run needs to decode and evaluate."""

    speaker: SpeakerScorer
    decode_sim: SimilarityScorer | None
    eval_sim: SimilarityScorer
    lm: LanguageModelScorer

    @property
    def vocab(self) -> Vocabulary:
        return self.speaker.vocab


def decode_problems(spec: MethodSpec, problems: list[RefGameContext],
                    scorers: ScorerSet, config: DecodeConfig,
                    jobs: int = 1, trace: bool = False) -> list[DecodeResult]:
    """Decode every problem; result order follows problem order regardless of jobs."""

    def one(context: RefGameContext) -> DecodeResult:
        return run_method(spec, scorers.speaker, scorers.decode_sim, context, config,
                          trace=trace)

    if jobs <= 1:
        return [one(c) for c in problems]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, problems))


def evaluate_captions(scorers: ScorerSet, problems: list[RefGameContext],
                      captions: list[Caption], method: str, lam: float,
                      set_ids: list[str] | None = None) -> EvalReport:
    """Score pre-decoded captions for informativeness and fluency."""
    if len(problems) != len(captions):
        raise ValueError("problems and captions must align")
    if not problems:
        raise ValueError("no problems to evaluate")
    if set_ids is None:
        set_ids = [f"p{i:04d}" for i in range(len(problems))]
    rows = []
    for sid, context, caption in zip(set_ids, problems, captions):
        posterior = listener_posterior(scorers.eval_sim, context, caption, scorers.vocab)
        chosen, rank = choose_item(posterior, context)
        rows.append(
            ProblemEval(
                set_id=sid,
                target=context.target,
                chosen=context.items[chosen],
                target_rank=rank,
                correct=chosen == 0,
                caption=scorers.vocab.text(caption.tokens),
                perplexity=caption_perplexity(scorers.lm, caption),
            )
        )
    return EvalReport(
        method=method,
        lam=lam,
        retrieval_accuracy=sum(r.correct for r in rows) / len(rows),
        mean_perplexity=float(np.mean([r.perplexity for r in rows])),
        problems=tuple(rows),
    )


def evaluate_method(spec: MethodSpec, problems: list[RefGameContext],
                    scorers: ScorerSet, config: DecodeConfig,
                    set_ids: list[str] | None = None, jobs: int = 1) -> EvalReport:
    results = decode_problems(spec, problems, scorers, config, jobs=jobs)
    return evaluate_captions(
        scorers, problems, [r.caption for r in results],
        method=spec.method.value, lam=spec.lam, set_ids=set_ids,
    )


def tradeoff_sweep(methods: list[Method], lambda_grid: list[float],
                   problems: list[RefGameContext], scorers: ScorerSet,
                   config: DecodeConfig, jobs: int = 1) -> list[SweepRow]:
    """One SweepRow per (method, lambda) grid point, sorted the same way.

    A decode failure marks its row with the reason instead of aborting the
    whole sweep.
    """
    if not lambda_grid:
        raise ValueError("lambda grid must be non-empty")
    rows = []
    for method in methods:
        lo, hi = (0.0, 2.0) if method is Method.INCRE_RSA else (0.0, 1.0)
        for lam in lambda_grid:
            if method is not Method.BASE and not lo <= lam <= hi:
                raise ValueError(f"lambda={lam} outside [{lo}, {hi}] for {method.value}")
        for lam in sorted(lambda_grid):
            try:
                report = evaluate_method(
                    MethodSpec(method, lam), problems, scorers, config, jobs=jobs
                )
                rows.append(SweepRow(method.value, lam, report.retrieval_accuracy,
                                     report.mean_perplexity))
            except ValueError as exc:
                rows.append(SweepRow(method.value, lam, float("nan"), float("nan"),
                                     error=str(exc)))
    return sorted(rows, key=lambda r: (r.method, r.lam))


def sweep_csv(rows: list[SweepRow], comment: str | None = None) -> str:
    """CSV with the fixed header; failed rows are omitted (see the JSON report)."""
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("method,lambda,accuracy,mean_ppl")
    for r in rows:
        if r.error is None:
            lines.append(f"{r.method},{r.lam!r},{r.accuracy!r},{r.mean_ppl!r}")
    return "\n".join(lines) + "\n"


def report_csv(report: EvalReport, comment: str | None = None) -> str:
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("method,lambda,accuracy,mean_ppl")
    lines.append(
        f"{report.method},{report.lam!r},{report.retrieval_accuracy!r},"
        f"{report.mean_perplexity!r}"
    )
    return "\n".join(lines) + "\n"
