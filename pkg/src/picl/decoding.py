"""Caption generation procedures.

All decoders share the same beam mechanics: expand live beams over the
vocabulary, retire hypotheses that emit EOS into a completed pool (their
scores freeze), keep the top `beam_width` unfinished candidates, and finally
return the best completed caption. Ranking everywhere is by combined score,
then accumulated speaker score, then the lexicographically smaller token-id
sequence, so results are deterministic across runs and platforms.

Methods differ only in how a candidate prefix is scored:

  base                 accumulated speaker log-probability
  picl                 lam * listener log-posterior of the target given the
                       prefix + (1 - lam) * speaker log-probability, with the
                       listener applied to the `pool_size` best speaker
                       candidates per step (sub-sampled rescoring)
  exact                picl without sub-sampling (the ground-truth oracle)
  es                   per-token emitter minus lam * suppressor, where the
                       suppressor is the probability-space mean of the
                       distractors' next-token distributions
  incre-rsa            speaker log-probability + lam * log Bayesian posterior
                       of the target (speaker inverted with an item prior)
  picl-full-rerank     generate pool_size complete captions from the base
                       speaker, rescore whole captions with the picl objective
  picl-no-distractors  picl, but the listener term normalizes the target
                       similarity over the candidate pool instead of over items
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    VALIDATION_COUNTS,
    Caption,
    DecodeConfig,
    ItemId,
    LogDistribution,
    RefGameContext,
    Token,
    logsumexp,
)
from .listeners import ListenerPosterior, SimilarityScorer, uniform_posterior
from .speakers import SpeakerScorer

EXPANSION_GUARD = 100_000
SUPPRESSOR_FLOOR = 1e-10


class Method(str, enum.Enum):
    BASE = "base"
    PICL = "picl"
    ES = "es"
    INCRE_RSA = "incre-rsa"
    PICL_FULL_RERANK = "picl-full-rerank"
    PICL_NO_DISTRACTORS = "picl-no-distractors"


def lambda_range(method: Method) -> tuple[float, float]:
    """Legal informativity-parameter range for a method."""
    if method is Method.INCRE_RSA:
        return (0.0, 2.0)
    if method is Method.BASE:
        return (0.0, 0.0)
    return (0.0, 1.0)


@dataclass(frozen=True)
class MethodSpec:
    """A pragmatic method plus its informativity weight."""

    method: Method
    lam: float = 0.0

    def __post_init__(self):
        if self.method is Method.BASE:
            return
        lo, hi = lambda_range(self.method)
        if not lo <= self.lam <= hi:
            raise ValueError(
                f"lambda={self.lam} outside [{lo}, {hi}] for method {self.method.value}"
            )


@dataclass(slots=True)
class Hypothesis:
    """A partial caption with its accumulated scores; the beam-search unit."""

    tokens: tuple[Token, ...]
    speaker_logp: float = 0.0
    listener_log_target: float = 0.0
    combined_score: float = 0.0
    finished: bool = False


@dataclass(frozen=True)
class DecodeResult:
    caption: Caption
    combined_score: float
    speaker_logp: float
    trace: list[dict] | None = None


def _rank(hyps: list[Hypothesis]) -> list[Hypothesis]:
    return sorted(hyps, key=lambda h: (-h.combined_score, -h.speaker_logp, h.tokens))


def _expand_all(speaker: SpeakerScorer, item: ItemId, beams: list[Hypothesis]) -> list[Hypothesis]:
    """All single-token extensions with finite speaker probability, one batched
    scorer call per step."""
    eos = speaker.vocab.eos_id
    dists = speaker.next_token_logprobs_batch(
        item, [Caption(b.tokens, eos) for b in beams]
    )
    out = []
    for beam, dist in zip(beams, dists):
        logp = dist.logp
        for t in np.flatnonzero(logp != -np.inf):
            t = int(t)
            out.append(
                Hypothesis(
                    tokens=beam.tokens + (t,),
                    speaker_logp=beam.speaker_logp + float(logp[t]),
                    finished=(t == eos),
                )
            )
    return out


def _result(hyp: Hypothesis, eos: Token, trace: list[dict] | None) -> DecodeResult:
    return DecodeResult(
        caption=Caption(hyp.tokens, eos),
        combined_score=hyp.combined_score,
        speaker_logp=hyp.speaker_logp,
        trace=trace,
    )


def _trace_entry(step: int, vocab, pool, live, newly_completed) -> dict:
    def row(h: Hypothesis) -> dict:
        return {
            "text": vocab.text(h.tokens),
            "tokens": list(h.tokens),
            "speaker_logp": h.speaker_logp,
            "listener_log_target": h.listener_log_target,
            "combined_score": h.combined_score,
            "finished": h.finished,
        }

    return {
        "step": step,
        "pool": [row(h) for h in pool],
        "survivors": [row(h) for h in live],
        "completed": [row(h) for h in newly_completed],
    }


def beam_search_base(speaker: SpeakerScorer, item: ItemId, config: DecodeConfig,
                     trace: bool = False) -> list[DecodeResult]:
    """Plain beam search on accumulated speaker log-probability.

    Returns the top `beam_width` completed captions (score, then tie-break).
    """
    eos = speaker.vocab.eos_id
    vocab = speaker.vocab
    live = [Hypothesis(tokens=())]
    completed: list[Hypothesis] = []
    steps: list[dict] | None = [] if trace else None
    for step in range(config.max_len):
        if not live:
            break
        children = _expand_all(speaker, item, live)
        for c in children:
            c.combined_score = c.speaker_logp
        newly = [c for c in children if c.finished]
        completed.extend(newly)
        live = _rank([c for c in children if not c.finished])[: config.beam_width]
        if steps is not None:
            steps.append(_trace_entry(step, vocab, children, live, newly))
    if not completed:
        raise ValueError("no completed caption within max_len")
    best = _rank(completed)[: config.beam_width]
    return [_result(h, eos, steps if i == 0 else None) for i, h in enumerate(best)]


def _pragmatic_beam(
    speaker: SpeakerScorer,
    listener_terms,
    context: RefGameContext,
    config: DecodeConfig,
    pool_size: int | None,
    trace: bool = False,
) -> DecodeResult:
    """Shared loop for picl / exact / no-distractors decoding.

    `listener_terms(texts)` maps the pool's detokenized prefixes to their
    listener log-scores. `pool_size=None` expands without sub-sampling.
    """
    vocab = speaker.vocab
    lam = config.lam
    live = [Hypothesis(tokens=())]
    completed: list[Hypothesis] = []
    steps: list[dict] | None = [] if trace else None
    for step in range(config.max_len):
        if not live:
            break
        children = _expand_all(speaker, context.target, live)
        # pool selection uses the base-speaker objective only
        children.sort(key=lambda h: (-h.speaker_logp, h.tokens))
        pool = children if pool_size is None else children[:pool_size]
        texts = [vocab.text(h.tokens) for h in pool]
        terms = listener_terms(texts)
        for h, llt in zip(pool, terms):
            h.listener_log_target = float(llt)
            h.combined_score = lam * float(llt) + (1.0 - lam) * h.speaker_logp
        newly = [h for h in pool if h.finished]
        completed.extend(newly)
        live = _rank([h for h in pool if not h.finished])[: config.beam_width]
        if steps is not None:
            steps.append(_trace_entry(step, vocab, pool, live, newly))
    if not completed:
        raise ValueError("no completed caption within max_len")
    return _result(_rank(completed)[0], vocab.eos_id, steps)


def _item_softmax_terms(sim: SimilarityScorer, context: RefGameContext):
    """Listener log-posterior of the target for each candidate text."""

    def terms(texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros(0)
        sims = sim.batch_similarity(texts, context.items)
        out = np.empty(len(texts))
        for i, row in enumerate(sims):
            out[i] = ListenerPosterior.from_scores(row / sim.tau).log_target
        return out

    return terms


def picl_decode(speaker: SpeakerScorer, sim: SimilarityScorer,
                context: RefGameContext, config: DecodeConfig,
                trace: bool = False) -> DecodeResult:
    """Incremental pragmatic decoding with sub-sampled listener rescoring."""
    return _pragmatic_beam(
        speaker, _item_softmax_terms(sim, context), context, config,
        pool_size=config.pool_size, trace=trace,
    )


def exact_pragmatic_decode(speaker: SpeakerScorer, sim: SimilarityScorer,
                           context: RefGameContext, config: DecodeConfig,
                           trace: bool = False) -> DecodeResult:
    """Full-vocabulary pragmatic decoding; the ground-truth oracle.

    Feasible only at toy scale; guarded by the per-step expansion budget.
    """
    per_step = speaker.vocab.size * config.beam_width
    if per_step > EXPANSION_GUARD:
        raise ValueError(
            f"full expansion would score {per_step} prefixes per step "
            f"(> {EXPANSION_GUARD}); use sub-sampled picl_decode instead"
        )
    return _pragmatic_beam(
        speaker, _item_softmax_terms(sim, context), context, config,
        pool_size=None, trace=trace,
    )


def picl_no_distractors(speaker: SpeakerScorer, sim: SimilarityScorer,
                        context: RefGameContext, config: DecodeConfig,
                        trace: bool = False) -> DecodeResult:
    """Ablation: listener term normalizes target similarity over the pool."""

    def terms(texts: list[str]) -> np.ndarray:
        if not texts:
            return np.zeros(0)
        sims = sim.batch_similarity(texts, [context.target])[:, 0] / sim.tau
        return sims - logsumexp(sims)

    return _pragmatic_beam(
        speaker, terms, context, config, pool_size=config.pool_size, trace=trace,
    )


def picl_full_rerank(speaker: SpeakerScorer, sim: SimilarityScorer,
                     context: RefGameContext, config: DecodeConfig,
                     trace: bool = False) -> DecodeResult:
    """Ablation: rescore complete base-speaker captions, no incremental mixing."""
    wide = replace(config, beam_width=config.pool_size)
    candidates = beam_search_base(speaker, context.target, wide)
    texts = [speaker.vocab.text(r.caption.tokens) for r in candidates]
    terms = _item_softmax_terms(sim, context)(texts)
    lam = config.lam
    rescored = [
        Hypothesis(
            tokens=r.caption.tokens,
            speaker_logp=r.speaker_logp,
            listener_log_target=float(t),
            combined_score=lam * float(t) + (1.0 - lam) * r.speaker_logp,
            finished=True,
        )
        for r, t in zip(candidates, terms)
    ]
    steps = [_trace_entry(0, speaker.vocab, rescored, [], rescored)] if trace else None
    return _result(_rank(rescored)[0], speaker.vocab.eos_id, steps)


def _log_mean_columns(stack: np.ndarray) -> np.ndarray:
    """Column-wise log of the arithmetic mean of exp(rows)."""
    m = np.max(stack, axis=0)
    out = np.full(stack.shape[1], -np.inf)
    finite = m != -np.inf
    if np.any(finite):
        shifted = np.exp(stack[:, finite] - m[finite])
        out[finite] = m[finite] + np.log(np.mean(shifted, axis=0))
    return out


def es_decode(speaker: SpeakerScorer, context: RefGameContext, config: DecodeConfig,
              trace: bool = False) -> DecodeResult:
    """Emitter-suppressor beam search.

    Token score: log P(token | prefix, target) - lam * log P_sup(token | prefix)
    with the suppressor the probability-space mean over distractors. Tokens the
    suppressor gives zero probability but the emitter does not are clamped to
    the floor so the score stays finite.
    """
    vocab = speaker.vocab
    eos = vocab.eos_id
    lam = config.lam
    log_floor = float(np.log(SUPPRESSOR_FLOOR))
    live = [Hypothesis(tokens=())]
    completed: list[Hypothesis] = []
    steps: list[dict] | None = [] if trace else None
    for step in range(config.max_len):
        if not live:
            break
        prefixes = [Caption(b.tokens, eos) for b in live]
        emit_dists = speaker.next_token_logprobs_batch(context.target, prefixes)
        if lam != 0.0:
            sup_dists = [
                speaker.next_token_logprobs_batch(d, prefixes) for d in context.distractors
            ]
        children: list[Hypothesis] = []
        for b, beam in enumerate(live):
            emit = emit_dists[b].logp
            if lam != 0.0:
                stack = np.stack([per_beam[b].logp for per_beam in sup_dists])
                sup = _log_mean_columns(stack)
                LogDistribution(sup)  # the mixture must itself be a distribution
                VALIDATION_COUNTS["suppressor"] += 1
                sup = np.where((sup == -np.inf) & (emit != -np.inf), log_floor, sup)
                with np.errstate(invalid="ignore"):  # -inf emitter rows are skipped below
                    increments = emit - lam * sup
            else:
                increments = emit
            for t in np.flatnonzero(emit != -np.inf):
                t = int(t)
                children.append(
                    Hypothesis(
                        tokens=beam.tokens + (t,),
                        speaker_logp=beam.speaker_logp + float(emit[t]),
                        combined_score=beam.combined_score + float(increments[t]),
                        finished=(t == eos),
                    )
                )
        newly = [c for c in children if c.finished]
        completed.extend(newly)
        live = _rank([c for c in children if not c.finished])[: config.beam_width]
        if steps is not None:
            steps.append(_trace_entry(step, vocab, children, live, newly))
    if not completed:
        raise ValueError("no completed caption within max_len")
    return _result(_rank(completed)[0], eos, steps)


def incre_rsa_decode(speaker: SpeakerScorer, context: RefGameContext,
                     config: DecodeConfig, prior: ListenerPosterior | None = None,
                     trace: bool = False) -> DecodeResult:
    """Beam search scored by speaker plus lam * log Bayesian target posterior.

    The posterior over items is the prior reweighted by each item's likelihood
    of the full prefix; likelihood vectors accumulate step by step, which gives
    the same values as recomputing from the whole prefix.
    """
    vocab = speaker.vocab
    eos = vocab.eos_id
    lam = config.lam
    n_items = len(context.items)
    if prior is None:
        prior = uniform_posterior(n_items)
    if len(prior) != n_items:
        raise ValueError("prior dimension must match the context")
    live = [(Hypothesis(tokens=()), np.zeros(n_items))]
    completed: list[Hypothesis] = []
    steps: list[dict] | None = [] if trace else None
    for step in range(config.max_len):
        if not live:
            break
        prefixes = [Caption(b.tokens, eos) for b, _ in live]
        item_dists = [
            speaker.next_token_logprobs_batch(i, prefixes) for i in context.items
        ]
        children: list[tuple[Hypothesis, np.ndarray]] = []
        for b, (beam, loglik) in enumerate(live):
            stack = np.stack([item_dists[k][b].logp for k in range(n_items)])
            for t in np.flatnonzero(stack[0] != -np.inf):
                t = int(t)
                new_loglik = loglik + stack[:, t]
                posterior = ListenerPosterior.from_scores(prior.logp + new_loglik)
                slp = beam.speaker_logp + float(stack[0, t])
                llt = posterior.log_target
                children.append(
                    (
                        Hypothesis(
                            tokens=beam.tokens + (t,),
                            speaker_logp=slp,
                            listener_log_target=llt,
                            combined_score=slp + lam * llt,
                            finished=(t == eos),
                        ),
                        new_loglik,
                    )
                )
        newly = [c for c, _ in children if c.finished]
        completed.extend(newly)
        ranked = sorted(
            (c for c in children if not c[0].finished),
            key=lambda pair: (-pair[0].combined_score, -pair[0].speaker_logp, pair[0].tokens),
        )
        live = ranked[: config.beam_width]
        if steps is not None:
            steps.append(_trace_entry(step, vocab, [c for c, _ in children], [c for c, _ in live], newly))
    if not completed:
        raise ValueError("no completed caption within max_len")
    return _result(_rank(completed)[0], eos, steps)


def run_method(spec: MethodSpec, speaker: SpeakerScorer, sim: SimilarityScorer | None,
               context: RefGameContext, config: DecodeConfig,
               prior: ListenerPosterior | None = None, trace: bool = False) -> DecodeResult:
    """Dispatch one decode according to a MethodSpec (its lam wins)."""
    cfg = replace(config, lam=spec.lam)
    if spec.method is Method.BASE:
        return beam_search_base(speaker, context.target, cfg, trace=trace)[0]
    if spec.method is Method.PICL:
        return picl_decode(speaker, sim, context, cfg, trace=trace)
    if spec.method is Method.ES:
        return es_decode(speaker, context, cfg, trace=trace)
    if spec.method is Method.INCRE_RSA:
        return incre_rsa_decode(speaker, context, cfg, prior=prior, trace=trace)
    if spec.method is Method.PICL_FULL_RERANK:
        return picl_full_rerank(speaker, sim, context, cfg, trace=trace)
    if spec.method is Method.PICL_NO_DISTRACTORS:
        return picl_no_distractors(speaker, sim, context, cfg, trace=trace)
    raise ValueError(f"unknown method: {spec.method}")
