"""Pragmatic discriminative caption decoding and benchmark harness."""

from .core import (
    Caption,
    DecodeConfig,
    LogDistribution,
    RefGameContext,
    Vocabulary,
    compare_hypotheses,
    derive_seed,
    logsumexp,
)
from .decoding import (
    DecodeResult,
    Hypothesis,
    Method,
    MethodSpec,
    beam_search_base,
    es_decode,
    exact_pragmatic_decode,
    incre_rsa_decode,
    lambda_range,
    picl_decode,
    picl_full_rerank,
    picl_no_distractors,
    run_method,
)
from .evaluation import (
    BigramLM,
    EvalReport,
    LanguageModelScorer,
    ScorerSet,
    SweepRow,
    UniformLM,
    caption_perplexity,
    evaluate_captions,
    evaluate_method,
    retrieval_accuracy,
    tradeoff_sweep,
    train_bigram_lm,
)
from .listeners import (
    ListenerPosterior,
    SimilarityScorer,
    ToySimilarity,
    bayesian_posterior,
    listener_posterior,
    make_eval_listener,
    uniform_posterior,
)
from .speakers import (
    SpeakerScorer,
    ToyLexiconSpeaker,
    ToyWorld,
    generate_toy_world,
    load_world,
    next_token_logprobs,
    save_world,
    sequence_logprob,
    world_from_json,
    world_to_json,
)
from .tuning import (
    SearchSpec,
    SearchResult,
    TuningResult,
    coarse_to_fine_search,
    grid_points,
    mid_ppl_target,
    select_lambda_informativity,
    select_lambda_ppl_matched,
)

__all__ = [name for name in dir() if not name.startswith("_")]
