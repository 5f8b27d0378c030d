"""Shared fixtures: hand-built micro worlds and the frozen benchmark world.

Benchmark constants are committed together with the margins the acceptance
suite asserts; regenerating with the same constants must reproduce them.
"""

from __future__ import annotations

import pytest

from picl.core import DecodeConfig, RefGameContext
from picl.evaluation import ScorerSet, train_bigram_lm
from picl.listeners import ToySimilarity, make_eval_listener
from picl.speakers import ToyLexiconSpeaker, ToyWorld, generate_toy_world

# Frozen benchmark parameters (seed committed with the asserted margins).
BENCH_SEED = 7
BENCH_N_SETS = 100
BENCH_N_ATTRIBUTES = 10
BENCH_OVERLAP_MIN = 3
BENCH_EPS = 0.15
BENCH_P_STOP = 0.3
BENCH_PERTURB = 0.3
BENCH_EVAL_SEED = 1007
BENCH_LM_K = 0.5
BENCH_CONFIG = DecodeConfig(beam_width=16, pool_size=256, max_len=6, seed=BENCH_SEED)


@pytest.fixture(scope="session")
def bench_world() -> ToyWorld:
    return generate_toy_world(
        n_sets=BENCH_N_SETS,
        n_attributes=BENCH_N_ATTRIBUTES,
        overlap_min=BENCH_OVERLAP_MIN,
        seed=BENCH_SEED,
    )


@pytest.fixture(scope="session")
def bench_scorers(bench_world) -> ScorerSet:
    speaker = ToyLexiconSpeaker(bench_world, eps=BENCH_EPS, p_stop=BENCH_P_STOP)
    decode_sim = ToySimilarity(bench_world)
    eval_sim = make_eval_listener(bench_world, BENCH_PERTURB, BENCH_EVAL_SEED)
    lm = train_bigram_lm(
        list(bench_world.reference_captions.values()),
        k=BENCH_LM_K,
        vocab_size=bench_world.vocabulary.size,
    )
    return ScorerSet(speaker=speaker, decode_sim=decode_sim, eval_sim=eval_sim, lm=lm)


@pytest.fixture(scope="session")
def bench_validation(bench_world) -> list[RefGameContext]:
    return list(bench_world.problem_sets[: BENCH_N_SETS // 2])


@pytest.fixture(scope="session")
def bench_test(bench_world) -> list[RefGameContext]:
    return list(bench_world.problem_sets[BENCH_N_SETS // 2 :])
