import math

import numpy as np
import pytest

from picl.core import VALIDATION_COUNTS, Caption, DecodeConfig, RefGameContext, logsumexp
from picl.decoding import (
    Method,
    MethodSpec,
    _log_mean_columns,
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
from picl.listeners import ListenerPosterior, ToySimilarity
from picl.speakers import ToyLexiconSpeaker, generate_toy_world, sequence_logprob

from helpers import manual_world


def enumerate_completions(speaker, item, max_len):
    """Every complete caption reachable within max_len, with its log-prob."""
    eos = speaker.vocab.eos_id
    found = []

    def rec(prefix, slp):
        if len(prefix) >= max_len:
            return
        logp = speaker.next_token_logprobs(item, Caption(prefix, eos)).logp
        for t in np.flatnonzero(logp != -np.inf):
            t = int(t)
            child_slp = slp + float(logp[t])
            if t == eos:
                found.append((prefix + (t,), child_slp))
            else:
                rec(prefix + (t,), child_slp)

    rec((), 0.0)
    return found


def small_world(seed, n_sets=3):
    return generate_toy_world(n_sets=n_sets, n_attributes=5, overlap_min=1, seed=seed,
                              n_fillers=2)


class TestBeamSearchBase:
    def test_forced_path(self):
        world = manual_world({"A": {"w"}}, attributes=("w", "x"))
        speaker = ToyLexiconSpeaker(world, eps=0.0, p_stop=0.5)
        results = beam_search_base(speaker, "A", DecodeConfig(beam_width=4, max_len=6))
        # w is the only option, then EOS is forced
        assert results[0].caption.tokens == (0, 2)
        assert results[0].speaker_logp == pytest.approx(0.0)

    def test_beam_width_one_is_greedy(self):
        world = small_world(3)
        speaker = ToyLexiconSpeaker(world, eps=0.2, p_stop=0.3)
        item = world.problem_sets[0].target
        cfg = DecodeConfig(beam_width=1, pool_size=1, max_len=6)
        got = beam_search_base(speaker, item, cfg)[0].caption.tokens

        eos = speaker.vocab.eos_id
        prefix, slp = (), 0.0
        for _ in range(6):
            logp = speaker.next_token_logprobs(item, Caption(prefix, eos)).logp
            t = int(min(np.flatnonzero(logp == logp.max())))
            prefix += (t,)
            if t == eos:
                break
        assert got == prefix

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_exhaustive_enumeration(self, seed):
        world = small_world(seed)
        speaker = ToyLexiconSpeaker(world, eps=0.2, p_stop=0.35)
        item = world.problem_sets[0].target
        assert speaker.vocab.size ** 4 <= 10**5
        cfg = DecodeConfig(beam_width=4, pool_size=8, max_len=4)
        results = beam_search_base(speaker, item, cfg)
        ranked = sorted(enumerate_completions(speaker, item, 4),
                        key=lambda p: (-p[1], p[0]))[:4]
        assert [r.caption.tokens for r in results] == [tokens for tokens, _ in ranked]
        for r, (_, lp) in zip(results, ranked):
            assert r.speaker_logp == pytest.approx(lp, abs=1e-12)

    def test_no_completed_caption_errors(self):
        world = manual_world({"A": {"w"}}, attributes=("w", "x"))
        speaker = ToyLexiconSpeaker(world, eps=0.0, p_stop=0.5)
        with pytest.raises(ValueError, match="no completed caption"):
            beam_search_base(speaker, "A", DecodeConfig(beam_width=2, max_len=1))

    def test_deterministic(self):
        world = small_world(5)
        speaker = ToyLexiconSpeaker(world, eps=0.25, p_stop=0.3)
        item = world.problem_sets[0].target
        cfg = DecodeConfig(beam_width=4, pool_size=16, max_len=5)
        a = beam_search_base(speaker, item, cfg)
        b = beam_search_base(speaker, item, cfg)
        assert [r.caption for r in a] == [r.caption for r in b]
        assert [r.speaker_logp for r in a] == [r.speaker_logp for r in b]


def pragmatic_setup(seed, eps=0.2, mode="cosine"):
    world = small_world(seed)
    speaker = ToyLexiconSpeaker(world, eps=eps, p_stop=0.35)
    sim = ToySimilarity(world, mode=mode)
    return world, speaker, sim


class TestPiclDecode:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_lambda_zero_reduces_to_base(self, seed):
        world, speaker, sim = pragmatic_setup(seed)
        ctx = world.problem_sets[0]
        cfg = DecodeConfig(lam=0.0, beam_width=4, pool_size=12, max_len=5)
        base = beam_search_base(speaker, ctx.target, cfg)[0]
        prag = picl_decode(speaker, sim, ctx, cfg)
        assert prag.caption.tokens == base.caption.tokens

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_full_pool_matches_exact_oracle(self, seed):
        world, speaker, sim = pragmatic_setup(seed)
        ctx = world.problem_sets[0]
        vocab = speaker.vocab.size
        assert vocab <= 12
        cfg = DecodeConfig(lam=0.6, beam_width=4, pool_size=vocab * 4, max_len=5)
        a = picl_decode(speaker, sim, ctx, cfg)
        b = exact_pragmatic_decode(speaker, sim, ctx, cfg)
        assert a.caption.tokens == b.caption.tokens
        assert a.combined_score == pytest.approx(b.combined_score, abs=0)

    def test_lambda_one_retains_max_posterior_candidates(self):
        world, speaker, sim = pragmatic_setup(7)
        ctx = world.problem_sets[0]
        cfg = DecodeConfig(lam=1.0, beam_width=3, pool_size=6, max_len=4)
        result = picl_decode(speaker, sim, ctx, cfg, trace=True)
        assert result.trace
        for step in result.trace:
            pool = [c for c in step["pool"] if not c["finished"]]
            want = sorted(
                pool,
                key=lambda c: (-c["listener_log_target"], -c["speaker_logp"], tuple(c["tokens"])),
            )[:3]
            assert [c["tokens"] for c in step["survivors"]] == [c["tokens"] for c in want]

    def test_combined_score_non_decreasing_in_pool_size(self):
        world, speaker, sim = pragmatic_setup(11, eps=0.25)
        cfg0 = DecodeConfig(lam=0.5, beam_width=4, max_len=5)
        for ctx in world.problem_sets:
            last = -math.inf
            for n in (4, 6, 8, 12, 16, 24, 48):
                cfg = DecodeConfig(lam=0.5, beam_width=4, pool_size=n, max_len=5)
                score = picl_decode(speaker, sim, ctx, cfg).combined_score
                assert score >= last - 1e-12
                last = score
        del cfg0

    def test_argmax_invariant_to_similarity_scale(self):
        world = small_world(13)
        speaker = ToyLexiconSpeaker(world, eps=0.2, p_stop=0.35)
        ctx = world.problem_sets[0]
        cfg = DecodeConfig(lam=0.7, beam_width=4, pool_size=16, max_len=5)
        plain = ToySimilarity(world, mode="dot", tau=1.0)
        scaled = ToySimilarity(world, mode="dot", tau=4.0,
                               weights=np.full(world.n_attributes, 4.0))
        a = picl_decode(speaker, plain, ctx, cfg)
        b = picl_decode(speaker, scaled, ctx, cfg)
        assert a.caption.tokens == b.caption.tokens


class TestExactOracle:
    def test_guard_refuses_large_expansion(self):
        world, speaker, sim = pragmatic_setup(0)
        ctx = world.problem_sets[0]
        cfg = DecodeConfig(beam_width=20000, pool_size=20000, max_len=3)
        with pytest.raises(ValueError, match="sub-sampled"):
            exact_pragmatic_decode(speaker, sim, ctx, cfg)

    def test_lambda_zero_is_base(self):
        world, speaker, sim = pragmatic_setup(2)
        ctx = world.problem_sets[0]
        cfg = DecodeConfig(lam=0.0, beam_width=4, pool_size=8, max_len=5)
        assert (
            exact_pragmatic_decode(speaker, sim, ctx, cfg).caption.tokens
            == beam_search_base(speaker, ctx.target, cfg)[0].caption.tokens
        )

    def test_indistinguishable_items_reduce_to_base(self):
        # one distractor with identical features: the listener is uniform at
        # every step, so any lambda decodes the base caption
        world = manual_world({"A": {"w", "x"}, "B": {"w", "x"}}, attributes=("w", "x", "y"))
        speaker = ToyLexiconSpeaker(world, eps=0.2, p_stop=0.4)
        sim = ToySimilarity(world)
        ctx = RefGameContext("A", ("B",))
        for lam in (0.0, 0.5, 1.0):
            cfg = DecodeConfig(lam=lam, beam_width=3, pool_size=18, max_len=4)
            got = exact_pragmatic_decode(speaker, sim, ctx, cfg)
            base = beam_search_base(speaker, "A", cfg)[0]
            assert got.caption.tokens == base.caption.tokens


class TestEsDecode:
    def test_log_mean_single_row_is_identity(self):
        row = np.log(np.array([0.8, 0.2]))
        got = _log_mean_columns(row[None, :])
        assert got == pytest.approx(row, abs=1e-12)

    def test_log_mean_two_rows_arithmetic(self):
        stack = np.log(np.array([[0.8, 0.2], [0.4, 0.6]]))
        got = np.exp(_log_mean_columns(stack))
        assert got == pytest.approx([0.6, 0.4], abs=1e-12)

    def test_log_mean_handles_hard_zeros(self):
        with np.errstate(divide="ignore"):
            stack = np.log(np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0]]))
        got = np.exp(_log_mean_columns(stack))
        assert got == pytest.approx([0.75, 0.25, 0.0], abs=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_lambda_zero_reduces_to_base(self, seed):
        world, speaker, _ = pragmatic_setup(seed)
        ctx = world.problem_sets[0]
        cfg = DecodeConfig(lam=0.0, beam_width=4, max_len=5)
        assert (
            es_decode(speaker, ctx, cfg).caption.tokens
            == beam_search_base(speaker, ctx.target, cfg)[0].caption.tokens
        )

    def test_suppressor_validated_during_decode(self):
        world, speaker, _ = pragmatic_setup(1)
        ctx = world.problem_sets[0]
        before = VALIDATION_COUNTS["suppressor"]
        es_decode(speaker, ctx, DecodeConfig(lam=0.4, beam_width=4, max_len=5))
        assert VALIDATION_COUNTS["suppressor"] > before

    def test_prefers_tokens_distractors_cannot_say(self):
        # "w" is unique to the target; with the suppressor floor it dominates
        world = manual_world(
            {"A": {"w", "x"}, "B": {"x"}, "C": {"x"}},
            attributes=("w", "x"),
        )
        speaker = ToyLexiconSpeaker(world, eps=0.0, p_stop=0.5)
        ctx = RefGameContext("A", ("B", "C"))
        cfg = DecodeConfig(lam=0.5, beam_width=2, max_len=4)
        result = es_decode(speaker, ctx, cfg)
        assert result.caption.tokens[0] == world.vocabulary.word_ids["w"]

    def test_suppressor_mean_in_probability_space(self):
        # hand-check one step: score(t) = log P_A(t) - lam * log mean(P_B(t), P_C(t))
        world = manual_world(
            {"A": {"w", "x"}, "B": {"w"}, "C": {"x"}},
            attributes=("w", "x"),
        )
        speaker = ToyLexiconSpeaker(world, eps=0.2, p_stop=0.5)
        ctx = RefGameContext("A", ("B", "C"))
        lam = 0.7
        cfg = DecodeConfig(lam=lam, beam_width=4, max_len=2)
        result = es_decode(speaker, ctx, cfg, trace=True)
        empty = Caption.empty(world.vocabulary.eos_id)
        emit = speaker.next_token_logprobs("A", empty).probs
        sup = 0.5 * (
            speaker.next_token_logprobs("B", empty).probs
            + speaker.next_token_logprobs("C", empty).probs
        )
        first = result.caption.tokens[0]
        want_first_step = math.log(emit[first]) - lam * math.log(sup[first])
        step_scores = {tuple(c["tokens"]): c["combined_score"] for c in result.trace[0]["pool"]}
        assert step_scores[(first,)] == pytest.approx(want_first_step, abs=1e-12)


class TestIncreRsa:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_lambda_zero_reduces_to_base(self, seed):
        world, speaker, _ = pragmatic_setup(seed)
        ctx = world.problem_sets[0]
        cfg = DecodeConfig(lam=0.0, beam_width=4, max_len=5)
        assert (
            incre_rsa_decode(speaker, ctx, cfg).caption.tokens
            == beam_search_base(speaker, ctx.target, cfg)[0].caption.tokens
        )

    def test_identical_items_reduce_to_base(self):
        world = manual_world(
            {"A": {"w", "x"}, "B": {"w", "x"}, "C": {"w", "x"}},
            attributes=("w", "x", "y"),
        )
        speaker = ToyLexiconSpeaker(world, eps=0.15, p_stop=0.4)
        ctx = RefGameContext("A", ("B", "C"))
        for lam in (0.5, 1.0, 2.0):
            cfg = DecodeConfig(lam=lam, beam_width=3, max_len=4)
            got = incre_rsa_decode(speaker, ctx, cfg)
            base = beam_search_base(speaker, "A", cfg)[0]
            assert got.caption.tokens == base.caption.tokens

    def test_two_item_brute_force(self):
        world = manual_world(
            {"A": {"w", "x"}, "B": {"x", "y"}},
            attributes=("w", "x", "y"),
        )
        speaker = ToyLexiconSpeaker(world, eps=0.3, p_stop=0.4)
        ctx = RefGameContext("A", ("B",))
        lam = 1.5
        cfg = DecodeConfig(lam=lam, beam_width=world.vocabulary.size, max_len=2)
        got = incre_rsa_decode(speaker, ctx, cfg)

        best = None
        for tokens, slp in enumerate_completions(speaker, "A", 2):
            logliks = np.array([
                sequence_logprob(speaker, i, Caption(tokens, world.vocabulary.eos_id))
                for i in ctx.items
            ])
            llt = float((logliks - logsumexp(logliks))[0])
            combined = slp + lam * llt
            key = (-combined, -slp, tokens)
            if best is None or key < best[0]:
                best = (key, tokens, combined)
        assert got.caption.tokens == best[1]
        assert got.combined_score == pytest.approx(best[2], abs=1e-9)

    def test_prior_dimension_checked(self):
        world, speaker, _ = pragmatic_setup(0)
        ctx = world.problem_sets[0]
        with pytest.raises(ValueError, match="dimension"):
            incre_rsa_decode(speaker, ctx, DecodeConfig(lam=0.5),
                             prior=ListenerPosterior.from_scores(np.zeros(3)))


class TestFullRerank:
    def test_lambda_zero_is_top_base_caption(self):
        world, speaker, sim = pragmatic_setup(4)
        ctx = world.problem_sets[0]
        cfg = DecodeConfig(lam=0.0, beam_width=3, pool_size=16, max_len=5)
        got = picl_full_rerank(speaker, sim, ctx, cfg)
        base = beam_search_base(speaker, ctx.target, cfg)[0]
        assert got.caption.tokens == base.caption.tokens

    def test_singleton_candidate_pool(self):
        world = manual_world({"A": {"w"}, "B": {"x"}}, attributes=("w", "x"))
        speaker = ToyLexiconSpeaker(world, eps=0.0, p_stop=0.5)
        sim = ToySimilarity(world)
        ctx = RefGameContext("A", ("B",))
        for lam in (0.0, 0.5, 1.0):
            cfg = DecodeConfig(lam=lam, beam_width=2, pool_size=4, max_len=4)
            got = picl_full_rerank(speaker, sim, ctx, cfg)
            assert got.caption.tokens == (0, 2)


class TestNoDistractors:
    def test_lambda_zero_reduces_to_base(self):
        world, speaker, sim = pragmatic_setup(6)
        ctx = world.problem_sets[0]
        cfg = DecodeConfig(lam=0.0, beam_width=4, pool_size=12, max_len=5)
        got = picl_no_distractors(speaker, sim, ctx, cfg)
        base = beam_search_base(speaker, ctx.target, cfg)[0]
        assert got.caption.tokens == base.caption.tokens

    def test_uniform_pool_similarity_falls_back_to_speaker_order(self):
        world, speaker, _ = pragmatic_setup(6)
        ctx = world.problem_sets[0]
        flat = ToySimilarity(world, weights=np.zeros(world.n_attributes))
        cfg = DecodeConfig(lam=0.6, beam_width=4, pool_size=12, max_len=5)
        got = picl_no_distractors(speaker, flat, ctx, cfg)
        base = beam_search_base(speaker, ctx.target, cfg)[0]
        assert got.caption.tokens == base.caption.tokens


class TestMethodSpec:
    def test_lambda_ranges(self):
        assert lambda_range(Method.PICL) == (0.0, 1.0)
        assert lambda_range(Method.ES) == (0.0, 1.0)
        assert lambda_range(Method.INCRE_RSA) == (0.0, 2.0)
        MethodSpec(Method.INCRE_RSA, 1.7)
        with pytest.raises(ValueError, match="outside"):
            MethodSpec(Method.PICL, 1.1)
        with pytest.raises(ValueError, match="outside"):
            MethodSpec(Method.ES, -0.1)
        MethodSpec(Method.BASE, 5.0)  # ignored for base

    def test_run_method_dispatch(self):
        world, speaker, sim = pragmatic_setup(8)
        ctx = world.problem_sets[0]
        cfg = DecodeConfig(lam=0.123, beam_width=4, pool_size=16, max_len=5)
        direct = picl_decode(speaker, sim, ctx, DecodeConfig(lam=0.4, beam_width=4, pool_size=16, max_len=5))
        via = run_method(MethodSpec(Method.PICL, 0.4), speaker, sim, ctx, cfg)
        assert via.caption == direct.caption
        assert via.combined_score == direct.combined_score
        base_via = run_method(MethodSpec(Method.BASE), speaker, sim, ctx, cfg)
        assert base_via.caption.tokens == beam_search_base(speaker, ctx.target, cfg)[0].caption.tokens
