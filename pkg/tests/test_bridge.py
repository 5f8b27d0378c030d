import math
import sys
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from picl.bridge import (
    BridgeClient,
    BridgeError,
    BridgeProtocolError,
    BridgeTimeoutError,
    _densify,
)
from picl.core import DecodeConfig
from picl.decoding import Method, MethodSpec, run_method
from picl.evaluation import caption_perplexity
from picl.speakers import generate_toy_world, save_world

from conftest import BENCH_EPS, BENCH_P_STOP
from loopback_server import ToyBundle, start_loopback

SERVER = Path(__file__).parent / "loopback_server.py"


@pytest.fixture(scope="module")
def world():
    return generate_toy_world(n_sets=6, n_attributes=6, overlap_min=2, seed=51,
                              n_fillers=2)


@pytest.fixture
def client(world):
    bundle = ToyBundle(world)
    c = start_loopback(bundle)
    c.bundle = bundle
    yield c
    c.close()


class TestHandshake:
    def test_capabilities_advertised(self, client):
        assert client.capabilities == {"speaker_next", "similarity", "lm_score"}
        assert client.vocab is not None
        assert client.vocab.words[client.vocab.eos_id] == "</s>"

    def test_wrong_version_refused(self, world):
        with pytest.raises(BridgeError, match="unsupported protocol version"):
            start_loopback(ToyBundle(world, advertise_version=2))

    def test_missing_capability_rejected_client_side(self, world):
        c = start_loopback(ToyBundle(world, capabilities=("similarity",)))
        with pytest.raises(BridgeError, match="speaker_next"):
            c.speaker()
        with pytest.raises(BridgeError, match="lm_score"):
            c.lm()
        c.similarity()  # advertised one works
        c.close()

    def test_reconnect_gets_fresh_id_sequence(self, world):
        bundle = ToyBundle(world)
        c1 = start_loopback(bundle)
        c1.similarity().similarity(world.problem_sets[0].target, "attr00")
        c1.close()
        c2 = start_loopback(ToyBundle(world))
        sim = c2.similarity()
        assert sim.similarity(world.problem_sets[0].target, "attr00") is not None
        c2.close()


class TestCalls:
    def test_similarity_vector_shape(self, client, world):
        ctx = world.problem_sets[0]
        result = client.call("similarity", {"items": list(ctx.items), "text": "attr00"})
        assert len(result["similarities"]) == 10

    def test_speaker_topk_normalizes(self, client, world):
        vocab = world.vocabulary
        result = client.call("speaker_next", {
            "item": world.problem_sets[0].target, "prefix": "", "top_k": 4,
        })
        assert len(result["tokens"]) == 4 and len(result["logps"]) == 4
        total = np.logaddexp.reduce(np.array(result["logps"] + [result["other_logp"]]))
        assert abs(total) <= 1e-6

    def test_unknown_kind_is_error_but_connection_survives(self, client, world):
        # bypass the client-side capability gate to exercise the server path
        with pytest.raises(BridgeError, match="unsupported kind"):
            client._call_unchecked("foo", {"x": 1}, timeout=2)
        # unadvertised kinds are stopped client-side before any write
        with pytest.raises(BridgeError, match="does not advertise"):
            client.call("foo", {})
        assert client.call("lm_score", {"text": "attr00"})["token_logps"]

    def test_timeout_not_retried(self, world):
        bundle = ToyBundle(world)
        c = start_loopback(bundle, delay=1.0)
        sim = c.similarity()
        with pytest.raises(BridgeTimeoutError):
            c.call("similarity", {"items": ["x"], "text": "y"}, timeout=0.05)
        time.sleep(1.2)  # let the delayed response drain; it must be discarded
        n_sim_requests = sum(r["kind"] == "similarity" for r in bundle.seen_requests)
        assert n_sim_requests == 1
        c.close()

    def test_malformed_response_poisons_connection(self, world):
        c = start_loopback(ToyBundle(world), corrupt_after=2)
        with pytest.raises(BridgeProtocolError):
            c.call("lm_score", {"text": "attr00"})
        with pytest.raises(BridgeProtocolError, match="poisoned"):
            c.call("lm_score", {"text": "attr00"})
        c.close()

    def test_shuffled_responses_match_ids(self, world):
        # window of concurrent calls answered out of order: every caller must
        # get the vector for its own text
        bundle = ToyBundle(world)
        c = start_loopback(bundle, shuffle=8)
        sim_direct = ToyBundle(world).sim
        ctx = world.problem_sets[0]
        texts = [f"attr0{i % 6}" + (" attr01" if i % 2 else "") for i in range(24)]
        results: dict[int, np.ndarray] = {}
        errors = []

        def worker(i):
            try:
                sims = c.call("similarity", {"items": list(ctx.items), "text": texts[i]})
                results[i] = np.asarray(sims["similarities"])
            except BridgeError as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(24)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=10)
        assert not errors and len(results) == 24
        for i, text in enumerate(texts):
            want = sim_direct.batch_similarity([text], ctx.items)[0]
            assert results[i] == pytest.approx(want, abs=0)
        c.close()


class TestDensify:
    def test_remainder_spread_uniformly(self):
        result = {"tokens": [0, 2], "logps": [math.log(0.5), math.log(0.3)],
                  "other_logp": math.log(0.2)}
        dist = _densify(result, 4)
        assert dist.probs[0] == pytest.approx(0.5, abs=1e-12)
        assert dist.probs[2] == pytest.approx(0.3, abs=1e-12)
        assert dist.probs[1] == pytest.approx(0.1, abs=1e-12)
        assert dist.probs[3] == pytest.approx(0.1, abs=1e-12)

    def test_full_k_is_exact(self):
        logps = np.log([0.25, 0.25, 0.5])
        result = {"tokens": [2, 0, 1], "logps": [logps[2], logps[0], logps[1]],
                  "other_logp": None}
        dist = _densify(result, 3)
        assert np.array_equal(dist.logp, logps)  # bit-exact pass-through

    def test_bad_normalization_rejected(self):
        result = {"tokens": [0], "logps": [math.log(0.5)], "other_logp": math.log(0.4)}
        with pytest.raises(BridgeProtocolError, match="normalizes"):
            _densify(result, 2)


class TestSubprocessTransport:
    def test_spawned_server_round_trip(self, world, tmp_path):
        path = tmp_path / "world.json"
        save_world(world, path)
        endpoint = f"{sys.executable} {SERVER} --world {path}"
        with BridgeClient.connect(endpoint, timeout=20) as c:
            assert c.capabilities == {"speaker_next", "similarity", "lm_score"}
            sims = c.call("similarity", {
                "items": list(world.problem_sets[0].items), "text": "attr00",
            })
            assert len(sims["similarities"]) == 10

    def test_restart_after_server_exit(self, world, tmp_path):
        path = tmp_path / "world.json"
        save_world(world, path)
        endpoint = f"{sys.executable} {SERVER} --world {path}"
        c1 = BridgeClient.connect(endpoint, timeout=20)
        c1.close()
        c2 = BridgeClient.connect(endpoint, timeout=20)
        assert c2.call("lm_score", {"text": "attr00"})["token_logps"]
        c2.close()


class TestEngineEquivalence:
    @pytest.mark.parametrize("spec", [
        MethodSpec(Method.BASE, 0.0),
        MethodSpec(Method.PICL, 0.7),
        MethodSpec(Method.ES, 0.5),
        MethodSpec(Method.INCRE_RSA, 1.2),
        MethodSpec(Method.PICL_NO_DISTRACTORS, 0.6),
    ])
    def test_bridged_scorers_match_in_process(self, world, spec):
        bundle = ToyBundle(world, eps=BENCH_EPS, p_stop=BENCH_P_STOP)
        client = start_loopback(bundle)
        speaker = client.speaker()  # top_k defaults to |V|: exact transport
        sim = client.similarity()
        cfg = DecodeConfig(beam_width=4, pool_size=36, max_len=5)
        for ctx in world.problem_sets[:4]:
            local = run_method(spec, bundle.speaker, bundle.sim, ctx, cfg)
            remote = run_method(spec, speaker, sim, ctx, cfg)
            assert remote.caption.tokens == local.caption.tokens
            assert remote.combined_score == pytest.approx(local.combined_score, abs=1e-9)
        client.close()

    def test_bridged_lm_matches_in_process(self, world):
        bundle = ToyBundle(world)
        client = start_loopback(bundle)
        lm = client.lm()
        for ctx in world.problem_sets[:3]:
            cap = world.reference_captions[ctx.target]
            local = caption_perplexity(bundle.lm, cap)
            remote = caption_perplexity(lm, cap)
            assert remote == pytest.approx(local, rel=1e-12)
        client.close()
