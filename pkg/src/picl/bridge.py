"""Client for the line-delimited scorer protocol (v1).

External processes can serve the speaker / similarity / language-model roles
over newline-framed UTF-8 JSON, either on the stdio of a child process or a
TCP socket. The client serializes writes, demultiplexes responses by id from a
reader thread, and enforces an in-flight window, so it is safe to share across
decode workers. Timeouts surface as errors; requests are never retried and
responses are matched strictly by id.

Wire shapes (see PROTOCOL.md for byte-exact examples):

  request   {"id": N, "kind": K, "payload": {...}}
  response  {"id": N, "result": {...}} | {"id": N, "error": "msg"}

Kinds: handshake, speaker_next, similarity, lm_score. Batch payloads are
{"batch": [single, ...]} and are answered with {"batch": [result, ...]} in
input order.
"""

from __future__ import annotations

import json
import math
import re
import shlex
import socket
import subprocess
import threading

import numpy as np

from .core import NORM_TOL, Caption, ItemId, LogDistribution, Vocabulary, logsumexp
from .evaluation import LanguageModelScorer
from .listeners import SimilarityScorer
from .speakers import SpeakerScorer

PROTOCOL_VERSION = 1
LN2 = math.log(2.0)

_TCP_RE = re.compile(r"^[\w.\-]+:\d+$")


class BridgeError(RuntimeError):
    pass


class BridgeTimeoutError(BridgeError):
    pass


class BridgeProtocolError(BridgeError):
    """Schema violation; the connection is poisoned afterwards."""


class _Pending:
    __slots__ = ("event", "response")

    def __init__(self):
        self.event = threading.Event()
        self.response = None


class BridgeClient:
    """One protocol-v1 connection, usable as any advertised scorer role."""

    def __init__(self, reader, writer, timeout: float = 30.0, window: int = 32,
                 on_close=None):
        self._reader = reader
        self._writer = writer
        self._timeout = timeout
        self._window = threading.BoundedSemaphore(window)
        self._write_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._pending: dict[int, _Pending] = {}
        self._next_id = 0
        self._poisoned: str | None = None
        self._closed = False
        self._on_close = on_close
        self.capabilities: frozenset[str] = frozenset()
        self.vocab: Vocabulary | None = None
        self._reader_thread = threading.Thread(target=self._read_loop, daemon=True)
        self._reader_thread.start()
        self._handshake()

    # -- connection management -------------------------------------------------

    @classmethod
    def connect(cls, endpoint: str, timeout: float = 30.0, window: int = 32) -> BridgeClient:
        """Connect to "host:port" or spawn `endpoint` as a child process."""
        if _TCP_RE.match(endpoint):
            host, port = endpoint.rsplit(":", 1)
            sock = socket.create_connection((host, int(port)), timeout=timeout)
            sock.settimeout(None)
            reader = sock.makefile("r", encoding="utf-8")
            writer = sock.makefile("w", encoding="utf-8")
            return cls(reader, writer, timeout=timeout, window=window,
                       on_close=sock.close)
        proc = subprocess.Popen(
            shlex.split(endpoint), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, encoding="utf-8", bufsize=1,
        )

        def shutdown():
            proc.stdin.close()
            proc.wait(timeout=10)

        return cls(proc.stdout, proc.stdin, timeout=timeout, window=window,
                   on_close=shutdown)

    def close(self) -> None:
        with self._state_lock:
            if self._closed:
                return
            self._closed = True
        try:
            self._writer.close()
        except OSError:
            pass
        if self._on_close is not None:
            try:
                self._on_close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- core call machinery ---------------------------------------------------

    def _read_loop(self):
        while True:
            try:
                line = self._reader.readline()
            except (OSError, ValueError):
                break
            if not line:
                break
            try:
                message = json.loads(line)
                rid = message["id"]
            except (json.JSONDecodeError, KeyError, TypeError):
                self._poison("malformed response line")
                return
            with self._state_lock:
                if not isinstance(rid, int) or rid >= self._next_id:
                    pass_poison = True
                else:
                    pass_poison = False
                    slot = self._pending.pop(rid, None)
            if pass_poison:
                self._poison(f"response id {rid!r} matches no issued request")
                return
            if slot is not None:  # late responses for timed-out ids are dropped
                slot.response = message
                slot.event.set()
        self._poison("connection closed by server")

    def _poison(self, reason: str):
        with self._state_lock:
            if self._poisoned is None:
                self._poisoned = reason
            pending = list(self._pending.values())
            self._pending.clear()
        for slot in pending:
            slot.event.set()

    def call(self, kind: str, payload: dict, timeout: float | None = None) -> dict:
        """Issue one request and wait for its matching response."""
        if kind != "handshake" and kind not in self.capabilities:
            raise BridgeError(f"server does not advertise capability {kind!r}")
        return self._call_unchecked(kind, payload, timeout)

    def _call_unchecked(self, kind: str, payload: dict, timeout: float | None = None) -> dict:
        deadline = self._timeout if timeout is None else timeout
        if self._poisoned:
            raise BridgeProtocolError(f"connection poisoned: {self._poisoned}")
        with self._window:
            slot = _Pending()
            with self._state_lock:
                rid = self._next_id
                self._next_id += 1
                self._pending[rid] = slot
            line = json.dumps({"id": rid, "kind": kind, "payload": payload},
                              separators=(",", ":")) + "\n"
            try:
                with self._write_lock:
                    self._writer.write(line)
                    self._writer.flush()
            except (OSError, ValueError) as exc:
                with self._state_lock:
                    self._pending.pop(rid, None)
                raise BridgeError(f"write failed: {exc}") from exc
            if not slot.event.wait(deadline):
                with self._state_lock:
                    self._pending.pop(rid, None)
                raise BridgeTimeoutError(
                    f"no response to request {rid} ({kind}) within {deadline}s"
                )
        if slot.response is None:
            raise BridgeProtocolError(f"connection poisoned: {self._poisoned}")
        if "error" in slot.response and slot.response["error"] is not None:
            raise BridgeError(f"server error: {slot.response['error']}")
        result = slot.response.get("result")
        if not isinstance(result, dict):
            self._poison("response carries no result object")
            raise BridgeProtocolError("response carries no result object")
        return result

    def _handshake(self):
        result = self._call_unchecked("handshake", {"version": PROTOCOL_VERSION})
        version = result.get("version")
        if version != PROTOCOL_VERSION:
            self.close()
            raise BridgeError(f"unsupported protocol version: {version!r}")
        self.capabilities = frozenset(result.get("capabilities", ()))
        vocab = result.get("vocab")
        if vocab is not None:
            self.vocab = Vocabulary(words=tuple(vocab["words"]), eos_id=vocab["eos_id"])

    # -- scorer adapters ---------------------------------------------------------

    def speaker(self, vocab: Vocabulary | None = None, top_k: int | None = None) -> BridgeSpeaker:
        return BridgeSpeaker(self, vocab=vocab, top_k=top_k)

    def similarity(self, tau: float = 1.0) -> BridgeSimilarity:
        return BridgeSimilarity(self, tau=tau)

    def lm(self, vocab: Vocabulary | None = None) -> BridgeLM:
        return BridgeLM(self, vocab=vocab)


def _densify(result: dict, vocab_size: int) -> LogDistribution:
    """Expand a sparse top-K speaker response to a full log-distribution.

    Unreturned tokens share the remainder mass uniformly (other_logp of null
    means no remainder). The sparse entries must normalize within 1e-6; a
    vector that is already normalized to distribution tolerance passes through
    without renormalization so exact servers round-trip bit-identically.
    """
    tokens = result["tokens"]
    logps = result["logps"]
    raw_other = result.get("other_logp")
    other = -np.inf if raw_other is None else float(raw_other)
    if len(tokens) != len(logps):
        raise BridgeProtocolError("tokens/logps length mismatch")
    mass = np.asarray([other] + [float(lp) for lp in logps], dtype=float)
    total = np.logaddexp.reduce(mass)
    if not abs(total) <= 1e-6:
        raise BridgeProtocolError(f"sparse speaker response normalizes to {total!r}")
    n_rest = vocab_size - len(tokens)
    if n_rest < 0:
        raise BridgeProtocolError("more tokens than the vocabulary holds")
    if n_rest == 0:
        fill = -np.inf
        if other != -np.inf:
            raise BridgeProtocolError("full-vocabulary response with leftover mass")
    else:
        fill = other - math.log(n_rest) if other != -np.inf else -np.inf
    dense = np.full(vocab_size, fill)
    for tok, lp in zip(tokens, logps):
        if not 0 <= tok < vocab_size:
            raise BridgeProtocolError(f"token id {tok} out of range")
        dense[tok] = float(lp)
    if abs(logsumexp(dense)) <= NORM_TOL and np.max(dense) <= 0.0:
        return LogDistribution(dense)
    return LogDistribution.from_scores(dense)


class BridgeSpeaker(SpeakerScorer):
    def __init__(self, client: BridgeClient, vocab: Vocabulary | None = None,
                 top_k: int | None = None):
        if "speaker_next" not in client.capabilities:
            raise BridgeError("server does not advertise capability 'speaker_next'")
        self._client = client
        self._vocab = vocab or client.vocab
        if self._vocab is None:
            raise BridgeError("server advertised no vocabulary; pass one explicitly")
        self.top_k = top_k or self._vocab.size

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    def next_token_logprobs(self, item: ItemId, prefix: Caption) -> LogDistribution:
        return self.next_token_logprobs_batch(item, [prefix])[0]

    def next_token_logprobs_batch(self, item: ItemId, prefixes) -> list[LogDistribution]:
        queries = [
            {"item": item, "prefix": self._vocab.text(p.tokens), "top_k": self.top_k}
            for p in prefixes
        ]
        result = self._client.call("speaker_next", {"batch": queries})
        batch = result.get("batch")
        if not isinstance(batch, list) or len(batch) != len(queries):
            raise BridgeProtocolError("speaker_next batch result shape mismatch")
        return [_densify(r, self._vocab.size) for r in batch]


class BridgeSimilarity(SimilarityScorer):
    def __init__(self, client: BridgeClient, tau: float = 1.0):
        if "similarity" not in client.capabilities:
            raise BridgeError("server does not advertise capability 'similarity'")
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self._client = client
        self.tau = tau

    def similarity(self, item: ItemId, text: str) -> float:
        return float(self.batch_similarity([text], [item])[0, 0])

    def batch_similarity(self, texts, items) -> np.ndarray:
        items = list(items)
        queries = [{"items": items, "text": t} for t in texts]
        result = self._client.call("similarity", {"batch": queries})
        batch = result.get("batch")
        if not isinstance(batch, list) or len(batch) != len(queries):
            raise BridgeProtocolError("similarity batch result shape mismatch")
        out = np.empty((len(texts), len(items)))
        for i, entry in enumerate(batch):
            sims = entry["similarities"]
            if len(sims) != len(items):
                raise BridgeProtocolError("similarity vector length mismatch")
            out[i] = sims
        return out


class BridgeLM(LanguageModelScorer):
    """Fluency scorer over the wire; the server reports natural-log values."""

    def __init__(self, client: BridgeClient, vocab: Vocabulary | None = None):
        if "lm_score" not in client.capabilities:
            raise BridgeError("server does not advertise capability 'lm_score'")
        self._client = client
        self._vocab = vocab or client.vocab
        if self._vocab is None:
            raise BridgeError("server advertised no vocabulary; pass one explicitly")

    def token_log2probs(self, caption: Caption) -> np.ndarray:
        result = self._client.call("lm_score", {"text": self._vocab.text(caption.tokens)})
        lls = np.asarray(result["token_logps"], dtype=float)
        if lls.size == 0:
            raise BridgeProtocolError("lm_score returned no token scores")
        return lls / LN2
