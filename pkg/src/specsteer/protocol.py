"""The draft-verify-recover session state machine.

The edge side owns the private drafter and the recovery sampler; the
cloud side owns the large prior and the generic baseline and issues
verdicts.  ``run_session`` wires the two state machines together
in-process; the transport module reuses the exact same machines over a
byte channel, so the two execution modes are equivalent by construction
(same random streams, same draw order).
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import (
    PROB_FLOOR,
    ProtocolConfig,
    RngStreams,
    SpecSteerError,
    Vocabulary,
    greedy_pick,
    make_streams,
    sample,
    softmax,
    validate_sequence,
)

FRAME_HEADER_BYTES = 10
DRAFT_PAYLOAD_FIXED = 6   # seq_no u32 + count u16
VERDICT_PAYLOAD_FIXED = 7  # seq_no u32 + accepted u16 + flag u8


class ProtocolStateError(SpecSteerError):
    pass


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DraftBatch:
    """Uplink unit: bare token ids, nothing else."""

    seq_no: int
    token_ids: tuple[int, ...]


@dataclass(frozen=True)
class SparseSteeringPayload:
    """Top-k slice of the cloud-side steering term (prior logits minus
    beta times the generic baseline logits) at the rejected position.

    Entries are (token_id, value), sorted by descending value with
    token-id tie-break, unique ids.
    """

    entries: tuple[tuple[int, float], ...]


@dataclass(frozen=True)
class Verdict:
    seq_no: int
    accepted_count: int
    recovery: SparseSteeringPayload | None


@dataclass
class RoundTrace:
    index: int
    drafted: tuple[int, ...]
    alphas: tuple[float, ...]
    accepted_count: int
    recovery_token: int | None
    uplink_bytes: int
    downlink_bytes: int
    clock_ms: float = 0.0


def draft_frame_bytes(k: int, has_delta: bool) -> int:
    return FRAME_HEADER_BYTES + DRAFT_PAYLOAD_FIXED + 4 * k + (4 if has_delta else 0)


def verdict_frame_bytes(n_entries: int) -> int:
    size = FRAME_HEADER_BYTES + VERDICT_PAYLOAD_FIXED
    if n_entries:
        size += 2 + 8 * n_entries
    return size


# ---------------------------------------------------------------------------
# Recovery
# ---------------------------------------------------------------------------


def build_steering_payload(
    h_llm: np.ndarray, h_minus: np.ndarray, beta: float, top_k: int
) -> SparseSteeringPayload:
    values = h_llm - beta * h_minus
    order = np.argsort(-values, kind="stable")[: min(top_k, len(values))]
    return SparseSteeringPayload(entries=tuple(zip(order.tolist(), values[order].tolist())))


def recover(
    payload: SparseSteeringPayload,
    h_plus: np.ndarray,
    beta: float,
    rng: np.random.Generator | None,
    greedy: bool = False,
) -> int:
    """Complete the steering sum with the private term and resample.

    Tokens outside the payload support are masked out entirely; the edge
    cannot reconstruct the tail of the cloud logits.
    """
    if not payload.entries:
        raise ProtocolStateError("empty steering payload")
    hl = h_plus.tolist()
    scores = [(i, v + beta * hl[i]) for i, v in payload.entries]
    if greedy:
        best = max(s for _, s in scores)
        return min(i for i, s in scores if s == best)
    assert rng is not None
    # Inverse-CDF draw over the payload support; scores are our own finite
    # values, so no revalidation on this hot path.
    m = max(s for _, s in scores)
    weights = [math.exp(s - m) for _, s in scores]
    threshold = rng.random() * math.fsum(weights)
    acc = 0.0
    for (i, _), w in zip(scores, weights):
        acc += w
        if acc > threshold:
            return i
    return scores[-1][0]


def recovery_law(
    payload: SparseSteeringPayload, h_plus: np.ndarray, beta: float, vocab_size: int
) -> np.ndarray:
    """Exact distribution the stochastic recovery samples from, as a dense
    vector over the vocabulary (zero outside the payload support)."""
    ids = [e[0] for e in payload.entries]
    vals = np.array([e[1] for e in payload.entries]) + beta * h_plus[ids]
    p = np.zeros(vocab_size)
    p[ids] = softmax(vals)
    return p


# ---------------------------------------------------------------------------
# Edge
# ---------------------------------------------------------------------------


class EdgeSession:
    """Drafter-side state machine: draft, commit verdicts, recover."""

    def __init__(
        self,
        config: ProtocolConfig,
        drafter,
        vocab: Vocabulary,
        prompt_ids: Sequence[int],
        streams: RngStreams | None = None,
    ) -> None:
        config.validate(vocab.size)
        validate_sequence(prompt_ids, vocab, config.max_len)
        self.config = config
        self.drafter = drafter
        self.vocab = vocab
        self.committed: list[int] = list(prompt_ids)
        self.prompt_len = len(self.committed)
        self.seq_no = 0
        self.finished = len(self.committed) >= config.max_len
        if self.committed and self.committed[-1] == vocab.eos_id:
            self.finished = True
        self.pending_delta: int | None = None
        rngs = streams if streams is not None else make_streams(config.seed)
        self._draft_rng = rngs.draft
        self._recovery_rng = rngs.recovery
        self._greedy = config.decode_mode == "greedy"
        self._cdf_fn = getattr(drafter, "next_token_cdf", None)
        self._max_len = config.max_len
        self._horizon = config.horizon_k
        self._beta = config.beta
        self._last_batch: DraftBatch | None = None

    def take_delta(self) -> int | None:
        delta, self.pending_delta = self.pending_delta, None
        return delta

    def next_draft(self) -> DraftBatch | None:
        if self.finished:
            return None
        if self._last_batch is not None:
            raise ProtocolStateError("previous draft awaiting verdict")
        budget = self._max_len - len(self.committed)
        k = min(self._horizon, budget)
        tokens: list[int] = []
        hist = list(self.committed)
        for _ in range(k):
            if self._greedy:
                tok = greedy_pick(self.drafter.next_token_probs(hist))
            elif self._cdf_fn is not None:
                cdf = self._cdf_fn(hist)
                tok = min(bisect_right(cdf, self._draft_rng.random()), len(cdf) - 1)
            else:
                tok = sample(self.drafter.next_token_probs(hist), self._draft_rng)
            tokens.append(tok)
            hist.append(tok)
            if tok == self.vocab.eos_id:
                break
        batch = DraftBatch(self.seq_no, tuple(tokens))
        self._last_batch = batch
        return batch

    def apply_verdict(self, verdict: Verdict) -> tuple[int, int | None]:
        """Commit the accepted prefix plus any recovery token; returns
        (accepted_count, recovery_token)."""
        batch = self._last_batch
        if batch is None or verdict.seq_no != batch.seq_no:
            raise ProtocolStateError("verdict does not match outstanding draft")
        k = len(batch.token_ids)
        a = verdict.accepted_count
        if not 0 <= a <= k:
            raise ProtocolStateError(f"accepted_count {a} out of range for batch of {k}")
        if (verdict.recovery is None) != (a == k):
            raise ProtocolStateError("recovery payload presence inconsistent with accepted_count")
        self.committed.extend(batch.token_ids[:a])
        rec_token: int | None = None
        if verdict.recovery is not None:
            # The committed list is now exactly the history at the rejected
            # position, so the private term is scored lazily here.
            rec_token = recover(
                verdict.recovery,
                self.drafter.next_token_logits(self.committed),
                self._beta,
                self._recovery_rng,
                greedy=self._greedy,
            )
            self.committed.append(rec_token)
            self.pending_delta = rec_token
        self._last_batch = None
        self.seq_no += 1
        if self.committed[-1] == self.vocab.eos_id or len(self.committed) >= self._max_len:
            self.finished = True
        return a, rec_token


# ---------------------------------------------------------------------------
# Cloud
# ---------------------------------------------------------------------------


class CloudVerifier:
    """Verifier-side state machine: parallel scoring, ratio verdicts.

    Sees only token ids and its own two models; keeps a mirror of the
    committed history repaired by the one-token delta riding on the next
    draft frame.
    """

    def __init__(
        self,
        config: ProtocolConfig,
        llm,
        slm_minus,
        vocab: Vocabulary,
        prompt_ids: Sequence[int],
        streams: RngStreams | None = None,
        zt_fn: Callable[[Sequence[int]], float] | None = None,
    ) -> None:
        config.validate(vocab.size)
        if config.exact_z and zt_fn is None:
            raise ProtocolStateError("exact-Z verification needs a partition callback")
        self.config = config
        self.llm = llm
        self.slm_minus = slm_minus
        self.vocab = vocab
        self.mirror: list[int] = list(prompt_ids)
        self.expected_seq = 0
        self.awaiting_delta = False
        self.traces: list[RoundTrace] = []
        rngs = streams if streams is not None else make_streams(config.seed)
        self._verify_rng = rngs.verify
        self._greedy = config.decode_mode == "greedy"
        self._zt_fn = zt_fn
        self._lam = config.lam
        self._beta = config.beta
        self._top_k = config.top_k
        self._exact_z = config.exact_z

    def verify(
        self,
        batch: DraftBatch,
        h_llm_seq: Sequence[np.ndarray],
        h_minus_seq: Sequence[np.ndarray],
        lam_seq: Sequence[float],
        rng: np.random.Generator,
    ) -> tuple[Verdict, tuple[float, ...]]:
        """Scan-accept over the drafted tokens.

        Pure in (batch ids, scored logits, lambdas, rng stream): nothing
        about the private drafter distribution enters here.
        """
        k = len(batch.token_ids)
        if len(h_llm_seq) != k or len(h_minus_seq) != k or len(lam_seq) != k:
            raise ProtocolStateError("logit sequences do not match batch length")
        alphas: list[float] = []
        accepted = k
        payload: SparseSteeringPayload | None = None
        for t, tok in enumerate(batch.token_ids):
            p_llm = math.exp(h_llm_seq[t][tok])
            p_minus = max(math.exp(h_minus_seq[t][tok]), PROB_FLOOR)
            alpha = min(1.0, p_llm / (lam_seq[t] * p_minus))
            alphas.append(alpha)
            ok = alpha >= 1.0 if self._greedy else rng.random() <= alpha
            if not ok:
                accepted = t
                payload = build_steering_payload(
                    h_llm_seq[t], h_minus_seq[t], self._beta, self._top_k
                )
                break
        return Verdict(batch.seq_no, accepted, payload), tuple(alphas)

    def handle_draft(self, batch: DraftBatch, history_delta: int | None) -> Verdict:
        if batch.seq_no != self.expected_seq:
            raise ProtocolStateError(
                f"out-of-order draft: got seq {batch.seq_no}, expected {self.expected_seq}"
            )
        if not batch.token_ids:
            raise ProtocolStateError("empty draft batch")
        if self.awaiting_delta != (history_delta is not None):
            raise ProtocolStateError("recovery history delta missing or unexpected")
        if history_delta is not None:
            self.mirror.append(history_delta)
            self.awaiting_delta = False

        # Parallel scoring of [history, batch]: logits at every draft
        # position regardless of where the scan stops.
        prefix = list(self.mirror)
        h_llm_seq: list[np.ndarray] = []
        h_minus_seq: list[np.ndarray] = []
        lam_seq: list[float] = []
        for tok in batch.token_ids:
            h_llm_seq.append(self.llm.next_token_logits(prefix))
            h_minus_seq.append(self.slm_minus.next_token_logits(prefix))
            lam_seq.append(self._zt_fn(prefix) if self._exact_z else self._lam)
            prefix.append(tok)

        verdict, alphas = self.verify(batch, h_llm_seq, h_minus_seq, lam_seq, self._verify_rng)
        self.mirror.extend(batch.token_ids[: verdict.accepted_count])
        if verdict.recovery is not None:
            self.awaiting_delta = True

        k = len(batch.token_ids)
        self.traces.append(
            RoundTrace(
                index=batch.seq_no,
                drafted=batch.token_ids,
                alphas=alphas,
                accepted_count=verdict.accepted_count,
                recovery_token=None,
                uplink_bytes=draft_frame_bytes(k, history_delta is not None),
                downlink_bytes=verdict_frame_bytes(
                    len(verdict.recovery.entries) if verdict.recovery else 0
                ),
            )
        )
        self.expected_seq += 1
        return verdict

    def finish(self, trailing_ids: Sequence[int]) -> None:
        """Apply the final history repair carried by the DONE message."""
        if self.awaiting_delta and not trailing_ids:
            raise ProtocolStateError("session ended with unrepaired recovery token")
        self.mirror.extend(trailing_ids)
        self.awaiting_delta = False


# ---------------------------------------------------------------------------
# End-to-end session
# ---------------------------------------------------------------------------


def _check_shared_vocab(vocab: Vocabulary, *models) -> None:
    for m in models:
        if m.vocab.tokens != vocab.tokens or m.vocab.eos_id != vocab.eos_id:
            raise ProtocolStateError("models do not share the session vocabulary")


def exact_partition_fn(llm, slm_plus, slm_minus) -> Callable[[Sequence[int]], float]:
    """Per-step true partition function for exact-Z verification."""

    def zt(prefix: Sequence[int]) -> float:
        p_llm = llm.next_token_probs(prefix)
        p_plus = slm_plus.next_token_probs(prefix)
        p_minus = np.maximum(slm_minus.next_token_probs(prefix), PROB_FLOOR)
        return float(np.sum(p_llm * p_plus / p_minus))

    return zt


def run_session(
    config: ProtocolConfig,
    llm,
    slm_plus,
    slm_minus,
    vocab: Vocabulary,
    prompt_ids: Sequence[int],
    streams: RngStreams | None = None,
) -> tuple[list[int], list[RoundTrace]]:
    """Full draft-verify-recover loop until eos or the length cap."""
    _check_shared_vocab(vocab, llm, slm_plus, slm_minus)
    rngs = streams if streams is not None else make_streams(config.seed)
    edge = EdgeSession(config, slm_plus, vocab, prompt_ids, streams=rngs)
    zt_fn = exact_partition_fn(llm, slm_plus, slm_minus) if config.exact_z else None
    cloud = CloudVerifier(config, llm, slm_minus, vocab, prompt_ids, streams=rngs, zt_fn=zt_fn)

    traces: list[RoundTrace] = []
    while True:
        batch = edge.next_draft()
        if batch is None:
            break
        delta = edge.take_delta()
        verdict = cloud.handle_draft(batch, delta)
        accepted, rec_token = edge.apply_verdict(verdict)
        trace = cloud.traces[-1]
        trace.recovery_token = rec_token
        traces.append(trace)
    cloud.finish([edge.pending_delta] if edge.pending_delta is not None else [])
    return edge.committed, traces


def autoregressive_decode(
    model,
    vocab: Vocabulary,
    prompt_ids: Sequence[int],
    max_len: int,
    mode: str = "stochastic",
    rng: np.random.Generator | None = None,
) -> list[int]:
    """Plain single-model decoding; the baseline the degenerate protocol
    limits collapse to."""
    validate_sequence(prompt_ids, vocab, max_len)
    out = list(prompt_ids)
    greedy = mode == "greedy"
    while len(out) < max_len and (not out or out[-1] != vocab.eos_id):
        probs = model.next_token_probs(out)
        tok = greedy_pick(probs) if greedy else sample(probs, rng)
        out.append(tok)
    return out
