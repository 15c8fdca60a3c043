"""Next-token models standing in for the generalist and specialist pair.

Two desk-scale backends implement the same scoring interface:

* ``TableModel`` maps a short history window directly to a distribution;
  it is the exact, hand-constructable oracle backend used by tests.
* ``NGramModel`` is an add-k smoothed n-gram counter.  The "large" model
  is a higher-order n-gram trained on a bigger corpus; the "small" model
  a lower-order one on a subset.  Private conditioning is a linear blend
  with an add-k table built from the user's documents, so the plus/minus
  probability ratio is analytically controllable.

Both expose ``next_token_probs`` / ``next_token_logits`` over the full
vocabulary; logits are log-probabilities (softmax round-trips exactly up
to the probability floor).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    PROB_FLOOR,
    PrivateContext,
    SpecSteerError,
    Vocabulary,
    check_distribution,
)

ROLES = ("generalist", "specialist_private", "specialist_generic")

# Sentinel id used to left-pad history windows at the start of a sequence.
BOS = -1


class ModelError(SpecSteerError):
    pass


@dataclass(frozen=True)
class ModelProfile:
    """Identity and cost statistics of an abstract scorer."""

    name: str
    param_count: int
    layers: int
    hidden_dim: int
    role: str

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ModelError(f"unknown role {self.role!r}")
        if min(self.param_count, self.layers, self.hidden_dim) <= 0:
            raise ModelError("profile statistics must be positive")


def _check_history(history: Sequence[int], size: int) -> None:
    for i in history:
        if not 0 <= i < size:
            raise ModelError(f"unknown token id {i} for vocabulary of size {size}")


class TableModel:
    """History-window lookup table over windows of 0, 1, or 2 tokens.

    Missing histories fall back to the empty-window row, which must be
    present.  Rows are validated distributions; probs, logits, and CDFs
    are cached per row so sessions can query in tight loops.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        rows: dict[tuple[int, ...], Sequence[float]],
        profile: ModelProfile | None = None,
    ) -> None:
        if () not in rows:
            raise ModelError("TableModel requires an empty-window fallback row")
        self.vocab = vocab
        self.profile = profile
        self.window = max(len(k) for k in rows)
        if self.window > 2:
            raise ModelError("TableModel windows are limited to 2 tokens")
        self._vsize = vocab.size
        self._probs = {k: check_distribution(v, vocab.size) for k, v in rows.items()}
        self._logits = {k: np.log(np.maximum(p, PROB_FLOOR)) for k, p in self._probs.items()}
        self._cdfs = {k: p.cumsum().tolist() for k, p in self._probs.items()}

    def _row(self, history: Sequence[int]) -> tuple[int, ...]:
        for m in range(min(self.window, len(history)), -1, -1):
            key = tuple(history[len(history) - m:])
            if key in self._probs:
                return key
        return ()

    def next_token_probs(self, history: Sequence[int]) -> np.ndarray:
        _check_history(history, self._vsize)
        return self._probs[self._row(history)]

    def next_token_logits(self, history: Sequence[int]) -> np.ndarray:
        _check_history(history, self._vsize)
        return self._logits[self._row(history)]

    def next_token_cdf(self, history: Sequence[int]) -> list[float]:
        """Cached cumulative distribution; lets samplers skip the cumsum."""
        _check_history(history, self._vsize)
        return self._cdfs[self._row(history)]


class NGramModel:
    """Add-k smoothed n-gram model with optional private-table blending.

    The emitted distribution is ``(1-mu) * base + mu * private`` where both
    terms are add-k tables; ``mu == 0`` is exactly the paired generic model.
    Trained models are immutable; per-window distributions are cached.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        add_k: float,
        counts: dict[tuple[int, ...], dict[int, int]],
        totals: dict[tuple[int, ...], int],
        mu: float = 0.0,
        private_counts: dict[tuple[int, ...], dict[int, int]] | None = None,
        private_totals: dict[tuple[int, ...], int] | None = None,
        profile: ModelProfile | None = None,
    ) -> None:
        if order not in (1, 2, 3):
            raise ModelError("order must be 1, 2, or 3")
        if add_k <= 0:
            raise ModelError("add_k must be > 0")
        if not 0.0 <= mu <= 1.0:
            raise ModelError("mu must lie in [0, 1]")
        if mu > 0 and private_counts is None:
            raise ModelError("mu > 0 requires a private table")
        self.vocab = vocab
        self.order = order
        self.add_k = float(add_k)
        self.mu = float(mu)
        self.profile = profile
        self._vsize = vocab.size
        self._counts = counts
        self._totals = totals
        self._private_counts = private_counts
        self._private_totals = private_totals
        self._cache: dict[tuple[int, ...], np.ndarray] = {}
        self._logit_cache: dict[tuple[int, ...], np.ndarray] = {}
        self._cdf_cache: dict[tuple[int, ...], list[float]] = {}

    def _window(self, history: Sequence[int]) -> tuple[int, ...]:
        m = self.order - 1
        if m == 0:
            return ()
        padded = [BOS] * m + list(history[-m:] if len(history) >= m else history)
        return tuple(padded[-m:])

    def _table_probs(
        self,
        window: tuple[int, ...],
        counts: dict[tuple[int, ...], dict[int, int]],
        totals: dict[tuple[int, ...], int],
    ) -> np.ndarray:
        v = self.vocab.size
        total = totals.get(window, 0)
        p = np.full(v, self.add_k / (total + self.add_k * v))
        row = counts.get(window)
        if row:
            denom = total + self.add_k * v
            for tok, c in row.items():
                p[tok] = (c + self.add_k) / denom
        return p

    def next_token_probs(self, history: Sequence[int]) -> np.ndarray:
        _check_history(history, self._vsize)
        window = self._window(history)
        cached = self._cache.get(window)
        if cached is not None:
            return cached
        p = self._table_probs(window, self._counts, self._totals)
        if self.mu > 0.0:
            assert self._private_counts is not None and self._private_totals is not None
            priv = self._table_probs(window, self._private_counts, self._private_totals)
            p = (1.0 - self.mu) * p + self.mu * priv
        self._cache[window] = p
        return p

    def next_token_logits(self, history: Sequence[int]) -> np.ndarray:
        _check_history(history, self._vsize)
        window = self._window(history)
        cached = self._logit_cache.get(window)
        if cached is not None:
            return cached
        h = np.log(np.maximum(self.next_token_probs(history), PROB_FLOOR))
        self._logit_cache[window] = h
        return h

    def next_token_cdf(self, history: Sequence[int]) -> list[float]:
        """Cached cumulative distribution; lets samplers skip the cumsum."""
        _check_history(history, self._vsize)
        window = self._window(history)
        cached = self._cdf_cache.get(window)
        if cached is not None:
            return cached
        cdf = self.next_token_probs(history).cumsum().tolist()
        self._cdf_cache[window] = cdf
        return cdf


def _count_table(
    corpus: Sequence[Sequence[int]],
    order: int,
) -> tuple[dict[tuple[int, ...], dict[int, int]], dict[tuple[int, ...], int]]:
    m = order - 1
    counts: dict[tuple[int, ...], dict[int, int]] = {}
    totals: dict[tuple[int, ...], int] = {}
    for doc in corpus:
        padded = [BOS] * m + list(doc)
        for i in range(m, len(padded)):
            window = tuple(padded[i - m:i])
            tok = padded[i]
            counts.setdefault(window, {})
            counts[window][tok] = counts[window].get(tok, 0) + 1
            totals[window] = totals.get(window, 0) + 1
    return counts, totals


def train_ngram(
    corpus: Sequence[Sequence[int]],
    vocab: Vocabulary,
    order: int,
    add_k: float,
    profile: ModelProfile | None = None,
) -> NGramModel:
    """Count the corpus exactly; documents are used as given (append an
    eos token to each document beforehand if sessions should terminate)."""
    if not corpus or all(len(doc) == 0 for doc in corpus):
        raise ModelError("training corpus is empty")
    for doc in corpus:
        _check_history(doc, vocab.size)
    counts, totals = _count_table(corpus, order)
    return NGramModel(vocab, order, add_k, counts, totals, mu=0.0, profile=profile)


def condition_private(base: NGramModel, ctx: PrivateContext, mu: float) -> NGramModel:
    """Blend the base model with an add-k table over the private documents.

    Returns a new specialist_private model; the base model is untouched and
    remains the paired generic baseline.
    """
    if not 0.0 <= mu <= 1.0:
        raise ModelError("mu must lie in [0, 1]")
    if mu > 0 and (not ctx.documents or all(len(d) == 0 for d in ctx.documents)):
        raise ModelError("private context is empty but mu > 0")
    for doc in ctx.documents:
        _check_history(doc, base.vocab.size)
    private_counts, private_totals = _count_table(ctx.documents, base.order)
    profile = base.profile
    if profile is not None:
        profile = ModelProfile(
            name=profile.name + "+",
            param_count=profile.param_count,
            layers=profile.layers,
            hidden_dim=profile.hidden_dim,
            role="specialist_private",
        )
    return NGramModel(
        base.vocab,
        base.order,
        base.add_k,
        base._counts,
        base._totals,
        mu=mu,
        private_counts=private_counts,
        private_totals=private_totals,
        profile=profile,
    )
