"""Bayesian fusion math: PMI reward, exact fused target, and the exact
single-step law of the protocol.

These functions are the engine's ground truth.  ``fused_target`` computes
the ideal collaborative distribution (prior times exponentiated reward,
normalized by the true partition function) entirely in log domain;
``one_step_protocol_law`` enumerates the exact output law of one
draft-verify-recover step so Monte Carlo runs of the engine can be checked
against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DistributionError,
    check_distribution,
    check_logits,
    clamp_probs,
    softmax,
)


@dataclass(frozen=True)
class FusedTarget:
    """Exact fused distribution with its partition function and reward."""

    target: np.ndarray
    partition: float
    reward: np.ndarray


def pmi_reward(p_plus: np.ndarray, p_minus: np.ndarray) -> np.ndarray:
    """Per-token log-ratio of the private and generic specialist."""
    p_plus = check_distribution(p_plus)
    p_minus = check_distribution(p_minus, size=len(p_plus))
    return np.log(clamp_probs(p_plus)) - np.log(clamp_probs(p_minus))


def fused_target(p_llm: np.ndarray, p_plus: np.ndarray, p_minus: np.ndarray) -> FusedTarget:
    """Normalize prior * plus / minus; log-domain throughout.

    The partition function is the exact normalizer of the unnormalized
    fused weights, returned alongside the target.
    """
    p_llm = check_distribution(p_llm)
    reward = pmi_reward(p_plus, p_minus)
    log_w = np.log(clamp_probs(p_llm)) + reward
    m = log_w.max()
    if not np.isfinite(m):
        raise DistributionError("fused target degenerate: no unclamped mass")
    z = float(np.exp(m) * np.exp(log_w - m).sum())
    target = np.exp(log_w - m)
    target /= target.sum()
    return FusedTarget(target=target, partition=z, reward=reward)


def verification_alpha(p_llm: np.ndarray, p_minus: np.ndarray, lam: float) -> np.ndarray:
    """Elementwise acceptance probability min(1, prior / (lambda * generic)).

    Independent of the private drafter distribution by construction: the
    drafter appears in both the fused target and the proposal and cancels.
    """
    if lam <= 0:
        raise DistributionError("lambda must be > 0")
    p_llm = np.asarray(p_llm, dtype=np.float64)
    p_minus = clamp_probs(np.asarray(p_minus, dtype=np.float64))
    return np.minimum(1.0, p_llm / (lam * p_minus))


def recovery_distribution(
    h_llm: np.ndarray, h_plus: np.ndarray, h_minus: np.ndarray, beta: float
) -> np.ndarray:
    """Softmax of the steered logits: prior plus beta times the contrastive
    direction (plus minus minus)."""
    h_llm = check_logits(h_llm)
    h_plus = check_logits(h_plus, size=len(h_llm))
    h_minus = check_logits(h_minus, size=len(h_llm))
    return softmax(h_llm + beta * (h_plus - h_minus))


def one_step_protocol_law(
    p_llm: np.ndarray,
    p_plus: np.ndarray,
    p_minus: np.ndarray,
    h_llm: np.ndarray,
    h_plus: np.ndarray,
    h_minus: np.ndarray,
    lam: float,
    beta: float,
) -> np.ndarray:
    """Exact law of the first emitted token of one protocol step.

    P_out(y) = Q(y) * alpha(y) + (sum_y' Q(y') * (1 - alpha(y'))) * P_rec(y)
    with Q the drafter distribution, alpha the ratio-based acceptance, and
    P_rec the steered recovery softmax over the full vocabulary.
    """
    q = check_distribution(p_plus)
    p_llm = check_distribution(p_llm, size=len(q))
    p_minus_checked = check_distribution(p_minus, size=len(q))
    alpha = verification_alpha(p_llm, p_minus_checked, lam)
    p_rec = recovery_distribution(h_llm, h_plus, h_minus, beta)
    reject_mass = float(np.sum(q * (1.0 - alpha)))
    return q * alpha + reject_mass * p_rec
