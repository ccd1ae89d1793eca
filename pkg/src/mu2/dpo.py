"""Preference loss over policy and reference sequence log-probabilities.

The loss for one pair is softplus(-z) with
z = beta * ((chosen.policy - chosen.reference) - (rejected.policy - rejected.reference)),
which equals -log sigmoid(z). Gradients are closed-form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

BETA_LOW = 0.1
BETA_HIGH = 0.5


@dataclass(frozen=True)
class SequenceScore:
    """Log-probability of one response under the policy and the reference."""

    policy: float
    reference: float


@dataclass(frozen=True)
class PreferencePair:
    chosen: SequenceScore
    rejected: SequenceScore


@dataclass(frozen=True)
class PairGradient:
    policy_chosen: float
    reference_chosen: float
    policy_rejected: float
    reference_rejected: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.policy_chosen, self.reference_chosen,
                self.policy_rejected, self.reference_rejected)


def softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _check_beta(beta: float) -> None:
    if not (BETA_LOW < beta < BETA_HIGH):
        raise ValueError(
            f"beta must lie strictly between {BETA_LOW} and {BETA_HIGH}, got {beta}"
        )


def _margin(pair: PreferencePair, beta: float) -> float:
    values = (pair.chosen.policy, pair.chosen.reference,
              pair.rejected.policy, pair.rejected.reference)
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"log-probabilities must be finite, got {values}")
    return beta * ((pair.chosen.policy - pair.chosen.reference)
                   - (pair.rejected.policy - pair.rejected.reference))


def dpo_loss(pair: PreferencePair, beta: float = 0.3) -> float:
    _check_beta(beta)
    return softplus(-_margin(pair, beta))


def dpo_loss_grad(pair: PreferencePair, beta: float = 0.3) -> PairGradient:
    """Derivatives of dpo_loss with respect to the four log-probabilities."""
    _check_beta(beta)
    s = sigmoid(-_margin(pair, beta))
    return PairGradient(
        policy_chosen=-beta * s,
        reference_chosen=beta * s,
        policy_rejected=beta * s,
        reference_rejected=-beta * s,
    )


def batch_dpo_loss(pairs: list[PreferencePair], beta: float = 0.3) -> float:
    """Mean loss over a non-empty batch."""
    if not pairs:
        raise ValueError("cannot average over an empty batch of pairs")
    return math.fsum(dpo_loss(p, beta) for p in pairs) / len(pairs)


class LogProbProvider(Protocol):
    def sequence_logprob(self, prompt: str, response: str) -> float: ...


def score_pair(policy: LogProbProvider, reference: LogProbProvider,
               prompt: str, chosen: str, rejected: str) -> PreferencePair:
    return PreferencePair(
        chosen=SequenceScore(policy.sequence_logprob(prompt, chosen),
                             reference.sequence_logprob(prompt, chosen)),
        rejected=SequenceScore(policy.sequence_logprob(prompt, rejected),
                               reference.sequence_logprob(prompt, rejected)),
    )


_VOCAB = 128  # ascii byte classes; larger codepoints share the last slot
_BOS = _VOCAB  # extra transition row for sequence starts


class CharBigramLM:
    """Character bigram language model over ascii classes.

    Small enough to train by hand; the first response character conditions on
    the last prompt character (or a start row for empty prompts).
    """

    def __init__(self, seed: int = 0, scale: float = 0.1):
        rng = np.random.default_rng(seed)
        self.logits = rng.normal(0.0, scale, size=(_VOCAB + 1, _VOCAB))

    @staticmethod
    def _index(ch: str) -> int:
        return min(ord(ch), _VOCAB - 1)

    def _log_probs(self, row: int) -> np.ndarray:
        logits = self.logits[row]
        shifted = logits - logits.max()
        return shifted - math.log(np.exp(shifted).sum())

    def _start_row(self, prompt: str) -> int:
        return self._index(prompt[-1]) if prompt else _BOS

    def sequence_logprob(self, prompt: str, response: str) -> float:
        prev = self._start_row(prompt)
        total = 0.0
        for ch in response:
            cur = self._index(ch)
            total += float(self._log_probs(prev)[cur])
            prev = cur
        return total

    def logprob_grad(self, prompt: str, response: str) -> np.ndarray:
        """d sequence_logprob / d logits, same shape as the logits table."""
        grad = np.zeros_like(self.logits)
        prev = self._start_row(prompt)
        for ch in response:
            cur = self._index(ch)
            probs = np.exp(self._log_probs(prev))
            grad[prev] -= probs
            grad[prev, cur] += 1.0
            prev = cur
        return grad


def train_toy_policy(texts: list[tuple[str, str, str]], beta: float = 0.3,
                     lr: float = 0.5, steps: int = 20, seed: int = 0) -> list[float]:
    """Fit the bigram policy to prefer the chosen responses.

    texts holds (prompt, chosen, rejected) triples. The reference model stays
    frozen at the policy's initialization, so the first recorded loss is ln 2.
    Returns the batch loss before each update plus the final loss.
    """
    policy = CharBigramLM(seed)
    reference = CharBigramLM(seed)
    losses = []
    for _ in range(steps):
        pairs = [score_pair(policy, reference, p, c, r) for p, c, r in texts]
        losses.append(batch_dpo_loss(pairs, beta))
        update = np.zeros_like(policy.logits)
        for (prompt, chosen, rejected), pair in zip(texts, pairs):
            g = dpo_loss_grad(pair, beta)
            update += g.policy_chosen * policy.logprob_grad(prompt, chosen)
            update += g.policy_rejected * policy.logprob_grad(prompt, rejected)
        policy.logits -= lr * update / len(texts)
    pairs = [score_pair(policy, reference, p, c, r) for p, c, r in texts]
    losses.append(batch_dpo_loss(pairs, beta))
    return losses
