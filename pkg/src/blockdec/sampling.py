"""Parallel unmasking: selection rules and the single-block decode loop.

Each decoding step runs one denoiser forward pass, picks a nonempty set
of masked positions to commit, and realizes their tokens (greedy at
temperature zero, temperature-scaled sampling otherwise). Selection is
confidence based; the threshold family shares an argmax fallback so that
every step commits at least one position and a block of size B finishes
in at most B passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    Algorithm,
    BlockState,
    DecodingConfig,
    PositionPrediction,
    StepRecord,
    validate_config,
)
from .denoisers import Denoiser, predict

__all__ = [
    "BacdState",
    "SelectionOutcome",
    "decode_block",
    "entropy_prefix_length",
    "select_bacd",
    "select_dynamic",
    "select_entropy_bounded",
    "select_static",
]

# Absolute slack for the entropy-budget comparison; grid-valued entropies
# otherwise fail the inequality on the last ulp of a prefix sum.
ENTROPY_BUDGET_SLACK = 1e-12


@dataclass(frozen=True)
class BacdState:
    """Running confidence history for bounded adaptive thresholding.

    The threshold for the next step is the mean of all previously
    committed confidences, clipped to ``[tau_l, tau_h]``; with an empty
    history it starts at ``tau_h``. History resets per block unless the
    caller deliberately carries it across.
    """

    tau_h: float
    tau_l: float
    history: tuple[float, ...] = ()

    def __post_init__(self):
        if not 0.0 < self.tau_l <= self.tau_h <= 1.0:
            raise ValueError("need 0 < tau_l <= tau_h <= 1")
        object.__setattr__(self, "history", tuple(self.history))
        for c in self.history:
            if not 0.0 < c <= 1.0:
                raise ValueError("history confidences must lie in (0, 1]")

    def threshold(self) -> float:
        if not self.history:
            return self.tau_h
        mean = sum(self.history) / len(self.history)
        return min(max(mean, self.tau_l), self.tau_h)

    def extended(self, confidences: Sequence[float]) -> "BacdState":
        return BacdState(self.tau_h, self.tau_l, self.history + tuple(confidences))


@dataclass(frozen=True)
class SelectionOutcome:
    """Positions chosen by one selection step (ascending order)."""

    chosen: tuple[int, ...]
    threshold_used: float | None
    fallback_fired: bool

    def __post_init__(self):
        object.__setattr__(self, "chosen", tuple(self.chosen))
        if not self.chosen:
            raise ValueError("a selection must choose at least one position")


def _argmax_fallback(preds: Sequence[PositionPrediction]) -> int:
    # Highest confidence wins; equal confidences go to the lowest position.
    best = preds[0]
    for p in preds[1:]:
        if p.confidence > best.confidence:
            best = p
    return best.position


def select_static(preds: Sequence[PositionPrediction], n: int) -> SelectionOutcome:
    """Commit the ``n`` most confident positions (all of them when fewer
    remain). Confidence ties break toward the lower position."""
    if n < 1:
        raise ValueError("n must be at least 1")
    ranked = sorted(preds, key=lambda p: (-p.confidence, p.position))
    chosen = sorted(p.position for p in ranked[: min(n, len(ranked))])
    return SelectionOutcome(tuple(chosen), None, False)


def select_dynamic(preds: Sequence[PositionPrediction], tau: float) -> SelectionOutcome:
    """Commit every position whose confidence strictly exceeds ``tau``.

    Ties at the threshold stay masked. When nothing clears it, the single
    most confident position is committed and the fallback flag is set.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    chosen = [p.position for p in preds if p.confidence > tau]
    if chosen:
        return SelectionOutcome(tuple(sorted(chosen)), tau, False)
    return SelectionOutcome((_argmax_fallback(preds),), tau, True)


def select_bacd(
    preds: Sequence[PositionPrediction], state: BacdState
) -> tuple[SelectionOutcome, BacdState]:
    """One bounded-adaptive step: threshold from the history mean, strict
    comparison, argmax fallback, then the chosen confidences are appended
    to the history in ascending position order."""
    tau_t = state.threshold()
    by_pos = {p.position: p for p in preds}
    chosen = sorted(p.position for p in preds if p.confidence > tau_t)
    fallback = not chosen
    if fallback:
        chosen = [_argmax_fallback(preds)]
    new_state = state.extended([by_pos[pos].confidence for pos in chosen])
    return SelectionOutcome(tuple(chosen), tau_t, fallback), new_state


def entropy_prefix_length(sorted_entropies: Sequence[float], gamma: float) -> int:
    """Length of the longest ascending-entropy prefix whose total, minus
    its largest member, stays within ``gamma``.

    For an ascending prefix of length m that quantity is the sum of the
    first m-1 entropies, so the check is a running-sum scan. Comparison
    carries a 1e-12 absolute slack: grid-valued entropies routinely land
    one ulp above an exactly attainable budget. A singleton prefix always
    qualifies.
    """
    if gamma < 0.0:
        raise ValueError("gamma must be nonnegative")
    taken = 0
    total = 0.0
    for h in sorted_entropies:
        if total > gamma + ENTROPY_BUDGET_SLACK:
            break
        taken += 1
        total += h
    return max(taken, 1) if sorted_entropies else 0


def select_entropy_bounded(
    preds: Sequence[PositionPrediction], gamma: float
) -> SelectionOutcome:
    """Commit the largest low-entropy prefix within the budget ``gamma``.

    Positions are ordered by ascending entropy (ties toward the lower
    position); the chosen set is the longest prefix whose summed entropy
    minus its maximum stays within gamma. The singleton prefix always
    qualifies, so there is no fallback path.
    """
    ranked = sorted(preds, key=lambda p: (p.entropy, p.position))
    m = entropy_prefix_length([p.entropy for p in ranked], gamma)
    chosen = sorted(p.position for p in ranked[:m])
    return SelectionOutcome(tuple(chosen), None, False)


def _realize(pred: PositionPrediction, temperature: float, rng: np.random.Generator) -> int:
    if temperature == 0.0:
        return int(np.argmax(pred.probs))
    weights = np.power(pred.probs, 1.0 / temperature)
    weights /= weights.sum()
    return int(rng.choice(len(weights), p=weights))


def decode_block(
    denoiser: Denoiser,
    context: Sequence[int],
    block_size: int,
    cfg: DecodingConfig,
    rng: np.random.Generator,
    *,
    block_index: int = 0,
    bacd_history: Sequence[float] = (),
) -> tuple[BlockState, list[StepRecord]]:
    """Decode one block from fully masked to fully committed.

    Every loop iteration is exactly one denoiser forward pass followed by
    one selection step; committed tokens are realized in ascending
    position order (which fixes the rng consumption order when sampling).
    Returns the clean block and one :class:`StepRecord` per pass, at most
    ``block_size`` of them.

    ``bacd_history`` seeds the adaptive threshold history; by default it
    starts empty for each block.
    """
    problems = validate_config(cfg)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))
    if block_size < 1:
        raise ValueError("block_size must be positive")

    block = BlockState.fully_masked(block_size, denoiser.vocab.mask_id)
    records: list[StepRecord] = []
    bacd_state = BacdState(cfg.tau_h, cfg.tau_l, tuple(bacd_history)) if cfg.algorithm is Algorithm.BACD else None
    static_n = math.ceil(block_size / cfg.steps) if cfg.algorithm is Algorithm.STATIC else None

    step_index = 0
    while not block.fully_decoded:
        preds = predict(denoiser, context, block)
        if cfg.algorithm is Algorithm.STATIC:
            outcome = select_static(preds, static_n)
        elif cfg.algorithm is Algorithm.DYNAMIC:
            outcome = select_dynamic(preds, cfg.tau)
        elif cfg.algorithm is Algorithm.BACD:
            outcome, bacd_state = select_bacd(preds, bacd_state)
        else:
            outcome = select_entropy_bounded(preds, cfg.gamma)

        by_pos = {p.position: p for p in preds}
        for pos in outcome.chosen:
            block.assign(pos, _realize(by_pos[pos], cfg.temperature, rng))
        records.append(
            StepRecord(
                block_index=block_index,
                step_index=step_index,
                threshold_used=outcome.threshold_used,
                unmasked_positions=outcome.chosen,
                confidences=tuple(by_pos[pos].confidence for pos in outcome.chosen),
                fallback_fired=outcome.fallback_fired,
            )
        )
        step_index += 1

    return block, records
