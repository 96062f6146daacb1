"""Core types shared by the decoding engine.

Everything here is plain data: vocabularies, per-position predictions,
decoding configuration, and the step/result records emitted by the
generation loop. The only mutable type is :class:`BlockState`, which the
block decoder updates in place as positions are committed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "Algorithm",
    "BlockState",
    "DecodingConfig",
    "GenerationResult",
    "PositionPrediction",
    "StepRecord",
    "StopReason",
    "TccfConfig",
    "TccfTrace",
    "Vocab",
    "lint_config",
    "validate_config",
]

# Tolerances used by prediction self-checks.
PROB_SUM_TOL = 1e-9
CONF_RECHECK_TOL = 1e-12


class Algorithm(str, Enum):
    """Parallel unmasking strategies supported by the block decoder."""

    STATIC = "static"
    DYNAMIC = "dynamic"
    BACD = "bacd"
    ENTROPY_BOUNDED = "entropy_bounded"


class StopReason(str, Enum):
    EOS = "eos"
    MAX_LENGTH = "max_length"


@dataclass(frozen=True)
class Vocab:
    """Token id layout: ordinary ids first, special ids at the top.

    Ordinary tokens occupy ``0 .. size-1``; the mask, eos, and pad ids sit
    above them so that denoiser distributions over ordinary tokens are a
    contiguous prefix of the id space.
    """

    size: int  # number of ordinary tokens
    mask_id: int
    eos_id: int
    pad_id: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError("vocab needs at least 2 ordinary tokens")
        specials = (self.mask_id, self.eos_id, self.pad_id)
        if len(set(specials)) != 3:
            raise ValueError("mask/eos/pad ids must be distinct")
        for tok in specials:
            if tok < self.size:
                raise ValueError("special ids must sit above the ordinary range")

    @classmethod
    def standard(cls, size: int) -> "Vocab":
        """Vocab with mask/eos/pad packed directly above the ordinary ids."""
        return cls(size=size, mask_id=size, eos_id=size + 1, pad_id=size + 2)

    @property
    def total_ids(self) -> int:
        return max(self.mask_id, self.eos_id, self.pad_id) + 1

    def is_special(self, token: int) -> bool:
        return token in (self.mask_id, self.eos_id, self.pad_id)


@dataclass
class BlockState:
    """Mutable state of the block currently being decoded.

    Invariant: ``tokens[i] == mask_id`` exactly where ``mask_flags[i]`` is
    true. All mutation goes through :meth:`assign`, which clears the flag.
    """

    tokens: list[int]
    mask_flags: list[bool]
    mask_id: int

    def __post_init__(self):
        if len(self.tokens) != len(self.mask_flags):
            raise ValueError("tokens and mask_flags must have equal length")
        for tok, flag in zip(self.tokens, self.mask_flags):
            if flag != (tok == self.mask_id):
                raise ValueError("mask_flags must mirror mask_id placement")

    @classmethod
    def fully_masked(cls, size: int, mask_id: int) -> "BlockState":
        return cls([mask_id] * size, [True] * size, mask_id)

    @classmethod
    def from_tokens(cls, tokens, mask_id: int) -> "BlockState":
        toks = list(tokens)
        return cls(toks, [t == mask_id for t in toks], mask_id)

    def __len__(self) -> int:
        return len(self.tokens)

    def masked_positions(self) -> list[int]:
        return [i for i, flag in enumerate(self.mask_flags) if flag]

    @property
    def fully_decoded(self) -> bool:
        return not any(self.mask_flags)

    def assign(self, position: int, token: int) -> None:
        """Commit a token at a still-masked position."""
        if not self.mask_flags[position]:
            raise ValueError(f"position {position} is already decoded")
        if token == self.mask_id:
            raise ValueError("cannot assign the mask token")
        self.tokens[position] = token
        self.mask_flags[position] = False


@dataclass(frozen=True, eq=False)
class PositionPrediction:
    """Denoiser output for one masked position.

    ``probs`` is a categorical over the full id space (zero mass on mask
    and pad), ``confidence`` is its max, ``entropy`` its Shannon entropy
    in nats. Use :meth:`from_probs`; the constructor re-checks the
    derived fields and normalization.
    """

    position: int
    probs: np.ndarray
    confidence: float
    entropy: float

    def __post_init__(self):
        total = float(self.probs.sum())
        if not math.isfinite(total) or abs(total - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"probs sum to {total!r}, not 1")
        if float(self.probs.min()) < 0.0:
            raise ValueError("probs must be nonnegative")
        top = float(self.probs.max())
        if abs(top - self.confidence) > CONF_RECHECK_TOL:
            raise ValueError("confidence does not equal max(probs)")
        if self.entropy < 0.0:
            raise ValueError("entropy must be nonnegative")
        # Zero entropy and unit confidence have to coincide.
        if self.confidence >= 1.0 - 1e-12 and self.entropy > 1e-9:
            raise ValueError("unit confidence requires zero entropy")
        if self.entropy <= 1e-12 and self.confidence < 1.0 - 1e-9:
            raise ValueError("zero entropy requires unit confidence")

    @classmethod
    def from_probs(cls, position: int, probs) -> "PositionPrediction":
        arr = np.asarray(probs, dtype=np.float64).copy()
        arr.flags.writeable = False
        confidence = float(arr.max())
        nz = arr[arr > 0.0]
        entropy = float(max(0.0, -(nz * np.log(nz)).sum()))
        return cls(position=position, probs=arr, confidence=confidence, entropy=entropy)


@dataclass(frozen=True)
class TccfConfig:
    """Two-stage schedule: coarse blocks while thinking, fine blocks after.

    The marker is the token sequence whose appearance ends stage 1; it is
    spliced out and replaced by ``transition`` before stage 2 begins.
    ``stage1_max_tokens`` caps stage 1 on its own (defaults to the run's
    max_new_tokens); hitting it forces the transition without a marker.
    """

    b_think: int
    b_critic: int
    marker: tuple[int, ...]
    transition: tuple[int, ...]
    stage1_max_tokens: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "marker", tuple(self.marker))
        object.__setattr__(self, "transition", tuple(self.transition))


@dataclass(frozen=True)
class DecodingConfig:
    """Hyperparameters for one decoding run.

    Only the fields relevant to ``algorithm`` are consulted: ``steps`` for
    static, ``tau`` for dynamic, ``tau_h``/``tau_l`` for bacd, ``gamma``
    for entropy-bounded. ``validate_config`` reports what is missing or
    out of range without raising.
    """

    algorithm: Algorithm
    block_size: int = 16
    steps: int | None = None  # static: per-block step budget N
    tau: float | None = None  # dynamic threshold
    tau_h: float | None = None  # bacd upper clip
    tau_l: float | None = None  # bacd lower clip
    gamma: float | None = None  # entropy budget
    temperature: float = 0.0
    seed: int = 0
    max_new_tokens: int = 128
    tccf: TccfConfig | None = None
    bacd_cross_block_history: bool = False  # experimental: carry history across blocks

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))


def validate_config(cfg: DecodingConfig) -> list[str]:
    """Collect every violation in ``cfg``; an empty list means valid.

    Never raises: this is the one validation entry point that reports
    instead of aborting, so callers can surface all problems at once.
    """
    problems: list[str] = []
    if not isinstance(cfg.block_size, int) or cfg.block_size < 1:
        problems.append("block_size must be a positive integer")
    if not isinstance(cfg.max_new_tokens, int) or cfg.max_new_tokens < 1:
        problems.append("max_new_tokens must be a positive integer")
    if not math.isfinite(cfg.temperature) or cfg.temperature < 0.0:
        problems.append("temperature must be finite and nonnegative")

    alg = cfg.algorithm
    if alg is Algorithm.STATIC:
        if cfg.steps is None:
            problems.append("steps is required for static decoding")
        elif cfg.steps < 1:
            problems.append("steps must be positive")
    elif alg is Algorithm.DYNAMIC:
        if cfg.tau is None:
            problems.append("tau is required for dynamic decoding")
        elif not 0.0 < cfg.tau <= 1.0:
            problems.append("tau must lie in (0, 1]")
    elif alg is Algorithm.BACD:
        if cfg.tau_h is None or cfg.tau_l is None:
            problems.append("tau_h and tau_l are required for bacd decoding")
        else:
            if not 0.0 < cfg.tau_h <= 1.0:
                problems.append("tau_h must lie in (0, 1]")
            if not 0.0 < cfg.tau_l <= 1.0:
                problems.append("tau_l must lie in (0, 1]")
            if cfg.tau_l > cfg.tau_h:
                problems.append("tau_l exceeds tau_h")
    elif alg is Algorithm.ENTROPY_BOUNDED:
        if cfg.gamma is None:
            problems.append("gamma is required for entropy-bounded decoding")
        elif not (math.isfinite(cfg.gamma) and cfg.gamma >= 0.0):
            problems.append("gamma must be finite and nonnegative")

    tc = cfg.tccf
    if tc is not None:
        if tc.b_think < 1:
            problems.append("tccf b_think must be positive")
        if tc.b_critic < 1:
            problems.append("tccf b_critic must be positive")
        if not tc.marker:
            problems.append("tccf marker must be nonempty")
        if tc.stage1_max_tokens is not None and tc.stage1_max_tokens < 1:
            problems.append("tccf stage1_max_tokens must be positive")
    return problems


def lint_config(cfg: DecodingConfig) -> list[str]:
    """Non-fatal configuration smells, for CLI warnings."""
    notes: list[str] = []
    if cfg.tccf is not None and cfg.tccf.b_critic >= cfg.tccf.b_think:
        notes.append("b_critic is not smaller than b_think; staging has no effect")
    if cfg.algorithm is Algorithm.DYNAMIC and cfg.tau == 1.0:
        notes.append("tau == 1.0 never clears the threshold; every step decodes one token")
    return notes


@dataclass(frozen=True)
class StepRecord:
    """One forward pass of the block decoder.

    ``confidences`` aligns with ``unmasked_positions`` (ascending). When
    the threshold filtered out everything, the argmax fallback fires and
    the record holds exactly one position.
    """

    block_index: int
    step_index: int
    threshold_used: float | None
    unmasked_positions: tuple[int, ...]
    confidences: tuple[float, ...]
    fallback_fired: bool

    def __post_init__(self):
        object.__setattr__(self, "unmasked_positions", tuple(self.unmasked_positions))
        object.__setattr__(self, "confidences", tuple(self.confidences))
        if not self.unmasked_positions:
            raise ValueError("a step must unmask at least one position")
        if len(self.unmasked_positions) != len(self.confidences):
            raise ValueError("confidences must align with unmasked_positions")
        if self.fallback_fired and len(self.unmasked_positions) != 1:
            raise ValueError("fallback steps unmask exactly one position")


@dataclass(frozen=True)
class TccfTrace:
    """Stage accounting attached to two-stage runs."""

    stage1_passes: int
    stage2_passes: int
    splice_position: int | None  # committed offset where the marker was removed
    forced_splice: bool
    critic_ran: bool


@dataclass(frozen=True)
class GenerationResult:
    """Completed generation: surviving tokens plus the full step log.

    ``output_tokens`` excludes the prompt. The decode-slot count (sum of
    ``len(r.unmasked_positions)``) can exceed ``len(output_tokens)`` when
    eos truncation or the length cap discarded tail tokens; throughput
    metrics count slots, since those forward passes really ran.
    """

    prompt_len: int
    output_tokens: tuple[int, ...]
    forward_passes: int
    steps: tuple[StepRecord, ...]
    stop_reason: StopReason
    tccf: TccfTrace | None = None

    def __post_init__(self):
        object.__setattr__(self, "output_tokens", tuple(self.output_tokens))
        object.__setattr__(self, "steps", tuple(self.steps))
        if self.forward_passes != len(self.steps):
            raise ValueError("forward_passes must equal the number of step records")

    @property
    def generated_slots(self) -> int:
        """Tokens decoded across all passes, discarded tails included."""
        return sum(len(r.unmasked_positions) for r in self.steps)
