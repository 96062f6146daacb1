"""Block-autoregressive generation loops.

:func:`generate` decodes fixed-size blocks left to right, committing each
finished block into the context for the next one, until eos or the length
cap. :func:`generate_tccf` runs the same loop in two stages: coarse
blocks until a marker sequence appears in the committed output, then a
splice that swaps the marker for a transition sequence, then fine blocks
to the end. Forward passes are pooled across stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    Algorithm,
    DecodingConfig,
    GenerationResult,
    StepRecord,
    StopReason,
    TccfTrace,
    validate_config,
)
from .denoisers import Denoiser
from .sampling import decode_block

__all__ = ["GenerationSession", "find_marker", "generate", "generate_tccf"]


def find_marker(tokens: Sequence[int], marker: Sequence[int]) -> int | None:
    """Index of the leftmost occurrence of ``marker`` in ``tokens``."""
    marker = tuple(marker)
    if not marker:
        raise ValueError("marker must be nonempty")
    tokens = list(tokens)
    span = len(marker)
    for i in range(len(tokens) - span + 1):
        if tuple(tokens[i : i + span]) == marker:
            return i
    return None


@dataclass
class GenerationSession:
    """Mutable state threaded through one generation.

    Keeps the committed tokens, the pooled step log, and (optionally) the
    cross-block adaptive-threshold history. The committed list never
    contains mask tokens: blocks land here only after they are fully
    decoded.
    """

    denoiser: Denoiser
    prompt: tuple[int, ...]
    cfg: DecodingConfig
    rng: np.random.Generator
    committed: list[int] = field(default_factory=list)
    records: list[StepRecord] = field(default_factory=list)
    blocks_emitted: int = 0
    bacd_carry: list[float] | None = None

    @classmethod
    def start(cls, denoiser: Denoiser, prompt, cfg: DecodingConfig) -> "GenerationSession":
        problems = validate_config(cfg)
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))
        carry: list[float] | None = None
        if cfg.algorithm is Algorithm.BACD and cfg.bacd_cross_block_history:
            carry = []
        return cls(
            denoiser=denoiser,
            prompt=tuple(prompt),
            cfg=cfg,
            rng=np.random.default_rng(cfg.seed),
            bacd_carry=carry,
        )

    def decode_next(self, block_size: int) -> list[int]:
        """Decode one block against the current context and commit it."""
        block, recs = decode_block(
            self.denoiser,
            self.prompt + tuple(self.committed),
            block_size,
            self.cfg,
            self.rng,
            block_index=self.blocks_emitted,
            bacd_history=tuple(self.bacd_carry) if self.bacd_carry is not None else (),
        )
        if self.bacd_carry is not None:
            for rec in recs:
                self.bacd_carry.extend(rec.confidences)
        self.records.extend(recs)
        self.blocks_emitted += 1
        self.committed.extend(block.tokens)
        return block.tokens

    def result(self, stop: StopReason, tccf: TccfTrace | None = None) -> GenerationResult:
        return GenerationResult(
            prompt_len=len(self.prompt),
            output_tokens=tuple(self.committed),
            forward_passes=len(self.records),
            steps=tuple(self.records),
            stop_reason=stop,
            tccf=tccf,
        )


def _first_eos(tokens: Sequence[int], eos_id: int, start: int = 0) -> int | None:
    for i in range(start, len(tokens)):
        if tokens[i] == eos_id:
            return i
    return None


def generate(denoiser: Denoiser, prompt, cfg: DecodingConfig) -> GenerationResult:
    """Decode blocks of ``cfg.block_size`` until eos or the length cap.

    A block containing eos ends the run: the output is truncated at the
    first eos, inclusive. Otherwise the run stops once the committed
    length reaches ``max_new_tokens`` and is trimmed to exactly that
    length (the final block may overshoot by up to block_size - 1).
    """
    session = GenerationSession.start(denoiser, prompt, cfg)
    eos = denoiser.vocab.eos_id
    while True:
        start = len(session.committed)
        tokens = session.decode_next(cfg.block_size)
        eos_at = _first_eos(tokens, eos)
        if eos_at is not None:
            del session.committed[start + eos_at + 1 :]
            return session.result(StopReason.EOS)
        if len(session.committed) >= cfg.max_new_tokens:
            del session.committed[cfg.max_new_tokens :]
            return session.result(StopReason.MAX_LENGTH)


def generate_tccf(denoiser: Denoiser, prompt, cfg: DecodingConfig) -> GenerationResult:
    """Two-stage generation: think coarse, then critique fine.

    Stage 1 decodes blocks of ``b_think`` and scans the full committed
    output after each block for the marker sequence (occurrences spanning
    block boundaries included). On a hit, the marker and everything after
    it are replaced by the transition sequence and stage 2 takes over with
    blocks of ``b_critic`` until eos or ``max_new_tokens``. Hitting the
    stage-1 cap without a marker forces the transition splice instead. An
    eos that lands before any marker ends the run single-stage, with the
    trace noting that the critic stage never ran.

    Length budgets compare the committed length including spliced-in
    transition tokens, so a degenerate config whose marker equals its
    transition reproduces the plain loop exactly.
    """
    tc = cfg.tccf
    if tc is None:
        raise ValueError("generate_tccf requires cfg.tccf")
    session = GenerationSession.start(denoiser, prompt, cfg)
    eos = denoiser.vocab.eos_id
    stage1_cap = tc.stage1_max_tokens if tc.stage1_max_tokens is not None else cfg.max_new_tokens

    splice_at: int | None = None
    forced = False
    while True:
        start = len(session.committed)
        tokens = session.decode_next(tc.b_think)
        marker_at = find_marker(session.committed, tc.marker)
        eos_at = _first_eos(tokens, eos)
        eos_abs = start + eos_at if eos_at is not None else None
        if marker_at is not None and (eos_abs is None or marker_at + len(tc.marker) <= eos_abs):
            # Drop the marker and the tail decoded after it, then bridge.
            del session.committed[marker_at:]
            session.committed.extend(tc.transition)
            splice_at = marker_at
            break
        if eos_abs is not None:
            del session.committed[eos_abs + 1 :]
            trace = TccfTrace(
                stage1_passes=len(session.records),
                stage2_passes=0,
                splice_position=None,
                forced_splice=False,
                critic_ran=False,
            )
            return session.result(StopReason.EOS, trace)
        if len(session.committed) >= stage1_cap:
            splice_at = len(session.committed)
            session.committed.extend(tc.transition)
            forced = True
            break

    stage1_passes = len(session.records)
    stop = StopReason.MAX_LENGTH
    while len(session.committed) < cfg.max_new_tokens:
        start = len(session.committed)
        tokens = session.decode_next(tc.b_critic)
        eos_at = _first_eos(tokens, eos)
        if eos_at is not None:
            del session.committed[start + eos_at + 1 :]
            stop = StopReason.EOS
            break
    if stop is StopReason.MAX_LENGTH:
        del session.committed[cfg.max_new_tokens :]
    stage2_passes = len(session.records) - stage1_passes
    trace = TccfTrace(
        stage1_passes=stage1_passes,
        stage2_passes=stage2_passes,
        splice_position=splice_at,
        forced_splice=forced,
        critic_ran=stage2_passes > 0,
    )
    return session.result(stop, trace)
