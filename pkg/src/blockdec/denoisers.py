"""Pluggable denoiser backends and the prediction contract.

A denoiser receives clean left context plus the partially masked block
and must return exactly one prediction per masked position. Backends are
deterministic: all sampling randomness lives in the decoder. The
:func:`predict` wrapper enforces the contract and raises
:class:`ContractViolation` when a backend breaks it.
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from .core import BlockState, PositionPrediction, Vocab

__all__ = [
    "ContractViolation",
    "Denoiser",
    "FixtureError",
    "MarkovDenoiser",
    "OracleDenoiser",
    "ScriptedDenoiser",
    "load_scripted",
    "markov_fit",
    "predict",
]


class ContractViolation(RuntimeError):
    """A backend returned predictions that break the denoiser contract."""


class FixtureError(RuntimeError):
    """A scripted fixture is malformed or does not cover a query."""


class Denoiser(Protocol):
    vocab: Vocab

    def predict(
        self, context: Sequence[int], block: BlockState
    ) -> list[PositionPrediction]: ...


def predict(denoiser: Denoiser, context: Sequence[int], block: BlockState) -> list[PositionPrediction]:
    """Query a backend and enforce the prediction contract.

    Preconditions: the context is mask-free and the block has at least one
    masked position. Postconditions: exactly one prediction per masked
    position, full-width distributions, and zero mass on mask and pad.
    """
    vocab = denoiser.vocab
    if any(tok == vocab.mask_id for tok in context):
        raise ValueError("context must not contain mask tokens")
    masked = block.masked_positions()
    if not masked:
        raise ValueError("block has no masked positions")

    preds = denoiser.predict(context, block)
    if sorted(p.position for p in preds) != masked:
        raise ContractViolation(
            f"backend covered positions {sorted(p.position for p in preds)}, "
            f"expected {masked}"
        )
    for p in preds:
        if p.probs.shape != (vocab.total_ids,):
            raise ContractViolation(
                f"distribution at position {p.position} has shape {p.probs.shape}, "
                f"expected ({vocab.total_ids},)"
            )
        if p.probs[vocab.mask_id] > 0.0 or p.probs[vocab.pad_id] > 0.0:
            raise ContractViolation(
                f"distribution at position {p.position} puts mass on mask or pad"
            )
    return preds


def _spiked_distribution(vocab: Vocab, token: int, peak: float) -> np.ndarray:
    """Probability ``peak`` on ``token``, remainder uniform over the other
    ordinary tokens (over all of them when ``token`` is eos)."""
    probs = np.zeros(vocab.total_ids)
    if token == vocab.eos_id:
        probs[: vocab.size] = (1.0 - peak) / vocab.size
        probs[vocab.eos_id] = peak
    else:
        probs[: vocab.size] = (1.0 - peak) / (vocab.size - 1)
        probs[token] = peak
    return probs


class MarkovDenoiser:
    """Order-k Markov model fitted on a token corpus with add-lambda smoothing.

    A masked position conditions on the contiguous clean run immediately to
    its left (at most ``order`` tokens, block interior first, then the
    context tail). When the adjacent position is itself masked, the single
    nearest clean token to the left stands in; with no clean token at all
    the unigram distribution is used. Unseen contexts back off to shorter
    suffixes and finally to the unigram. Distributions cover ordinary
    tokens only, so Markov-driven generation stops at the length cap.

    Instances are immutable after fitting and safe to share.
    """

    def __init__(self, order: int, smoothing: float, vocab: Vocab,
                 counts: dict[tuple[int, ...], dict[int, int]]):
        if order < 1:
            raise ValueError("order must be at least 1")
        if not (np.isfinite(smoothing) and smoothing >= 0.0):
            raise ValueError("smoothing must be finite and nonnegative")
        if () not in counts or not counts[()]:
            raise ValueError("counts must include a nonempty unigram table")
        self.order = order
        self.smoothing = smoothing
        self.vocab = vocab
        self._counts = {ctx: dict(table) for ctx, table in counts.items()}
        self._totals = {ctx: sum(table.values()) for ctx, table in self._counts.items()}
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def distribution(self, ctx: tuple[int, ...]) -> np.ndarray:
        """Smoothed next-token distribution after ``ctx``, with backoff."""
        for length in range(min(self.order, len(ctx)), 0, -1):
            suffix = ctx[-length:]
            if suffix in self._counts:
                return self._smoothed(suffix)
        return self._smoothed(())

    def _smoothed(self, ctx: tuple[int, ...]) -> np.ndarray:
        cached = self._cache.get(ctx)
        if cached is not None:
            return cached
        size = self.vocab.size
        table = self._counts[ctx]
        vec = np.zeros(size)
        for tok, cnt in table.items():
            vec[tok] = cnt
        probs = np.zeros(self.vocab.total_ids)
        probs[:size] = (vec + self.smoothing) / (self._totals[ctx] + self.smoothing * size)
        self._cache[ctx] = probs
        return probs

    def predict(self, context: Sequence[int], block: BlockState) -> list[PositionPrediction]:
        tokens = list(context) + block.tokens
        clean = [True] * len(context) + [not f for f in block.mask_flags]
        base = len(context)
        preds = []
        for pos in block.masked_positions():
            idx = base + pos
            if idx > 0 and clean[idx - 1]:
                run: list[int] = []
                j = idx - 1
                while j >= 0 and clean[j] and len(run) < self.order:
                    run.append(tokens[j])
                    j -= 1
                ctx = tuple(reversed(run))
            else:
                j = idx - 1
                while j >= 0 and not clean[j]:
                    j -= 1
                ctx = (tokens[j],) if j >= 0 else ()
            preds.append(PositionPrediction.from_probs(pos, self.distribution(ctx)))
        return preds


def markov_fit(corpus: Sequence[int], order: int, smoothing: float,
               vocab: Vocab | None = None) -> MarkovDenoiser:
    """Count every window of length 1..order over the corpus and build the
    smoothed Markov backend. The unigram table counts all corpus tokens."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus must be nonempty")
    if order < 1:
        raise ValueError("order must be at least 1")
    if vocab is None:
        vocab = Vocab.standard(max(2, max(corpus) + 1))
    for tok in corpus:
        if not 0 <= tok < vocab.size:
            raise ValueError(f"corpus token {tok} outside the ordinary range")

    counts: dict[tuple[int, ...], dict[int, int]] = {(): {}}
    uni = counts[()]
    for tok in corpus:
        uni[tok] = uni.get(tok, 0) + 1
    for length in range(1, order + 1):
        for i in range(len(corpus) - length):
            ctx = tuple(corpus[i : i + length])
            nxt = corpus[i + length]
            table = counts.setdefault(ctx, {})
            table[nxt] = table.get(nxt, 0) + 1
    return MarkovDenoiser(order, smoothing, vocab, counts)


class OracleDenoiser:
    """Backend that knows the ground-truth continuation.

    The true token at distance ``d`` from the nearest clean token on its
    left gets probability ``max(1/size, base_confidence * decay**(d-1))``;
    the remainder spreads uniformly over the other ordinary tokens.
    Positions past the end of the target are treated as eos, so greedy
    decoding terminates right after the target. ``prompt_len`` anchors
    block positions to target offsets.
    """

    def __init__(self, target: Sequence[int], vocab: Vocab,
                 base_confidence: float, decay: float, prompt_len: int = 0):
        if not 1.0 / vocab.size < base_confidence <= 1.0:
            raise ValueError("base_confidence must lie in (1/size, 1]")
        if not 0.0 < decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if prompt_len < 0:
            raise ValueError("prompt_len must be nonnegative")
        self.target = tuple(target)
        for tok in self.target:
            if not (0 <= tok < vocab.size or tok == vocab.eos_id):
                raise ValueError(f"target token {tok} is neither ordinary nor eos")
        self.vocab = vocab
        self.base_confidence = base_confidence
        self.decay = decay
        self.prompt_len = prompt_len

    def predict(self, context: Sequence[int], block: BlockState) -> list[PositionPrediction]:
        offset = len(context) - self.prompt_len
        if offset < 0:
            raise ValueError("context is shorter than prompt_len")
        preds = []
        for pos in block.masked_positions():
            # Distance to the nearest clean token on the left; the context
            # tail counts, and an empty context behaves like distance to
            # the sequence start.
            j = pos - 1
            while j >= 0 and block.mask_flags[j]:
                j -= 1
            d = pos - j
            gen_index = offset + pos
            true_tok = self.target[gen_index] if gen_index < len(self.target) else self.vocab.eos_id
            peak = max(1.0 / self.vocab.size, self.base_confidence * self.decay ** (d - 1))
            preds.append(
                PositionPrediction.from_probs(pos, _spiked_distribution(self.vocab, true_tok, peak))
            )
        return preds


class ScriptedDenoiser:
    """Backend that replays explicit per-query predictions from a script.

    The script maps ``(block_index, step_index, position)`` to a
    ``(confidence, token_id)`` pair; the distribution puts ``confidence``
    on the token and spreads the rest uniformly over the other ordinary
    tokens. A query is a script miss -> :class:`FixtureError`.

    The predict signature carries no step counter, so the instance tracks
    one itself: a fully masked block always starts step 0 of the next
    block (inside one block decode the masked set strictly shrinks), and
    a context of ``prompt_len`` tokens restarts block numbering. This is
    per-instance mutable state: use one instance per decoded sequence, or
    call :meth:`reset` between generations.
    """

    def __init__(self, script, vocab: Vocab, prompt_len: int = 0):
        self.vocab = vocab
        self.prompt_len = prompt_len
        self._script: dict[tuple[int, int, int], tuple[float, int]] = {}
        floor = 1.0 / vocab.size
        for key, (conf, tok) in dict(script).items():
            block_i, step_i, pos = key
            if min(block_i, step_i, pos) < 0:
                raise FixtureError(f"script key {key} has a negative component")
            if not floor <= conf <= 1.0:
                raise FixtureError(
                    f"script entry {key}: confidence {conf} outside [1/size, 1]"
                )
            if not (0 <= tok < vocab.size or tok == vocab.eos_id):
                raise FixtureError(f"script entry {key}: bad token id {tok}")
            self._script[(block_i, step_i, pos)] = (float(conf), int(tok))
        self._block = -1
        self._step = -1

    def reset(self) -> None:
        self._block = -1
        self._step = -1

    def predict(self, context: Sequence[int], block: BlockState) -> list[PositionPrediction]:
        masked = block.masked_positions()
        if len(masked) == len(block):
            self._block = 0 if len(context) == self.prompt_len else self._block + 1
            self._step = 0
        else:
            self._step += 1
        preds = []
        for pos in masked:
            key = (self._block, self._step, pos)
            entry = self._script.get(key)
            if entry is None:
                raise FixtureError(
                    f"script has no entry for block={self._block} "
                    f"step={self._step} position={pos}"
                )
            conf, tok = entry
            preds.append(
                PositionPrediction.from_probs(pos, _spiked_distribution(self.vocab, tok, conf))
            )
        return preds


def load_scripted(path, vocab: Vocab, prompt_len: int = 0) -> ScriptedDenoiser:
    """Parse a script fixture: one ``block step position conf token_id``
    entry per line, blank lines and ``#`` comments ignored."""
    script: dict[tuple[int, int, int], tuple[float, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise FixtureError(
                    f"{path}: line {lineno}: expected 'block step position conf token_id'"
                )
            try:
                key = (int(parts[0]), int(parts[1]), int(parts[2]))
                entry = (float(parts[3]), int(parts[4]))
            except ValueError as exc:
                raise FixtureError(f"{path}: line {lineno}: {exc}") from exc
            if key in script:
                raise FixtureError(f"{path}: line {lineno}: duplicate entry for {key}")
            script[key] = entry
    if not script:
        raise FixtureError(f"{path}: script fixture is empty")
    return ScriptedDenoiser(script, vocab, prompt_len=prompt_len)
