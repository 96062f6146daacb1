"""Shared test helpers: tiny denoisers and record builders."""

from __future__ import annotations

import math

import numpy as np

from blockdec.core import GenerationResult, PositionPrediction, StepRecord, StopReason, Vocab


def spiked_probs(vocab: Vocab, token: int, peak: float) -> np.ndarray:
    """Peak on one token, remainder uniform over the other ordinary ids."""
    probs = np.zeros(vocab.total_ids)
    if token == vocab.eos_id:
        probs[: vocab.size] = (1.0 - peak) / vocab.size
        probs[vocab.eos_id] = peak
    else:
        probs[: vocab.size] = (1.0 - peak) / (vocab.size - 1)
        probs[token] = peak
    return probs


def preds_from_confs(confs, vocab: Vocab | None = None, token: int = 0):
    """One spiked prediction per (position, confidence) pair."""
    vocab = vocab or Vocab.standard(10)
    out = []
    for pos, conf in confs:
        out.append(PositionPrediction.from_probs(pos, spiked_probs(vocab, token, conf)))
    return out


def spike_conf_for_entropy(vocab: Vocab, target: float) -> float:
    """Invert the spiked-family entropy to hit ``target`` (nats)."""
    size = vocab.size

    def entropy(c: float) -> float:
        rest = (1.0 - c) / (size - 1)
        h = -c * math.log(c)
        if rest > 0.0:
            h -= (size - 1) * rest * math.log(rest)
        return h

    lo, hi = 1.0 / size, 1.0  # entropy falls from ln(size) to 0 on this range
    if not 0.0 <= target <= entropy(lo):
        raise ValueError(f"entropy {target} unreachable with vocab size {size}")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if entropy(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class UniformDenoiser:
    """Uniform distribution over ordinary tokens at every masked position."""

    def __init__(self, vocab: Vocab):
        self.vocab = vocab

    def predict(self, context, block):
        probs = np.zeros(self.vocab.total_ids)
        probs[: self.vocab.size] = 1.0 / self.vocab.size
        return [
            PositionPrediction.from_probs(pos, probs)
            for pos in block.masked_positions()
        ]


class CountingDenoiser:
    """Wrapper that counts predict calls (forward passes)."""

    def __init__(self, inner):
        self.inner = inner
        self.vocab = inner.vocab
        self.calls = 0

    def predict(self, context, block):
        self.calls += 1
        return self.inner.predict(context, block)


def full_random_script(rng: np.random.Generator, vocab: Vocab, blocks: int,
                       block_size: int, conf_lo: float = None):
    """Script covering every (block, step, position) a decode could ask for."""
    lo = conf_lo if conf_lo is not None else 1.0 / vocab.size
    script = {}
    for b in range(blocks):
        for s in range(block_size):
            for p in range(block_size):
                conf = lo + (1.0 - lo) * rng.random() * 0.999
                tok = int(rng.integers(0, vocab.size))
                script[(b, s, p)] = (conf, tok)
    return script


def make_result(output, stop=StopReason.MAX_LENGTH, slot_groups=None,
                confidences=0.8, prompt_len=0, tccf=None):
    """Fabricate a GenerationResult whose steps carry the given slot counts.

    ``confidences`` is either a flat value or one tuple per step.
    """
    if slot_groups is None:
        slot_groups = [1] * len(output)
    steps = []
    for i, width in enumerate(slot_groups):
        if isinstance(confidences, (int, float)):
            confs = tuple([float(confidences)] * width)
        else:
            confs = tuple(confidences[i])
        steps.append(
            StepRecord(
                block_index=0,
                step_index=i,
                threshold_used=None,
                unmasked_positions=tuple(range(width)),
                confidences=confs,
                fallback_fired=False,
            )
        )
    return GenerationResult(
        prompt_len=prompt_len,
        output_tokens=tuple(output),
        forward_passes=len(steps),
        steps=tuple(steps),
        stop_reason=stop,
        tccf=tccf,
    )
