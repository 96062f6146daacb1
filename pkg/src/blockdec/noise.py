"""Forward masking process and the masked-likelihood training bound.

The forward process masks each position independently with probability
``t`` (linear schedule: keep probability ``1 - t``). The estimator below
Monte-Carlo averages the per-``t`` reconstruction loss of a denoiser over
caller-supplied noise levels, block by block with clean left context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BlockState, Vocab

__all__ = ["LINEAR", "NoiseSchedule", "forward_mask", "nelbo_estimate"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Masking schedule; only the linear family is implemented."""

    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError(f"unknown schedule kind: {self.kind!r}")

    def keep_probability(self, t: float) -> float:
        self._check(t)
        return 1.0 - t

    def mask_probability(self, t: float) -> float:
        self._check(t)
        return t

    @staticmethod
    def _check(t: float) -> None:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"noise level t={t!r} outside [0, 1]")


LINEAR = NoiseSchedule()


def forward_mask(
    block: BlockState,
    t: float,
    rng: np.random.Generator,
    schedule: NoiseSchedule = LINEAR,
) -> BlockState:
    """Mask each position of a clean block independently.

    Consumes exactly ``len(block)`` uniform draws in position order, so a
    seeded generator reproduces the same mask pattern bit for bit.
    ``t = 0`` masks nothing and ``t = 1`` masks everything.
    """
    if block.masked_positions():
        raise ValueError("forward_mask expects a fully clean block")
    p = schedule.mask_probability(t)
    draws = rng.random(len(block))
    tokens = [
        block.mask_id if u < p else tok for tok, u in zip(block.tokens, draws)
    ]
    return BlockState.from_tokens(tokens, block.mask_id)


def nelbo_estimate(
    denoiser,
    prompt,
    response,
    block_size: int,
    t_samples,
    rng: np.random.Generator,
    schedule: NoiseSchedule = LINEAR,
) -> float:
    """Monte-Carlo estimate of the masked reconstruction bound.

    For each noise level ``t`` the response blocks are independently
    masked, the denoiser predicts every masked position given the clean
    prompt and the clean preceding blocks, and the negative log
    probability of the true tokens is summed and scaled by ``1/t``. The
    returned value is the mean over ``t_samples``.

    Parameters
    ----------
    denoiser : object with ``vocab`` and ``predict(context, block)``
    prompt : sequence of conditioning tokens (may be empty)
    response : sequence of response tokens; padded with ``pad_id`` up to
        a multiple of ``block_size``. Pad positions are never masked and
        never contribute loss.
    t_samples : iterable of noise levels in (0, 1]; the caller owns the
        sampling strategy (uniform on (0, 1] is the usual choice).
    rng : generator driving the mask draws, consumed in block order.

    Returns
    -------
    float
        Mean scaled reconstruction loss; 0 when every prediction puts
        probability one on the truth, ``inf`` if any true token ever
        receives zero mass.
    """
    vocab: Vocab = denoiser.vocab
    response = list(response)
    if not response:
        raise ValueError("response must be nonempty")
    t_samples = [float(t) for t in t_samples]
    if not t_samples:
        raise ValueError("t_samples must be nonempty")
    for t in t_samples:
        if not 0.0 < t <= 1.0:
            raise ValueError(f"noise level t={t!r} outside (0, 1]")
    if block_size < 1:
        raise ValueError("block_size must be positive")

    pad = (-len(response)) % block_size
    padded = response + [vocab.pad_id] * pad
    blocks = [padded[i : i + block_size] for i in range(0, len(padded), block_size)]

    estimates = []
    with np.errstate(divide="ignore"):
        for t in t_samples:
            total = 0.0
            for k, truth in enumerate(blocks):
                noised = forward_mask(
                    BlockState.from_tokens(truth, vocab.mask_id), t, rng, schedule
                )
                # Pads stay clean regardless of the draw.
                for i, tok in enumerate(truth):
                    if tok == vocab.pad_id and noised.mask_flags[i]:
                        noised.assign(i, tok)
                masked = noised.masked_positions()
                if not masked:
                    continue
                context = list(prompt) + padded[: k * block_size]
                preds = {p.position: p for p in denoiser.predict(context, noised)}
                for i in masked:
                    total += -float(np.log(preds[i].probs[truth[i]]))
            estimates.append(total / t)
    return float(np.mean(estimates))
