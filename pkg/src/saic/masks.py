"""Attention masks, group layout helpers and hypothesis masking schemes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tokens import EOS, MASK, PAD

STRATEGIES = ("Head", "Tail", "Random", "Group")


def causal_mask(n: int) -> np.ndarray:
    """``allow[i, j]`` iff ``j <= i``."""
    if n < 1:
        raise DimensionError("mask length must be positive")
    return np.tril(np.ones((n, n), dtype=bool))


def full_mask(n: int) -> np.ndarray:
    if n < 1:
        raise DimensionError("mask length must be positive")
    return np.ones((n, n), dtype=bool)


def extract_leaders(seq, k: int) -> list[int]:
    """First token of every group of ``k``: ``out[i] = seq[i*k]``."""
    seq = list(seq)
    if k < 1 or len(seq) % k:
        raise ContractError(f"length {len(seq)} is not a multiple of k={k}")
    return seq[::k]


def expand_with_masks(leaders, k: int) -> list[int]:
    """Insert ``k-1`` [mask] symbols after every leader."""
    leaders = list(leaders)
    if not leaders:
        raise ContractError("no leaders to expand")
    if k < 1:
        raise ContractError("group size must be >= 1")
    out = [MASK] * (k * len(leaders))
    out[::k] = leaders
    return out


def group_mask_rate(k: int) -> float:
    if k < 1:
        raise ContractError("group size must be >= 1")
    return 1.0 - 1.0 / k


def group_size_for_rate(p_mask: float) -> int:
    """Smallest k whose group mask rate reaches ``p_mask``."""
    if not 0.0 <= p_mask < 1.0:
        raise ContractError("group masking needs p_mask in [0, 1)")
    return max(1, math.ceil(1.0 / (1.0 - p_mask) - 1e-12))


def n_masked(n: int, p_mask: float) -> int:
    """``max(1, floor(n * p_mask))``, capped at ``n``."""
    return min(n, max(1, math.floor(n * p_mask + 1e-12)))


@dataclass
class MaskedHypothesis:
    tokens: list[int]
    masked_positions: list[int]
    strategy: str
    p_mask: float


def mask_hypothesis(seq, strategy: str, p_mask: float = 0.0, rng=None, k: int | None = None) -> MaskedHypothesis:
    """Replace part of ``seq`` with [mask] according to ``strategy``.

    Group ignores ``p_mask`` and keeps the first word of each of the
    ``ceil(N/k)`` groups; its reported ``p_mask`` is ``1 - 1/k``.
    """
    seq = list(seq)
    n = len(seq)
    if n < 1:
        raise ContractError("cannot mask an empty hypothesis")
    if strategy == "Group":
        if k is None or k < 1:
            raise ContractError("Group masking needs a group size k >= 1")
        pos = [i for i in range(n) if i % k]
        p_mask = group_mask_rate(k)
    else:
        if not 0.0 < p_mask <= 1.0:
            raise ContractError(f"p_mask must lie in (0, 1], got {p_mask}")
        m = n_masked(n, p_mask)
        if strategy == "Head":
            pos = list(range(m))
        elif strategy == "Tail":
            pos = list(range(n - m, n))
        elif strategy == "Random":
            if rng is None:
                raise ContractError("Random masking needs an rng")
            pos = sorted(int(i) for i in rng.choice(n, size=m, replace=False))
        else:
            raise ContractError(f"unknown masking strategy {strategy!r}")
    toks = list(seq)
    for i in pos:
        toks[i] = MASK
    return MaskedHypothesis(toks, pos, strategy, p_mask)


# ----------------------------------------------------------- group layout
#
# A caption ``w`` becomes ``w + [eos] + [pad]*`` up to a multiple of k.
# The Outliner emits the leaders of that padded form and stops by emitting
# [eos]; a leader that is itself [eos] doubles as the stop.  The Filler
# sees the non-stop leaders expanded with masks, so N_fill = k * N_out.

def pad_to_groups(words, k: int) -> list[int]:
    words = list(words)
    if EOS in words or PAD in words:
        raise ContractError("caption words must not contain [eos]/[pad]")
    seq = words + [EOS]
    seq += [PAD] * (-len(seq) % k)
    return seq


def outliner_layout(words, k: int) -> tuple[list[int], list[int]]:
    """Return ``(outliner_targets, filler_targets)`` for a caption.

    ``outliner_targets`` ends with the stop [eos]; ``filler_targets`` has
    length ``k * (len(outliner_targets) - 1)``.
    """
    padded = pad_to_groups(words, k)
    leaders = extract_leaders(padded, k)
    if leaders[-1] == EOS:
        out = leaders
        fill = padded[: k * (len(leaders) - 1)]
    else:
        out = leaders + [EOS]
        fill = padded
    return out, fill


def truncate_at_eos(seq) -> tuple[list[int], bool]:
    """Cut at the first [eos]; also report whether one was found."""
    seq = list(seq)
    if EOS in seq:
        return seq[: seq.index(EOS)], True
    return seq, False
