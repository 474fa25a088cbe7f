import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saic.errors import ContractError, DimensionError
from saic.masks import (causal_mask, expand_with_masks, extract_leaders, full_mask, group_mask_rate,
                        group_size_for_rate, mask_hypothesis, n_masked, outliner_layout, pad_to_groups,
                        truncate_at_eos)
from saic.tokens import EOS, MASK, PAD


def test_causal_small():
    assert causal_mask(1).tolist() == [[True]]
    assert causal_mask(2).astype(int).tolist() == [[1, 0], [1, 1]]


def test_causal_matches_predicate():
    m = causal_mask(5)
    for i in range(5):
        for j in range(5):
            assert m[i, j] == (j <= i)


def test_full_mask():
    assert full_mask(1).tolist() == [[True]]
    assert full_mask(3).all()
    for n in range(1, 7):
        assert (full_mask(n).sum(axis=1) == n).all()


def test_zero_length_masks_rejected():
    with pytest.raises(DimensionError):
        causal_mask(0)
    with pytest.raises(DimensionError):
        full_mask(0)


def test_extract_leaders():
    a, b, c, d = 10, 11, 12, 13
    assert extract_leaders([a, b, c, d], 2) == [a, c]
    assert extract_leaders([a, b, c, d], 4) == [a]
    seq = list(np.random.default_rng(0).integers(4, 30, size=12))
    assert extract_leaders(seq, 3) == [seq[0], seq[3], seq[6], seq[9]]
    with pytest.raises(ContractError):
        extract_leaders([a, b, c], 2)


def test_expand_with_masks():
    a, c = 10, 12
    assert expand_with_masks([a, c], 2) == [a, MASK, c, MASK]
    assert expand_with_masks([a], 1) == [a]
    with pytest.raises(ContractError):
        expand_with_masks([], 2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(4, 40), min_size=1, max_size=10), st.integers(1, 6))
def test_leader_round_trip(leaders, k):
    seq = expand_with_masks(leaders, k)
    assert len(seq) == k * len(leaders)
    assert extract_leaders(seq, k) == leaders
    assert all(t == MASK for i, t in enumerate(seq) if i % k)


@pytest.mark.parametrize("k, rate", [(2, 0.5), (4, 0.75), (1, 0.0)])
def test_group_mask_rate(k, rate):
    assert group_mask_rate(k) == rate


def test_group_mask_rate_rejects_zero():
    with pytest.raises(ContractError):
        group_mask_rate(0)


def test_group_size_for_rate():
    assert group_size_for_rate(0.75) == 4
    assert group_size_for_rate(0.7) == 4
    assert group_size_for_rate(0.5) == 2
    assert group_size_for_rate(0.0) == 1


def test_head_and_tail_examples():
    h = mask_hypothesis([10, 11, 12, 13], "Head", 0.5)
    assert h.masked_positions == [0, 1]
    assert h.tokens == [MASK, MASK, 12, 13]
    t = mask_hypothesis([10, 11, 12], "Tail", 0.1)
    assert t.masked_positions == [2]


def test_group_example():
    g = mask_hypothesis([10, 11, 12, 13, 14], "Group", k=2)
    assert g.masked_positions == [1, 3]
    assert g.tokens == [10, MASK, 12, MASK, 14]
    assert g.p_mask == 0.5


def test_invalid_p_mask():
    for p in (0.0, -0.1, 1.5):
        with pytest.raises(ContractError):
            mask_hypothesis([10, 11], "Head", p)
    with pytest.raises(ContractError):
        mask_hypothesis([10, 11], "Sideways", 0.5)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 30), st.sampled_from(["Head", "Tail", "Random", "Group"]),
       st.floats(0.01, 1.0), st.integers(1, 6), st.integers(0, 2**31))
def test_mask_counts_and_ranges(n, strategy, p, k, seed):
    seq = list(range(10, 10 + n))
    h = mask_hypothesis(seq, strategy, p, rng=np.random.default_rng(seed), k=k)
    pos = h.masked_positions
    assert pos == sorted(set(pos))
    assert all(0 <= i < n for i in pos)
    assert all((h.tokens[i] == MASK) == (i in pos) for i in range(n))
    if strategy == "Group":
        kept = [i for i in range(n) if i not in pos]
        assert all(i % k == 0 for i in kept)
        assert len(kept) == math.ceil(n / k)
        for g in range(math.ceil(n / k)):
            assert sum(1 for i in kept if g * k <= i < (g + 1) * k) == 1
    else:
        assert len(pos) == max(1, math.floor(n * p + 1e-12)) == n_masked(n, p)
        if strategy == "Head":
            assert pos == list(range(len(pos)))
        if strategy == "Tail":
            assert pos == list(range(n - len(pos), n))


def test_random_masks_differ_across_seeds():
    seq = list(range(10, 22))
    masks = {tuple(mask_hypothesis(seq, "Random", 0.5, rng=np.random.default_rng(s)).masked_positions)
             for s in range(4)}
    assert len(masks) == 4


def test_pad_to_groups_and_layout():
    w = [10, 11, 12, 13, 14, 15]            # 6 words + eos -> 8
    assert pad_to_groups(w, 4) == w + [EOS, PAD]
    out, fill = outliner_layout(w, 4)
    assert out == [10, 14, EOS]
    assert fill == w + [EOS, PAD]
    assert len(fill) == 4 * (len(out) - 1)

    w8 = list(range(10, 18))                # eos lands on a leader slot
    out, fill = outliner_layout(w8, 4)
    assert out == [10, 14, EOS]
    assert fill == w8

    out, fill = outliner_layout(w, 1)       # k=1 is plain AIC
    assert out == w + [EOS]
    assert fill == w


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(4, 40), min_size=1, max_size=25), st.integers(1, 6))
def test_padding_invariants(words, k):
    padded = pad_to_groups(words, k)
    assert len(padded) % k == 0
    assert padded.count(EOS) == 1
    assert all(t == PAD for t in padded[padded.index(EOS) + 1:])
    out, fill = outliner_layout(words, k)
    assert out[-1] == EOS and EOS not in out[:-1]
    assert len(fill) == k * (len(out) - 1)
    assert extract_leaders(fill, k) == out[:-1]
    assert truncate_at_eos(fill)[0] == words


def test_truncate_at_eos():
    assert truncate_at_eos([10, EOS, 11, EOS]) == ([10], True)
    assert truncate_at_eos([10, 11]) == ([10, 11], False)
