import itertools
import math

import numpy as np
import pytest

from saic.decoding import (DecodeConfig, Hypothesis, beam_search, kbest_fillings, decode, decode_aic, decode_ir_naic,
                           decode_naic, decode_saic, greedy_chain, mask_predict, remask_schedule,
                           rescore_saic, score_hypothesis)
from saic.errors import ContractError
from saic.masks import causal_mask, expand_with_masks, full_mask
from saic.model import decoder_forward, encode
from saic.nn import log_softmax_np
from saic.tokens import BOG, EOS, MASK, PAD, UNGENERATABLE

from .helpers import tiny_config, tiny_params

WORDS = (4, 5)       # vocab 6: four specials plus two words


def _setup(seed, vocab=6, scale=3.0):
    cfg = tiny_config(vocab_size=vocab)
    P = tiny_params(cfg, seed, scale)
    feat = np.random.default_rng(seed + 500).normal(size=(3, cfg.d_feat))
    return cfg, P, feat, encode(feat, P, cfg)


def _lp(logits):
    lp = log_softmax_np(np.asarray(logits, dtype=np.float64))
    lp[..., list(UNGENERATABLE)] = -np.inf
    return lp


def forced_outliner_score(mem, P, cfg, words, terminated):
    """Teacher-forced log-prob of ``words`` (+[eos] if terminated) in one causal pass."""
    tok = [BOG, *words]
    lp = _lp(decoder_forward(tok, mem, causal_mask(len(tok)), P, cfg).data)
    targets = list(words) + ([EOS] if terminated else [])
    return sum(lp[i, t] for i, t in enumerate(targets))


def all_sequences(max_steps):
    """Every (words, terminated) the autoregressive search could emit."""
    for n in range(max_steps):
        for w in itertools.product(WORDS, repeat=n):
            yield list(w), True
    for w in itertools.product(WORDS, repeat=max_steps):
        yield list(w), False


def best_fill_score(mem, P, cfg, leaders, k):
    seq = expand_with_masks(leaders, k)
    lp = _lp(decoder_forward(seq, mem, full_mask(len(seq)), P, cfg).data)
    return sum(lp[i].max() for i in range(len(seq)) if i % k)


# ------------------------------------------------------------------- config

def test_beam_constraint():
    DecodeConfig("SAIC", k=4, m_out=5, m_fill=1)
    with pytest.raises(ContractError, match="M_out >= M_fill"):
        DecodeConfig("SAIC", m_out=1, m_fill=5)
    with pytest.raises(ContractError):
        DecodeConfig("Beamless")


def test_score_decomposition():
    assert score_hypothesis(-1.0, -0.5) == -1.5
    assert score_hypothesis([-0.25, -0.25], [-0.5]) == -1.0
    assert Hypothesis([4], -2.0, -1.0).total == -3.0


def test_remask_schedule():
    assert remask_schedule(10, 5) == [10, 8, 6, 4, 2]
    assert remask_schedule(7, 1) == [7]


# --------------------------------------------------------------------- AIC

@pytest.mark.parametrize("seed", range(4))
def test_aic_greedy_is_argmax_chain(seed):
    cfg, P, _, mem = _setup(seed, vocab=9, scale=1.0)
    h = decode_aic(mem, P, cfg, beam=1, max_len=10)
    assert h.tokens == greedy_chain(mem, P, cfg, 10)
    assert len(h.tokens) <= 10 and EOS not in h.tokens


@pytest.mark.parametrize("seed", range(3))
def test_aic_covering_beam_equals_exhaustive(seed):
    cfg, P, _, mem = _setup(seed)
    max_len = 6
    scored = [(forced_outliner_score(mem, P, cfg, w, t), w, t) for w, t in all_sequences(max_len)]
    best = max(scored, key=lambda s: s[0])
    covering = 3 * 2 ** (max_len - 1)
    h = decode_aic(mem, P, cfg, beam=covering, max_len=max_len)
    assert h.tokens == best[1] and h.terminated == best[2]
    assert h.outliner_logprob == pytest.approx(best[0], abs=1e-9)
    for m in (1, 2, 5):
        assert decode_aic(mem, P, cfg, beam=m, max_len=max_len).outliner_logprob <= best[0] + 1e-12


def test_beam_results_sorted_and_tokens_clean():
    cfg, P, _, mem = _setup(7, vocab=9)
    res = beam_search(mem, P, cfg, beam=4, max_steps=5, keep=4)
    scores = [e.score for e in res]
    assert scores == sorted(scores, reverse=True)
    for e in res:
        assert not set(e.tokens) & {PAD, BOG, MASK, EOS}
        assert e.terminated or len(e.tokens) == 5


# -------------------------------------------------------------------- SAIC

@pytest.mark.parametrize("seed", range(3))
def test_saic_covering_beams_equal_two_stage_oracle(seed):
    cfg, P, feat, mem = _setup(seed)
    k, max_len = 2, 8
    steps = math.ceil(max_len / k)
    best = -math.inf
    for w, t in all_sequences(steps):
        s = forced_outliner_score(mem, P, cfg, w, t)
        if w:
            s += best_fill_score(mem, P, cfg, w, k)
        best = max(best, s)
    covering = DecodeConfig("SAIC", k=k, m_out=32, m_fill=32, max_len=max_len)
    h = decode_saic(feat, P, cfg, covering)
    assert h.total == pytest.approx(best, abs=1e-9)
    for m_out, m_fill in ((1, 1), (3, 1), (3, 3), (5, 2)):
        small = decode_saic(feat, P, cfg, DecodeConfig("SAIC", k=k, m_out=m_out, m_fill=m_fill, max_len=max_len))
        assert small.total <= best + 1e-12


def test_saic_lengths_and_truncation():
    cfg, P, feat, mem = _setup(3, vocab=9, scale=1.0)
    for k in (2, 3, 4):
        h = decode_saic(feat, P, cfg, DecodeConfig("SAIC", k=k, max_len=12))
        if h.degenerate:
            continue
        assert len(h.raw) == k * len(h.leaders)
        assert h.raw[::k] == h.leaders
        assert len(h.tokens) <= len(h.raw)
        assert EOS not in h.tokens
        if EOS in h.raw:
            assert h.tokens == h.raw[: h.raw.index(EOS)]


def test_saic_rescore_matches():
    cfg, P, feat, mem = _setup(4, vocab=9, scale=1.0)
    for k in (1, 2, 4):
        h = decode_saic(feat, P, cfg, DecodeConfig("SAIC", k=k, m_out=3, m_fill=2, max_len=12))
        o, f = rescore_saic(mem, P, cfg, h, k)
        assert o == pytest.approx(h.outliner_logprob, abs=1e-9)
        assert f == pytest.approx(h.filler_logprob, abs=1e-9)


def test_saic_k1_matches_aic_greedy_across_checkpoints():
    agree = 0
    for seed in range(100):
        cfg, P, feat, mem = _setup(seed, vocab=9, scale=1.0 + (seed % 4))
        P32 = {n: v.astype(np.float32) for n, v in P.items()}
        a = decode(feat, P32, cfg, DecodeConfig("AIC", max_len=10)).tokens
        s = decode(feat, P32, cfg, DecodeConfig("SAIC", k=1, max_len=10)).tokens
        assert s == a
        agree += 1
    assert agree == 100


# ---------------------------------------------------------- NAIC / IR-NAIC

def test_ir_naic_one_iteration_is_naic():
    cfg, P, _, mem = _setup(5, vocab=9)
    assert decode_ir_naic(mem, P, cfg, 6, 1) == decode_naic(mem, P, cfg, 6)


def test_mask_predict_keeps_visible_tokens():
    cfg, P, _, mem = _setup(6, vocab=9)
    start = [4, MASK, 6, MASK, MASK, 7]
    for iters in (1, 3):
        out, conf = mask_predict(mem, P, cfg, start, iters)
        assert [out[i] for i in (0, 2, 5)] == [4, 6, 7]
        assert all(out[i] not in UNGENERATABLE for i in (1, 3, 4))
        assert conf[0] == conf[2] == conf[5] == 0.0


def test_naic_length_sources():
    cfg, P, feat, _ = _setup(6, vocab=9)
    h = decode(feat, P, cfg, DecodeConfig("NAIC"), ref_len=5)
    assert len(h.raw) == 5
    h = decode(feat, P, cfg, DecodeConfig("IRNAIC", iterations=3, length_source="mean"), mean_len=4.4)
    assert len(h.raw) == 4
    with pytest.raises(ContractError):
        decode(feat, P, cfg, DecodeConfig("NAIC"))
    with pytest.raises(ContractError):
        decode_naic(encode(feat, P, cfg), P, cfg, 0)


def test_kbest_fillings_match_enumeration():
    rng = np.random.default_rng(3)
    lp = np.log(rng.dirichlet(np.ones(4), size=3))
    every = sorted(((sum(lp[i, t] for i, t in enumerate(c)), c) for c in itertools.product(range(4), repeat=3)),
                   key=lambda x: -x[0])
    got = kbest_fillings(lp, 6)
    assert [tuple(t) for t, _ in got] == [c for _, c in every[:6]]
    assert [s for _, s in got] == pytest.approx([s for s, _ in every[:6]], abs=1e-12)


def test_mask_predict_beam_one_is_plain():
    cfg, P, _, mem = _setup(8, vocab=9)
    start = [MASK, 5, MASK, MASK, 6, MASK]
    for iters in (1, 3):
        a = mask_predict(mem, P, cfg, start, iters)
        b = mask_predict(mem, P, cfg, start, iters, beam=1)
        assert a[0] == b[0]
        wide = mask_predict(mem, P, cfg, start, iters, beam=4)
        if iters == 1:
            assert wide[0] == a[0]
