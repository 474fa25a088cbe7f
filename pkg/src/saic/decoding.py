"""Caption generation: AIC beam search, one-shot NAIC, mask-predict and SAIC.

Scores are sums of natural-log probabilities taken from the full softmax;
[pad], [bog] and [mask] are never generated.  Ties go to the lowest token
index (and, across beams, to the earlier beam).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ContractError
from .masks import causal_mask, expand_with_masks, full_mask, truncate_at_eos
from .model import Memory, ModelConfig, decoder_forward, encode
from .tokens import BOG, EOS, MASK, UNGENERATABLE

STRATEGIES = ("AIC", "NAIC", "IRNAIC", "SAIC")


@dataclass
class DecodeConfig:
    strategy: str = "SAIC"
    k: int = 4
    m_out: int = 1
    m_fill: int = 1
    iterations: int = 1
    max_len: int = 24
    length_source: str = "oracle"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.k < 1 or self.iterations < 1 or self.max_len < 1:
            raise ContractError("k, iterations and max_len must be >= 1")
        if not self.m_out >= self.m_fill >= 1:
            raise ContractError(f"beam sizes must satisfy M_out >= M_fill >= 1 (got {self.m_out}, {self.m_fill})")
        if self.length_source not in ("oracle", "mean"):
            raise ContractError("length_source must be 'oracle' or 'mean'")


@dataclass
class Hypothesis:
    tokens: list[int]
    outliner_logprob: float = 0.0
    filler_logprob: float = 0.0
    terminated: bool = True
    degenerate: bool = False
    leaders: list[int] = field(default_factory=list)
    raw: list[int] = field(default_factory=list)   # pre-truncation filler output

    @property
    def total(self) -> float:
        return score_hypothesis(self.outliner_logprob, self.filler_logprob)


def score_hypothesis(outliner_logprob, filler_logprob) -> float:
    """Outliner term plus Filler term.  Either may be a per-token sequence."""
    return float(np.sum(outliner_logprob)) + float(np.sum(filler_logprob))


def _logprobs(logits: np.ndarray) -> np.ndarray:
    lp = nn.log_softmax_np(logits)
    lp[..., list(UNGENERATABLE)] = -np.inf
    return lp


def _argmax(lp: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest token index
    return np.argmax(lp, axis=-1)


# ------------------------------------------------------------ autoregressive

def next_token_logprobs(mem: Memory, params, cfg: ModelConfig, prefixes) -> np.ndarray:
    """Log-probabilities of the next token after ``[bog] + prefix`` for each
    prefix (all prefixes must share one length).  Shape (len(prefixes), V)."""
    tok = np.array([[BOG, *p] for p in prefixes], dtype=np.intp)
    with nn.no_grad():
        logits = decoder_forward(tok, mem, causal_mask(tok.shape[1]), params, cfg).data
    return _logprobs(logits[:, -1, :].astype(np.float64))


@dataclass
class BeamEntry:
    tokens: list[int]
    logprobs: list[float]
    terminated: bool

    @property
    def score(self) -> float:
        return float(sum(self.logprobs))


def beam_search(mem: Memory, params, cfg: ModelConfig, beam: int, max_steps: int,
                keep: int = 1) -> list[BeamEntry]:
    """Length-bounded beam search from [bog] with a causal mask.

    Each step keeps the ``beam`` best expansions of the live hypotheses;
    expansions ending in [eos] are retired as finished.  Hypotheses still
    live after ``max_steps`` are returned unterminated.  Entries come back
    best first; ``tokens`` excludes the [eos].  The search stops early once
    ``keep`` finished entries outscore every live one, which leaves the top
    ``keep`` results unchanged.
    """
    if beam < 1:
        raise ContractError("beam size must be >= 1")
    alive = [BeamEntry([], [], False)]
    done: list[BeamEntry] = []
    for _ in range(max_steps):
        lp = next_token_logprobs(mem, params, cfg, [e.tokens for e in alive])
        base = np.array([e.score for e in alive])
        cand = (base[:, None] + lp).ravel()
        order = np.argsort(-cand, kind="stable")[:beam]
        V = lp.shape[1]
        nxt = []
        for flat in order:
            if not np.isfinite(cand[flat]):
                break
            b, t = divmod(int(flat), V)
            e = alive[b]
            if t == EOS:
                done.append(BeamEntry(list(e.tokens), e.logprobs + [float(lp[b, t])], True))
            else:
                nxt.append(BeamEntry(e.tokens + [t], e.logprobs + [float(lp[b, t])], False))
        alive = nxt
        if not alive:
            break
        # log-probs are <= 0, so a live hypothesis can never overtake this
        if len(done) >= keep and sorted((d.score for d in done), reverse=True)[keep - 1] >= max(
                a.score for a in alive):
            alive = []
            break
    finals = done + alive
    idx = sorted(range(len(finals)), key=lambda i: (-finals[i].score, i))
    return [finals[i] for i in idx]


def decode_aic(mem: Memory, params, cfg: ModelConfig, beam: int = 1, max_len: int = 24) -> Hypothesis:
    best = beam_search(mem, params, cfg, beam, max_len)[0]
    return Hypothesis(list(best.tokens), outliner_logprob=best.score, terminated=best.terminated,
                      leaders=list(best.tokens), raw=list(best.tokens))


def greedy_chain(mem: Memory, params, cfg: ModelConfig, max_len: int) -> list[int]:
    """Plain argmax chain (reference for beam=1)."""
    out = []
    for _ in range(max_len):
        t = int(_argmax(next_token_logprobs(mem, params, cfg, [out])[0]))
        if t == EOS:
            break
        out.append(t)
    return out


# -------------------------------------------------------- non-autoregressive

def filler_logprobs(mem: Memory, params, cfg: ModelConfig, tokens) -> np.ndarray:
    """Full-mask (bidirectional) pass; returns (n, V) log-probabilities."""
    tok = np.asarray(tokens, dtype=np.intp)
    with nn.no_grad():
        logits = decoder_forward(tok[None], mem, full_mask(len(tok)), params, cfg).data[0]
    return _logprobs(logits.astype(np.float64))


def decode_naic(mem: Memory, params, cfg: ModelConfig, N: int) -> list[int]:
    """One Filler pass over N [mask] tokens; per-position argmax."""
    if N < 1:
        raise ContractError("target length must be >= 1")
    return [int(t) for t in _argmax(filler_logprobs(mem, params, cfg, [MASK] * N))]


def remask_schedule(n: int, iterations: int) -> list[int]:
    """Positions predicted at each iteration: n, then ceil(n * (1 - i/I))."""
    return [n] + [math.ceil(n * (1 - i / iterations)) for i in range(1, iterations)]


def mask_predict(mem: Memory, params, cfg: ModelConfig, tokens, iterations: int = 1, beam: int = 1):
    """Fill every [mask] in ``tokens``, then refine by re-masking the least
    confident of those positions.  Unmasked input tokens are never changed.

    With ``beam > 1`` the first pass keeps the ``beam`` best joint fillings,
    each is refined separately and the one with the highest summed
    log-probability over the masked positions wins.

    Returns ``(tokens, logprobs)`` where ``logprobs[i]`` is the log-probability
    of the token at position i when it was last predicted (0 for fixed ones).
    """
    if iterations < 1 or beam < 1:
        raise ContractError("iterations and beam must be >= 1")
    tok = np.array(tokens, dtype=np.intp)
    open_pos = np.nonzero(tok == MASK)[0]
    conf = np.zeros(len(tok))
    if open_pos.size == 0:
        return [int(t) for t in tok], conf
    schedule = remask_schedule(open_pos.size, iterations)
    lp = filler_logprobs(mem, params, cfg, tok)[open_pos]
    best = None
    for picks, _ in kbest_fillings(lp, beam):
        cand, cc = tok.copy(), conf.copy()
        cand[open_pos] = picks
        cc[open_pos] = lp[np.arange(len(picks)), picks]
        for it in range(1, iterations):
            # stable sort on (confidence, position): ties re-mask the earlier slot
            order = np.argsort(cc[open_pos], kind="stable")
            todo = np.sort(open_pos[order[: schedule[it]]])
            cand[todo] = MASK
            step = filler_logprobs(mem, params, cfg, cand)
            pick = _argmax(step[todo])
            cand[todo] = pick
            cc[todo] = step[todo, pick]
        score = cc[open_pos].sum()
        if best is None or score > best[0]:
            best = (score, cand, cc)
    return [int(t) for t in best[1]], best[2]


def kbest_fillings(lp: np.ndarray, M: int):
    """The ``M`` best joint token choices for independent positions.

    ``lp`` is (n, V).  Returns ``[(tokens, total)]`` best first; a width-M
    beam over positions is exact because the score is a plain sum.
    """
    beams = [((), 0.0)]
    for row in lp:
        top = np.argsort(-row, kind="stable")[:M]
        cand = [(toks + (int(t),), s + float(row[t])) for toks, s in beams for t in top if np.isfinite(row[t])]
        cand.sort(key=lambda c: -c[1])
        beams = cand[:M]
    return [(np.array(t, dtype=np.intp), s) for t, s in beams]


def decode_ir_naic(mem: Memory, params, cfg: ModelConfig, N: int, iterations: int) -> list[int]:
    if N < 1:
        raise ContractError("target length must be >= 1")
    return mask_predict(mem, params, cfg, [MASK] * N, iterations)[0]


# ----------------------------------------------------------------------- SAIC

def fill_groups(mem: Memory, params, cfg: ModelConfig, leaders, k: int):
    """Expand leaders with [mask] and fill them in one pass.

    Returns ``(filled_tokens, per-position log-probs of the filled slots)``.
    """
    seq = expand_with_masks(leaders, k)
    if k == 1:
        return seq, np.zeros(0)
    lp = filler_logprobs(mem, params, cfg, seq)
    pos = np.array([i for i in range(len(seq)) if i % k])
    pick = _argmax(lp[pos])
    out = np.array(seq)
    out[pos] = pick
    return [int(t) for t in out], lp[pos, pick]


def decode_saic(feat, params, cfg: ModelConfig, dcfg: DecodeConfig, mem: Memory | None = None) -> Hypothesis:
    """Outliner beam search over group leaders, then a one-pass Filler.

    The top ``m_fill`` Outliner hypotheses are each filled; the result with
    the best combined score wins.  With k=1 the Filler stage is skipped.
    """
    if dcfg.strategy != "SAIC":
        raise ContractError("decode_saic needs strategy SAIC")
    if mem is None:
        mem = encode(feat, params, cfg)
    k = dcfg.k
    outlines = beam_search(mem, params, cfg, dcfg.m_out, math.ceil(dcfg.max_len / k),
                           keep=dcfg.m_fill)[: dcfg.m_fill]
    best = None
    for o in outlines:
        if not o.tokens:
            h = Hypothesis([], outliner_logprob=o.score, terminated=o.terminated, degenerate=True)
        else:
            filled, flp = fill_groups(mem, params, cfg, o.tokens, k)
            cut, _ = truncate_at_eos(filled)
            h = Hypothesis(cut, o.score, float(flp.sum()), o.terminated, False, list(o.tokens), filled)
        if best is None or h.total > best.total:
            best = h
    return best


def rescore_saic(mem: Memory, params, cfg: ModelConfig, h: Hypothesis, k: int) -> tuple[float, float]:
    """Teacher-forced re-scoring of a SAIC hypothesis with two fresh passes."""
    out_targets = list(h.leaders) + ([EOS] if h.terminated else [])
    tok = np.array([BOG, *h.leaders], dtype=np.intp)
    with nn.no_grad():
        logits = decoder_forward(tok[None], mem, causal_mask(len(tok)), params, cfg).data[0]
    lp = _logprobs(logits.astype(np.float64))
    o = float(sum(lp[i, t] for i, t in enumerate(out_targets)))
    if k == 1 or not h.leaders:
        return o, 0.0
    flp = filler_logprobs(mem, params, cfg, expand_with_masks(h.leaders, k))
    f = float(sum(flp[i, h.raw[i]] for i in range(len(h.raw)) if i % k))
    return o, f


# ------------------------------------------------------------------ dispatch

def decode(feat, params, cfg: ModelConfig, dcfg: DecodeConfig, ref_len: int | None = None,
           mean_len: float | None = None) -> Hypothesis:
    """Run the strategy named in ``dcfg`` on one scene; tokens come back
    truncated at the first [eos]."""
    mem = encode(feat, params, cfg)
    s = dcfg.strategy
    if s == "AIC":
        return decode_aic(mem, params, cfg, dcfg.m_out, dcfg.max_len)
    if s == "SAIC":
        return decode_saic(None, params, cfg, dcfg, mem=mem)
    if dcfg.length_source == "oracle":
        if ref_len is None:
            raise ContractError("oracle length requested but no reference length given")
        N = ref_len
    else:
        if mean_len is None:
            raise ContractError("mean-length heuristic needs mean_len")
        N = max(1, int(round(mean_len)))
    N = max(1, min(N, dcfg.max_len))
    raw, conf = mask_predict(mem, params, cfg, [MASK] * N, 1 if s == "NAIC" else dcfg.iterations)
    cut, found = truncate_at_eos(raw)
    return Hypothesis(cut, 0.0, float(conf.sum()), True, False, [], raw)
