"""Masking experiment: how much does the position of the kept words matter?

Teacher hypotheses (beam 5) are partially replaced by [mask] using one of
four strategies, the masks are filled by a mask-trained decoder in one
pass, and the result is scored against the references.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoding import beam_search, mask_predict
from .errors import ContractError
from .masks import group_mask_rate, group_size_for_rate, mask_hypothesis
from .metrics import evaluate
from .model import encode

STRATEGIES = ("Head", "Tail", "Random", "Group")
P_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass
class MaskRow:
    strategy: str
    p_grid: float          # grid point requested
    p_mask: float          # nominal rate used (1 - 1/k for Group)
    actual_rate: float     # masked fraction actually produced, pooled over scenes
    bleu4: float
    exact_match: float
    runs: int = 1


def teacher_hypotheses(params, cfg, records, beam: int = 5, max_len: int = 24):
    """Best beam hypothesis per scene."""
    out = []
    for r in records:
        mem = encode(r.features, params, cfg)
        out.append(list(beam_search(mem, params, cfg, beam, max_len)[0].tokens))
    return out


def _fill(mem, params, cfg, hyp, strategy, p, rng, iterations=1, beam=1):
    """Mask ``hyp`` and refill it.  Returns (tokens, n_masked, filler score)."""
    if not hyp:
        return [], 0, 0.0
    k = group_size_for_rate(p) if strategy == "Group" else None
    m = mask_hypothesis(hyp, strategy, p if strategy != "Group" else 0.0, rng=rng, k=k)
    if not m.masked_positions:
        return list(hyp), 0, 0.0
    tok, conf = mask_predict(mem, params, cfg, m.tokens, iterations, beam)
    return tok, len(m.masked_positions), float(conf[m.masked_positions].sum())


def run_masking_experiment(filler_params, filler_cfg, records, hypotheses, strategies=STRATEGIES,
                           grid=P_GRID, seeds: int = 4, seed: int = 0) -> list[MaskRow]:
    """One row per (strategy, p_mask).  ``hypotheses[i]`` is the teacher's
    best caption for ``records[i]``.  Random rows average ``seeds`` runs."""
    records = list(records)
    if len(hypotheses) != len(records) or not records:
        raise ContractError("need one teacher hypothesis per record")
    for s in strategies:
        if s not in STRATEGIES:
            raise ContractError(f"unknown masking strategy {s!r}")
    mems = [encode(r.features, filler_params, filler_cfg) for r in records]
    refs = [r.raw for r in records]
    rows = []
    for s in strategies:
        for p in grid:
            if not 0.0 < p <= 1.0:
                raise ContractError("p_mask must lie in (0, 1]")
            runs = seeds if s == "Random" else 1
            bleus, ems, masked, total = [], [], 0, 0
            for run in range(runs):
                rng = np.random.default_rng([seed, run])
                outs = []
                for mem, h in zip(mems, hypotheses):
                    tok, n, _ = _fill(mem, filler_params, filler_cfg, h, s, p, rng)
                    outs.append(tok)
                    masked += n
                    total += len(h)
                rep = evaluate(outs, refs)
                bleus.append(rep.bleu4)
                ems.append(rep.exact_match)
            nominal = group_mask_rate(group_size_for_rate(p)) if s == "Group" else p
            rows.append(MaskRow(s, p, nominal, masked / max(total, 1), float(np.mean(bleus)),
                                float(np.mean(ems)), runs))
    return rows


def run_beam_iteration_grid(filler_params, filler_cfg, records, hypotheses, p: float = 0.7,
                            beams=(1, 5), iterations=(1, 5)) -> list[dict]:
    """Group masking at rate ``p`` refilled with a beam of M joint fillings
    and I mask-predict iterations."""
    refs = [r.raw for r in records]
    mems = [encode(r.features, filler_params, filler_cfg) for r in records]
    out = []
    for M in beams:
        for I in iterations:
            picks = [_fill(mem, filler_params, filler_cfg, h, "Group", p, None, I, M)[0]
                     for mem, h in zip(mems, hypotheses)]
            rep = evaluate(picks, refs)
            out.append({"M": M, "I": I, "k": group_size_for_rate(p), "bleu4": rep.bleu4,
                        "exact_match": rep.exact_match})
    return out


MASK_HEADER = ("strategy", "p_grid", "p_mask", "actual_rate", "bleu4", "exact_match", "runs")


def write_mask_table(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MASK_HEADER)
        for r in rows:
            w.writerow((r.strategy, f"{r.p_grid:.1f}", f"{r.p_mask:.4f}", f"{r.actual_rate:.4f}", f"{r.bleu4:.4f}",
                        f"{r.exact_match:.4f}", r.runs))


def write_plot_data(out_dir, rows) -> list[Path]:
    """One ``<strategy>.dat`` per series: ``p_mask bleu4`` per line.

    Group is plotted at its nominal rate 1 - 1/k.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in dict.fromkeys(r.strategy for r in rows):
        path = out_dir / f"{s}.dat"
        with open(path, "w") as fh:
            for r in rows:
                if r.strategy == s:
                    fh.write(f"{r.p_mask:.4f} {r.bleu4:.6f}\n")
        paths.append(path)
    return paths


def write_grid_table(path, grid_rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("M", "I", "k", "bleu4", "exact_match"))
        for g in grid_rows:
            w.writerow((g["M"], g["I"], g["k"], f"{g['bleu4']:.4f}", f"{g['exact_match']:.4f}"))
