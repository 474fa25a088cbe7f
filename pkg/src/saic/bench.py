"""Abstract decoding cost, the analytical speedup ratio and wall-clock latency.

Step counts and costs follow the per-strategy formulas:

    AIC      N steps          sum_{i<=N} Q(i)
    NAIC     1 step           Q(1)
    IR-NAIC  I steps          I * Q(1)
    SAIC     ceil(N/k) + 1    sum_{i<=ceil(N/k)} Q(i) + Q(1)

Everything here is exact (ints and Fractions).
"""

from __future__ import annotations

import csv
import gc
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from threadpoolctl import threadpool_limits

from .decoding import DecodeConfig, decode
from .errors import ContractError


@dataclass(frozen=True)
class CostModel:
    name: str
    Q: Callable[[int], int]

    def __call__(self, i: int) -> int:
        if i < 1:
            raise ContractError("step index starts at 1")
        q = self.Q(i)
        if q <= 0:
            raise ContractError("Q(i) must be positive")
        return q


CONSTANT = CostModel("constant", lambda i: 1)
LINEAR = CostModel("linear", lambda i: i)
COST_MODELS = {"constant": CONSTANT, "linear": LINEAR}


def cost_of(strategy: str, N: int, k: int = 1, I: int = 1, Q: CostModel = CONSTANT) -> tuple[int, int]:
    """(steps, abstract cost) of decoding an N-word caption."""
    if N < 1 or k < 1 or I < 1:
        raise ContractError("N, k and I must be >= 1")
    if strategy == "AIC":
        return N, sum(Q(i) for i in range(1, N + 1))
    if strategy == "NAIC":
        return 1, Q(1)
    if strategy == "IRNAIC":
        return I, I * Q(1)
    if strategy == "SAIC":
        n_out = math.ceil(N / k)
        return n_out + 1, sum(Q(i) for i in range(1, n_out + 1)) + Q(1)
    raise ContractError(f"unknown strategy {strategy!r}")


def speedup_ratio(N: int, I: int, B: int = 1) -> Fraction:
    """(N/I) * cost(B, 1) / cost(B, N) with cost(B, n) = B*n."""
    if min(N, I, B) < 1:
        raise ContractError("N, I and B must be >= 1")
    return Fraction(N, I) * Fraction(B * 1, B * N)


# ------------------------------------------------------------------ latency

@dataclass
class CostReport:
    strategy: str
    config: str
    steps: int
    abstract_cost: int
    latency_us: float
    runs_us: list[float] = field(default_factory=list)
    speedup_vs_aic: float = 1.0
    run_speedups: list[float] = field(default_factory=list)

    @property
    def spread(self) -> float:
        """(max - min) / mean of the per-run latencies."""
        return (max(self.runs_us) - min(self.runs_us)) / self.latency_us

    @property
    def speedup_spread(self) -> float:
        """(max - min) / mean of the per-run speedups over the baseline."""
        mean = sum(self.run_speedups) / len(self.run_speedups)
        return (max(self.run_speedups) - min(self.run_speedups)) / mean


def config_label(d: DecodeConfig) -> str:
    if d.strategy == "AIC":
        return f"beam={d.m_out}"
    if d.strategy == "SAIC":
        return f"k={d.k} M_out={d.m_out} M_fill={d.m_fill}"
    if d.strategy == "IRNAIC":
        return f"I={d.iterations}"
    return "-"


def measure_latency(entries, scenes, runs: int = 3, Q: CostModel = CONSTANT, mean_len=None) -> list[CostReport]:
    """Time each ``(params, cfg, dcfg)`` entry; the first AIC entry is the baseline.

    Within a run the entries take turns on each scene, so every per-run
    speedup compares decodes made milliseconds apart under the same host
    load.
    ``speedup_vs_aic`` is the mean of the per-run speedups.  Abstract costs
    use the mean reference length of ``scenes`` rounded to the nearest
    integer.
    """
    scenes = list(scenes)
    if not scenes:
        raise ContractError("no scenes to time")
    base_i = next((i for i, (_, _, d) in enumerate(entries) if d.strategy == "AIC"), None)
    if base_i is None:
        raise ContractError("latency table needs an AIC row as the baseline")
    N = max(1, round(sum(len(s.raw) for s in scenes) / len(scenes)))
    runs_us = [[] for _ in entries]
    gc_was_on = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        with threadpool_limits(limits=1):
            for params, cfg, d in entries:
                decode(scenes[0].features, params, cfg, d, ref_len=len(scenes[0].raw), mean_len=mean_len)
            for _ in range(runs):
                totals = [0.0] * len(entries)
                for s in scenes:
                    for e, (params, cfg, d) in enumerate(entries):
                        t0 = time.perf_counter()
                        decode(s.features, params, cfg, d, ref_len=len(s.raw), mean_len=mean_len)
                        totals[e] += time.perf_counter() - t0
                for e, t in enumerate(totals):
                    runs_us[e].append(t / len(scenes) * 1e6)
    finally:
        if gc_was_on:
            gc.enable()
    reports = []
    for (params, cfg, d), us in zip(entries, runs_us):
        steps, cost = cost_of(d.strategy, N, d.k, d.iterations, Q)
        per_run = [b / x for b, x in zip(runs_us[base_i], us)]
        reports.append(CostReport(d.strategy, config_label(d), steps, cost, sum(us) / len(us), us,
                                  sum(per_run) / len(per_run), per_run))
    return reports


BENCH_HEADER = ("strategy", "config", "steps", "abstract_cost", "latency_us", "runs_us", "speedup")


def write_bench_table(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for r in reports:
            w.writerow((r.strategy, r.config, r.steps, r.abstract_cost, f"{r.latency_us:.1f}",
                        ",".join(f"{x:.1f}" for x in r.runs_us), f"{r.speedup_vs_aic:.2f}x"))
