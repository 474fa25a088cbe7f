"""Abstract decoding cost per strategy, and the measured latency of two
checkpoints if given.

Run: python3 demos/03_decoding_cost.py [teacher.ckpt saic.ckpt]
"""
import sys

from saic import bench, taskgen
from saic.decoding import DecodeConfig
from saic.model import load_checkpoint

N = 16
print(f"caption length N={N}")
print(f"{'strategy':10s} {'Q':8s} steps  cost")
for Q in (bench.CONSTANT, bench.LINEAR):
    for name, kw in (("AIC", {}), ("SAIC", {"k": 2}), ("SAIC", {"k": 4}), ("NAIC", {}), ("IRNAIC", {"I": 5})):
        steps, cost = bench.cost_of(name, N, Q=Q, **kw)
        label = name + "".join(f" {a}={b}" for a, b in kw.items())
        print(f"{label:10s} {Q.name:8s} {steps:5d} {cost:5d}")

# The analytical ratio (N/I) * cost(B,1)/cost(B,N) with cost(B,n) = B*n.
# Under this abstract model the batch size cancels and the value is 1/I.
print("analytical ratio, N=16 I=5:", bench.speedup_ratio(16, 5))

if len(sys.argv) == 3:
    tc, tp = load_checkpoint(sys.argv[1])
    sc, sp = load_checkpoint(sys.argv[2])
    k = 2
    scenes = [taskgen.CaptionRecord(s.scene_id, s.features, s.reference)
              for s in taskgen.gen_dataset(60, seed=11)]
    reps = bench.measure_latency([(tp, tc, DecodeConfig("AIC")), (sp, sc, DecodeConfig("SAIC", k=k))],
                                 scenes, runs=2)
    for r in reps:
        print(f"{r.strategy:5s} {r.config:12s} {r.latency_us / 1e3:6.2f} ms  speedup {r.speedup_vs_aic:.2f}x"
              f"  (runs {', '.join(f'{x:.2f}' for x in r.run_speedups)})")
