"""Tour of the synthetic captioning task and the four masking patterns.

Run: python3 demos/01_task_and_masking.py
"""
import numpy as np

from saic import taskgen
from saic.masks import (expand_with_masks, extract_leaders, group_mask_rate, mask_hypothesis,
                        outliner_layout)
from saic.tokens import MASK

scenes = taskgen.gen_dataset(5, seed=7)
for s in scenes:
    print(f"scene {s.scene_id}: {len(s.objects)} objects, features {s.features.shape}")
    print("   ", taskgen.to_words(s.reference))

# Each object becomes one row of noisy features; the encoder sees a set.
caption = scenes[0].reference
print("\ncaption ids:", caption)


def show(tokens):
    return " ".join("_" if t == MASK else taskgen.to_words([t]) for t in tokens)


rng = np.random.default_rng(0)
print("\nmasking at p = 0.5")
for strategy in ("Head", "Tail", "Random"):
    m = mask_hypothesis(caption, strategy, 0.5, rng=rng)
    print(f"  {strategy:6s} {show(m.tokens)}")
for k in (2, 4):
    m = mask_hypothesis(caption, "Group", k=k)
    print(f"  Group k={k} (rate {group_mask_rate(k):.2f}) {show(m.tokens)}")

# Group masking is exactly what the two-pass decoder produces: the outliner
# writes one leader per group, the filler completes the rest in parallel.
leaders = extract_leaders(caption, 4)
print("\nleaders:", show(leaders))
print("filler input:", show(expand_with_masks(leaders, 4)))
out_tgt, fill_tgt = outliner_layout(caption, 4)
print("outliner targets:", show(out_tgt))
print("filler targets:  ", show(fill_tgt))
