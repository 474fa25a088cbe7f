"""Train a small teacher, distil it, fine-tune a two-pass model and compare
decoding strategies.  Takes a couple of minutes on one core.

Run: python3 demos/02_train_and_decode.py [workdir]
"""
import sys
import tempfile
import time
from pathlib import Path

from saic import taskgen
from saic.decoding import DecodeConfig, decode
from saic.metrics import evaluate
from saic.model import ModelConfig, as_arrays, save_checkpoint
from saic.training import TrainConfig, generate_distillation_set, train_saic, train_teacher

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="saic-demo-"))
work.mkdir(parents=True, exist_ok=True)

split = taskgen.split_dataset(taskgen.gen_dataset(600, seed=3))
records = {k: [taskgen.CaptionRecord(s.scene_id, s.features, s.reference) for s in v] for k, v in split.items()}
train, val, test = records["train"], records["val"], records["test"]

cfg = ModelConfig(vocab_size=taskgen.VOCAB_SIZE, d_feat=taskgen.D_FEAT, d_model=32, d_ff=64, heads=4)
t0 = time.perf_counter()
teacher, _ = train_teacher(train, cfg, TrainConfig(mode="teacher", epochs=30, lr=2e-3), val_records=val)
print(f"teacher trained in {time.perf_counter() - t0:.0f}s")
save_checkpoint(work / "teacher.ckpt", cfg, as_arrays(teacher))

# Sequence-level distillation: the student learns the teacher's beam output.
distilled = generate_distillation_set(as_arrays(teacher), cfg, train, beam=3)
t0 = time.perf_counter()
cfg, student, _ = train_saic(distilled, work / "teacher.ckpt", TrainConfig(mode="saic", epochs=30, lr=2e-3, k=2))
print(f"two-pass model trained in {time.perf_counter() - t0:.0f}s")
save_checkpoint(work / "saic.ckpt", cfg, as_arrays(student))

refs = [r.raw for r in test]
teacher32, student32 = as_arrays(teacher), as_arrays(student)
runs = [("AIC beam 3", teacher32, DecodeConfig("AIC", m_out=3)),
        ("SAIC k=2", student32, DecodeConfig("SAIC", k=2)),
        ("SAIC k=2 M=3/2", student32, DecodeConfig("SAIC", k=2, m_out=3, m_fill=2)),
        ("IR-NAIC I=4", student32, DecodeConfig("IRNAIC", iterations=4))]
for name, params, dcfg in runs:
    t0 = time.perf_counter()
    out = [decode(r.features, params, cfg, dcfg, ref_len=len(r.raw)).tokens for r in test]
    ms = (time.perf_counter() - t0) / len(test) * 1e3
    rep = evaluate(out, refs)
    print(f"{name:16s} BLEU-4 {rep.bleu4:.3f}  exact {rep.exact_match:.2f}  {ms:.1f} ms/caption")

h = decode(test[0].features, student32, cfg, DecodeConfig("SAIC", k=2))
print("\nreference:", taskgen.to_words(test[0].raw))
print("leaders:  ", taskgen.to_words(h.leaders))
print("output:   ", taskgen.to_words(h.tokens),
      f"(outliner {h.outliner_logprob:.2f} + filler {h.filler_logprob:.2f})")
print(f"\ncheckpoints in {work}")
