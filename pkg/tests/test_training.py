import math

import numpy as np
import pytest

from saic import nn, taskgen
from saic.errors import ContractError
from saic.masks import causal_mask, full_mask
from saic.model import ModelConfig, count_params, decoder_forward, encode, init_params, load_checkpoint, save_checkpoint
from saic.tokens import BOG, EOS, MASK, PAD
from saic.training import (CurriculumSchedule, TrainConfig, build_training_batch, curriculum_rate,
                           generate_distillation_set, hybrid_sample, joint_loss, loss_for, make_example,
                           read_log, split_count, train, train_saic)


def small_cfg():
    return ModelConfig(vocab_size=taskgen.VOCAB_SIZE, d_feat=taskgen.D_FEAT, layers=2, d_model=32, d_ff=64,
                       heads=4, rpr_window=4)


def records(n, seed=3, distilled=True):
    out = []
    for s in taskgen.gen_dataset(n, seed):
        out.append(taskgen.CaptionRecord(s.scene_id, s.features, s.reference,
                                         list(s.reference) if distilled else None))
    return out


# --------------------------------------------------------------- curriculum

def test_curriculum_endpoints():
    sched = CurriculumSchedule(T=100)
    assert curriculum_rate(0, sched) == 0.0
    assert curriculum_rate(100, sched) == 1.0
    assert curriculum_rate(50, sched) == 0.5
    assert curriculum_rate(250, sched) == 1.0


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0, 3.7])
def test_curriculum_monotone(lam):
    sched = CurriculumSchedule(T=37, lam=lam)
    vals = [curriculum_rate(t, sched) for t in range(40)]
    assert vals[0] == 0.0 and vals[37] == 1.0
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_curriculum_rejects_bad_schedule():
    with pytest.raises(ContractError):
        CurriculumSchedule(T=0)
    with pytest.raises(ContractError):
        CurriculumSchedule(T=5, lam=0.0)


# ----------------------------------------------------------------- sampling

def test_hybrid_sample_extremes():
    rng = np.random.default_rng(0)
    raw, dis = [4], [5]
    assert all(hybrid_sample(raw, dis, 1.0, rng) is raw for _ in range(200))
    assert all(hybrid_sample(raw, dis, 0.0, rng) is dis for _ in range(200))


def test_hybrid_sample_frequency():
    rng = np.random.default_rng(1)
    raw, dis = [4], [5]
    hits = sum(hybrid_sample(raw, dis, 0.5, rng) is raw for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5) <= 0.02


# -------------------------------------------------------------------- batch

def _pairs(B):
    return [(r, r.raw) for r in records(B)]


def test_batch_split_counts():
    ex = build_training_batch(_pairs(10), 0.3, 4, np.random.default_rng(0))
    kinds = [e.kind for e in ex]
    assert len(ex) == 20
    assert kinds.count("Outliner") == kinds.count("Filler") == 3
    assert kinds.count("AIC") == kinds.count("NAIC") == 7


@pytest.mark.parametrize("p_g, allowed", [(0.0, {"AIC", "NAIC"}), (1.0, {"Outliner", "Filler"})])
def test_batch_extremes(p_g, allowed):
    ex = build_training_batch(_pairs(6), p_g, 2, np.random.default_rng(0))
    assert {e.kind for e in ex} == allowed


def test_split_count_rounding():
    assert split_count(10, 0.3) == 3
    assert split_count(10, 0.25) == 3      # halves round up
    assert split_count(10, 0.24) == 2
    assert [split_count(7, p) for p in (0.0, 1.0)] == [0, 7]


def test_batch_rejects_empty():
    with pytest.raises(ContractError):
        build_training_batch([], 0.5, 4, np.random.default_rng(0))


def test_example_layouts():
    rec = records(1)[0]
    w = [10, 11, 12, 13, 14, 15]
    ex = make_example(rec, w, "Outliner", 4)
    assert ex.inputs == [BOG, 10, 14] and ex.targets == [10, 14, EOS]
    ex = make_example(rec, w, "Filler", 4)
    assert ex.inputs == [10, MASK, MASK, MASK, 14, MASK, MASK, MASK]
    assert ex.targets == [PAD, 11, 12, 13, PAD, 15, EOS, PAD]
    ex = make_example(rec, w, "NAIC")
    assert ex.inputs == [MASK] * 6 and ex.targets == w
    ex = make_example(rec, w, "AIC")
    assert ex.inputs == [BOG] + w and ex.targets == w + [EOS]


# --------------------------------------------------------------------- loss

def _oracle_loss(ex, P, cfg):
    mem = encode(ex.features, P, cfg)
    n = len(ex.inputs)
    mask = causal_mask(n) if ex.causal else full_mask(n)
    logits = decoder_forward(ex.inputs, mem, mask, P, cfg).data
    terms = []
    for i, t in enumerate(ex.targets):
        if t == PAD:
            continue
        z = logits[i] - logits[i].max()
        terms.append(-(z[t] - math.log(np.exp(z).sum())))
    return sum(terms) / len(terms)


def test_loss_matches_oracle_for_each_kind():
    cfg = small_cfg()
    P = init_params(cfg, np.random.default_rng(0))
    rec = records(1, seed=5)[0]
    for kind in ("AIC", "NAIC", "Outliner", "Filler"):
        ex = make_example(rec, rec.raw, kind, 3)
        assert loss_for(ex, P, cfg).item() == pytest.approx(_oracle_loss(ex, P, cfg), abs=1e-10)


def test_outliner_k1_equals_aic():
    cfg = small_cfg()
    P = init_params(cfg, np.random.default_rng(1))
    rec = records(1)[0]
    a = loss_for(make_example(rec, rec.raw, "AIC"), P, cfg).item()
    o = loss_for(make_example(rec, rec.raw, "Outliner", 1), P, cfg).item()
    assert a == o


def test_filler_without_masks_rejected():
    cfg = small_cfg()
    P = init_params(cfg, np.random.default_rng(1))
    rec = records(1)[0]
    with pytest.raises(ContractError):
        loss_for(make_example(rec, rec.raw, "Filler", 1), P, cfg)


def test_joint_loss_is_equal_weight_mean():
    cfg = small_cfg()
    P = init_params(cfg, np.random.default_rng(2))
    ex = build_training_batch(_pairs(6), 0.5, 2, np.random.default_rng(0))
    total, per_kind = joint_loss(ex, P, cfg)
    assert set(per_kind) == {"AIC", "NAIC", "Outliner", "Filler"}
    assert total.item() == pytest.approx(sum(per_kind.values()) / 4, abs=1e-12)


# ----------------------------------------------------------------- training

@pytest.fixture(scope="module")
def tiny_teacher(tmp_path_factory):
    cfg = small_cfg()
    path = tmp_path_factory.mktemp("teacher") / "teacher.ckpt"
    save_checkpoint(path, cfg, init_params(cfg, np.random.default_rng(0)))
    return path


def test_train_saic_missing_teacher(tmp_path):
    with pytest.raises(FileNotFoundError, match="teacher"):
        train_saic(records(4), tmp_path / "nope.ckpt", TrainConfig(mode="saic"))


def test_train_saic_needs_distilled(tiny_teacher):
    with pytest.raises(ContractError, match="distill"):
        train_saic(records(4, distilled=False), tiny_teacher, TrainConfig(mode="saic"))


def test_overfit_32_examples(tiny_teacher):
    recs = records(32, seed=11)
    tcfg = TrainConfig(mode="saic", k=2, epochs=150, curriculum_epochs=20, lr=3e-3, lr_decay=1.0,
                       batch_size=32, p_hybr=0.5)
    cfg, params, hist = train_saic(recs, tiny_teacher, tcfg)
    assert hist[-1]["p_g"] == 1.0
    assert hist[-1]["loss"] < 0.05
    assert count_params(params) == count_params(load_checkpoint(tiny_teacher)[1])


def test_log_trace_and_resume(tiny_teacher, tmp_path):
    recs = records(12, seed=12)
    cfg, init = load_checkpoint(tiny_teacher)
    tcfg = TrainConfig(mode="saic", k=2, epochs=3, lr=1e-3, batch_size=4, seed=5)
    full, hist = train(recs, init, cfg, tcfg, out_dir=tmp_path / "full")

    rows = read_log(tmp_path / "full" / "train_log.tsv")
    assert len(rows) == 9
    sched = CurriculumSchedule(T=8, lam=1.0)
    assert [float(r["p_g"]) for r in rows] == [curriculum_rate(t, sched) for t in range(9)]
    assert float(rows[0]["p_g"]) == 0.0 and float(rows[-1]["p_g"]) == 1.0

    part_dir = tmp_path / "part"
    train(recs, init, cfg, TrainConfig(**{**tcfg.__dict__, "epochs": 1, "curriculum_epochs": 3}),
          out_dir=part_dir)
    resumed, hist2 = train(recs, init, cfg, tcfg, out_dir=part_dir, resume=True)
    assert [h["loss"] for h in hist2] == [h["loss"] for h in hist[3:]]
    for k in full:
        assert full[k].tobytes() == resumed[k].tobytes()
    assert (part_dir / "epoch_002.ckpt").read_bytes() == (tmp_path / "full" / "epoch_002.ckpt").read_bytes()


def test_teacher_mode_logs_zero_rate(tmp_path):
    cfg = small_cfg()
    init = init_params(cfg, np.random.default_rng(0))
    _, hist = train(records(8), init, cfg, TrainConfig(mode="teacher", epochs=1, batch_size=4, lr=1e-3))
    assert all(h["p_g"] == 0.0 for h in hist)
    assert all(set(h) >= {"AIC", "NAIC"} and "Filler" not in h for h in hist)


def test_distillation_is_deterministic(tiny_teacher):
    cfg, P = load_checkpoint(tiny_teacher)
    recs = records(3)
    a = generate_distillation_set(P, cfg, recs, beam=3, max_len=8)
    b = generate_distillation_set(P, cfg, recs, beam=3, max_len=8)
    assert [r.distilled for r in a] == [r.distilled for r in b]
    for r in a:
        assert r.flag in ("ok", "unterminated")
        assert taskgen.to_words(taskgen.from_words(taskgen.to_words(r.distilled))) == taskgen.to_words(r.distilled)
