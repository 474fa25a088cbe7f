"""Joint AIC/NAIC/Outliner/Filler training with a group-size curriculum and
hybrid (raw vs. teacher-decoded) targets.

Three modes share one loop:

* ``teacher``: curriculum rate pinned to 0, raw targets only, so every
  pair yields an AIC and an NAIC example.
* ``saic``: initialised from a teacher checkpoint; targets drawn from
  raw/distilled with ``p_hybr``; the share of group-aware pairs follows
  ``(t/T)^lambda``.
* ``cmlm``: Filler examples with a uniformly random number of randomly
  placed masks (the refinement decoder used by the masking experiment).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .decoding import DecodeConfig, decode
from .errors import ContractError
from .masks import causal_mask, expand_with_masks, outliner_layout
from .metrics import evaluate
from .model import (ModelConfig, as_arrays, as_trainable, decoder_forward, encode, init_params,
                    load_checkpoint, save_checkpoint)
from .taskgen import CaptionRecord, pad_features
from .tokens import BOG, EOS, MASK, PAD

log = logging.getLogger(__name__)

KINDS = ("AIC", "NAIC", "Outliner", "Filler")
CAUSAL_KINDS = ("AIC", "Outliner")


# ------------------------------------------------------------- curriculum

@dataclass
class CurriculumSchedule:
    T: int
    lam: float = 1.0

    def __post_init__(self):
        if self.T < 1 or self.lam <= 0:
            raise ContractError("curriculum needs T >= 1 and lambda > 0")


def curriculum_rate(t: int, sched: CurriculumSchedule) -> float:
    """``(t/T)^lambda`` clamped to [0, 1]."""
    return min(1.0, max(0.0, t / sched.T)) ** sched.lam


def hybrid_sample(raw, distilled, p_hybr: float, rng: np.random.Generator):
    """Raw target with probability ``p_hybr``, otherwise the distilled one."""
    return raw if rng.random() < p_hybr else distilled


# ---------------------------------------------------------------- examples

@dataclass
class TrainingExample:
    features: np.ndarray
    raw: list[int]
    distilled: list[int] | None
    chosen: list[int]
    kind: str
    inputs: list[int] = field(default_factory=list)
    targets: list[int] = field(default_factory=list)   # [pad] = unsupervised

    @property
    def causal(self) -> bool:
        return self.kind in CAUSAL_KINDS


def make_example(rec: CaptionRecord, chosen, kind: str, k: int = 1) -> TrainingExample:
    chosen = list(chosen)
    ex = TrainingExample(rec.features, rec.raw, rec.distilled, chosen, kind)
    if kind == "AIC":
        ex.inputs, ex.targets = [BOG] + chosen, chosen + [EOS]
    elif kind == "NAIC":
        ex.inputs, ex.targets = [MASK] * len(chosen), chosen
    elif kind == "Outliner":
        out, _ = outliner_layout(chosen, k)
        ex.inputs, ex.targets = [BOG] + out[:-1], out
    elif kind == "Filler":
        out, fill = outliner_layout(chosen, k)
        if len(out) < 2:
            raise ContractError("caption too short to form a Filler example")
        ex.inputs = expand_with_masks(out[:-1], k)
        ex.targets = [PAD if i % k == 0 else t for i, t in enumerate(fill)]
    else:
        raise ContractError(f"unknown example kind {kind!r}")
    return ex


def random_mask_example(rec: CaptionRecord, chosen, rng: np.random.Generator) -> TrainingExample:
    """Filler example with ``U{1..N}`` randomly placed masks."""
    chosen = list(chosen)
    n = len(chosen)
    pos = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
    inp = list(chosen)
    tgt = [PAD] * n
    for i in pos:
        inp[i] = MASK
        tgt[i] = chosen[i]
    return TrainingExample(rec.features, rec.raw, rec.distilled, chosen, "Filler", inp, tgt)


def split_count(B: int, p_g: float) -> int:
    """Group-aware pair count: ``round(B * p_g)`` with halves rounded up."""
    return int(math.floor(B * p_g + 0.5))


def build_training_batch(pairs, p_g: float, k: int, rng: np.random.Generator) -> list[TrainingExample]:
    """Turn ``(record, chosen_target)`` pairs into 2B examples.

    ``round(B * p_g)`` randomly chosen pairs give an Outliner and a Filler
    example; the others give an AIC and an NAIC example.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("empty batch")
    if not 0.0 <= p_g <= 1.0:
        raise ContractError("p_g must lie in [0, 1]")
    B = len(pairs)
    group = set(rng.permutation(B)[: split_count(B, p_g)].tolist())
    out = []
    for i, (rec, chosen) in enumerate(pairs):
        kinds = ("Outliner", "Filler") if i in group else ("AIC", "NAIC")
        out.extend(make_example(rec, chosen, kind, k) for kind in kinds)
    return out


# ------------------------------------------------------------------- loss

def _collate(examples):
    n = max(len(e.inputs) for e in examples)
    tok = np.full((len(examples), n), PAD, dtype=np.intp)
    tgt = np.full((len(examples), n), PAD, dtype=np.intp)
    lens = np.array([len(e.inputs) for e in examples])
    for i, e in enumerate(examples):
        tok[i, : len(e.inputs)] = e.inputs
        tgt[i, : len(e.targets)] = e.targets
    return tok, tgt, lens


def batch_loss(examples, params, cfg: ModelConfig) -> nn.Tensor:
    """Mean cross-entropy over supervised positions of same-kind examples."""
    causal = examples[0].causal
    if any(e.causal != causal for e in examples):
        raise ContractError("batch_loss needs examples of one attention type")
    tok, tgt, lens = _collate(examples)
    if not (tgt != PAD).any():
        raise ContractError("no supervised positions")
    n = tok.shape[1]
    if causal:
        mask = causal_mask(n)[None]
    else:
        mask = np.broadcast_to((np.arange(n)[None, :] < lens[:, None])[:, None, :], (len(lens), n, n))
    feats, counts = pad_features([e.features for e in examples])
    mem = encode(feats, params, cfg, n_regions=counts)
    logits = decoder_forward(tok, mem, mask, params, cfg)
    return nn.cross_entropy(logits, tgt, ignore={PAD})


def loss_for(example: TrainingExample, params, cfg: ModelConfig) -> nn.Tensor:
    return batch_loss([example], params, cfg)


def joint_loss(examples, params, cfg: ModelConfig) -> tuple[nn.Tensor, dict[str, float]]:
    """Equal-weight mean of the per-kind losses present in ``examples``."""
    per_kind, total = {}, None
    kinds = [k for k in KINDS if any(e.kind == k for e in examples)]
    for kind in kinds:
        l = batch_loss([e for e in examples if e.kind == kind], params, cfg)
        per_kind[kind] = float(l.data)
        total = l if total is None else nn.add(total, l)
    return nn.mul(total, 1.0 / len(kinds)), per_kind


# ---------------------------------------------------------------- trainer

@dataclass
class TrainConfig:
    mode: str = "saic"
    k: int = 4
    p_hybr: float = 0.5
    lam: float = 1.0
    epochs: int = 25
    curriculum_epochs: int | None = None    # defaults to epochs
    lr: float = 3e-5
    lr_decay: float = 0.9
    decay_every: int = 5
    batch_size: int = 32
    patience: int = 0                       # 0 disables plateau stopping
    val_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("teacher", "saic", "cmlm"):
            raise ContractError(f"unknown training mode {self.mode!r}")
        if not 0.0 <= self.p_hybr <= 1.0:
            raise ContractError("p_hybr must lie in [0, 1]")
        if self.k < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ContractError("k, epochs and batch_size must be >= 1")


LOG_HEADER = ("step", "epoch", "p_g", "lr", *(f"loss_{k}" for k in KINDS), "loss")


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _val_exact_match(params, cfg, tcfg, records) -> float:
    if tcfg.mode == "saic":
        dcfg = DecodeConfig("SAIC", k=tcfg.k)
    elif tcfg.mode == "teacher":
        dcfg = DecodeConfig("AIC")
    else:
        dcfg = DecodeConfig("NAIC")
    frozen = as_arrays(params)
    outs = [decode(r.features, frozen, cfg, dcfg, ref_len=len(r.raw)).tokens for r in records]
    return evaluate(outs, [r.raw for r in records]).exact_match


def train(records, init: dict, cfg: ModelConfig, tcfg: TrainConfig, out_dir=None, val_records=None,
          resume: bool = False):
    """Run the training loop; returns the final float64 parameters.

    Writes ``epoch_XXX.ckpt``, ``state.npz`` and ``train_log.tsv`` into
    ``out_dir`` when given.  With ``resume`` the loop restarts after the
    last completed epoch recorded in ``state.npz``.
    """
    records = list(records)
    if not records:
        raise ContractError("no training records")
    params = as_trainable(init)
    opt = nn.Adam(params, lr=tcfg.lr)
    steps_per_epoch = math.ceil(len(records) / tcfg.batch_size)
    cur_epochs = tcfg.curriculum_epochs or tcfg.epochs
    sched = CurriculumSchedule(max(1, cur_epochs * steps_per_epoch - 1), tcfg.lam)
    out = Path(out_dir) if out_dir is not None else None
    start_epoch, step, best, stale = 0, 0, -1.0, 0
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            st = np.load(out / "state.npz")
            for kname in params:
                params[kname].data[...] = st[f"p/{kname}"]
            opt.load_state_dict({k[4:]: st[k] for k in st.files if k.startswith("opt/")})
            start_epoch, step = int(st["epoch"]), int(st["step"])
            best, stale = float(st["best"]), int(st["stale"])
        log_fh = open(out / "train_log.tsv", "a" if resume else "w", newline="")
        writer = csv.writer(log_fh, delimiter="\t", lineterminator="\n")
        if not resume:
            writer.writerow(LOG_HEADER)
    else:
        log_fh = writer = None
    history = []
    try:
        for epoch in range(start_epoch, tcfg.epochs):
            opt.lr = tcfg.lr * tcfg.lr_decay ** (epoch // tcfg.decay_every)
            rng = _epoch_rng(tcfg.seed, epoch)
            order = rng.permutation(len(records))
            for b in range(steps_per_epoch):
                batch = [records[i] for i in order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]]
                p_g, examples = _make_step_examples(batch, step, sched, tcfg, rng)
                opt.zero_grad()
                loss, per_kind = joint_loss(examples, params, cfg)
                nn.backward(loss)
                opt.step()
                row = {"step": step, "epoch": epoch, "p_g": p_g, "lr": opt.lr, "loss": float(loss.data), **per_kind}
                history.append(row)
                if writer is not None:
                    writer.writerow([step, epoch, repr(p_g), repr(opt.lr),
                                     *(repr(per_kind[k]) if k in per_kind else "-" for k in KINDS),
                                     repr(float(loss.data))])
                step += 1
            msg = f"epoch {epoch}: loss {np.mean([h['loss'] for h in history[-steps_per_epoch:]]):.4f}"
            stop = False
            if val_records and tcfg.patience and epoch + 1 >= cur_epochs:
                em = _val_exact_match(params, cfg, tcfg, val_records[: tcfg.val_size])
                msg += f" val_em {em:.3f}"
                if em > best:
                    best, stale = em, 0
                else:
                    stale += 1
                stop = stale >= tcfg.patience or em >= 1.0
            log.info(msg)
            if out is not None:
                save_checkpoint(out / f"epoch_{epoch:03d}.ckpt", cfg, params)
                state = {f"p/{k}": p.data for k, p in params.items()}
                state.update({f"opt/{k}": v for k, v in opt.state_dict().items()})
                np.savez(out / "state.npz", epoch=epoch + 1, step=step, best=best, stale=stale, **state)
                log_fh.flush()
            if stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return as_arrays(params), history


def _make_step_examples(batch, step, sched, tcfg: TrainConfig, rng):
    if tcfg.mode == "cmlm":
        return 0.0, [random_mask_example(r, r.raw, rng) for r in batch]
    if tcfg.mode == "teacher":
        pairs = [(r, r.raw) for r in batch]
        return 0.0, build_training_batch(pairs, 0.0, tcfg.k, rng)
    pairs = [(r, hybrid_sample(r.raw, r.distilled if r.distilled is not None else r.raw, tcfg.p_hybr, rng))
             for r in batch]
    p_g = curriculum_rate(step, sched)
    return p_g, build_training_batch(pairs, p_g, tcfg.k, rng)


def train_teacher(records, cfg: ModelConfig, tcfg: TrainConfig, out_dir=None, val_records=None):
    if tcfg.mode != "teacher":
        raise ContractError("train_teacher needs mode='teacher'")
    init = init_params(cfg, np.random.default_rng([tcfg.seed, 1]))
    return train(records, init, cfg, tcfg, out_dir, val_records)


def train_saic(records, teacher_checkpoint, tcfg: TrainConfig, out_dir=None, val_records=None):
    """Fine-tune a teacher checkpoint into a SAIC model."""
    path = Path(teacher_checkpoint) if teacher_checkpoint is not None else None
    if path is None or not path.is_file():
        raise FileNotFoundError(f"teacher checkpoint missing: {teacher_checkpoint}")
    cfg, teacher = load_checkpoint(path)
    if tcfg.mode == "saic" and any(r.distilled is None for r in records):
        raise ContractError("SAIC training needs distilled targets for every record (run distill first)")
    params, history = train(records, teacher, cfg, tcfg, out_dir, val_records)
    return cfg, params, history


def train_filler(records, teacher_checkpoint, tcfg: TrainConfig, out_dir=None, val_records=None):
    """Train a conditional masked LM with the teacher's architecture from a
    fresh init.  Starting from the teacher would hand the filler a strong
    left-to-right prior, which hides how much each masking pattern leaves
    for the context to recover."""
    path = Path(teacher_checkpoint) if teacher_checkpoint is not None else None
    if path is None or not path.is_file():
        raise FileNotFoundError(f"teacher checkpoint missing: {teacher_checkpoint}")
    cfg, _ = load_checkpoint(path)
    init = init_params(cfg, np.random.default_rng(tcfg.seed))
    params, history = train(records, init, cfg, replace(tcfg, mode="cmlm"), out_dir, val_records)
    return cfg, params, history


# ------------------------------------------------------------ distillation

def generate_distillation_set(params, cfg: ModelConfig, records, beam: int = 5, max_len: int = 24):
    """Beam-decode every record with the teacher.  Returns new records with
    ``distilled`` filled and ``flag`` set to ``ok`` or ``unterminated``."""
    dcfg = DecodeConfig("AIC", m_out=beam, m_fill=1, max_len=max_len)
    out = []
    for r in records:
        h = decode(r.features, params, cfg, dcfg)
        out.append(CaptionRecord(r.scene_id, r.features, r.raw, h.tokens, "ok" if h.terminated else "unterminated"))
    return out


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def describe_config(tcfg: TrainConfig) -> str:
    return json.dumps(asdict(tcfg), sort_keys=True)
