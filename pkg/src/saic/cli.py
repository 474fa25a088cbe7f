"""Command-line driver: ``python -m saic <command> ...``.

Commands: gen, train-teacher, distill, train-saic, train-filler, decode,
mask-exp, bench, eval.  Every table is tab-separated with a header row.
Outputs are written to a temporary name and renamed on success, so a
failed command never leaves a half-written file behind.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, maskexp, taskgen, training
from .config import RunConfig, load_config, subseed
from .decoding import DecodeConfig, decode
from .errors import ContractError
from .metrics import evaluate
from .model import ModelConfig, load_checkpoint, save_checkpoint

@contextlib.contextmanager
def atomic_path(path):
    """Yield a temporary sibling of ``path``; rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.partial")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _need_file(path, what):
    if path is None or not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _need_data(data_dir):
    d = Path(data_dir)
    if not (d / "manifest.tsv").is_file():
        raise FileNotFoundError(f"dataset not found in {d} (run `gen` first)")
    return d


def _write_tsv(path, header, rows):
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


# ------------------------------------------------------------------ config

def _cfg(args) -> RunConfig:
    over = {k: getattr(args, k, None) for k in RunConfig.keys()}
    return load_config(args.config, over)


def _model_config(rc: RunConfig) -> ModelConfig:
    return ModelConfig(taskgen.VOCAB_SIZE, taskgen.D_FEAT, layers=rc.layers, d_model=rc.d_model, d_ff=rc.d_ff,
                       heads=rc.heads, rpr_window=rc.rpr_window, max_len=rc.max_len + 8)


def _train_config(rc: RunConfig, mode: str) -> training.TrainConfig:
    return training.TrainConfig(mode=mode, k=rc.k, p_hybr=rc.p_hybr, lam=rc.lam, epochs=rc.epochs,
                                curriculum_epochs=rc.curriculum_epochs or None, lr=rc.lr, lr_decay=rc.lr_decay,
                                decay_every=rc.decay_every, batch_size=rc.batch_size,
                                patience=rc.patience, seed=subseed(rc.seed, f"train-{mode}"))


def _decode_config(rc: RunConfig, strategy=None) -> DecodeConfig:
    return DecodeConfig((strategy or rc.strategy).upper(), k=rc.k, m_out=rc.m_out, m_fill=rc.m_fill,
                        iterations=rc.iters, max_len=rc.max_len, length_source=rc.length_source)


# ---------------------------------------------------------------- commands

def cmd_gen(args):
    out = Path(args.out)
    scenes = taskgen.gen_dataset(args.n, args.seed)
    tmp = out.with_name(f".{out.name}.partial")
    if tmp.exists():
        for f in tmp.iterdir():
            f.unlink()
    counts = taskgen.write_dataset(scenes, tmp, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    for f in sorted(tmp.iterdir()):
        os.replace(f, out / f.name)
    tmp.rmdir()
    print(f"wrote {args.n} scenes to {out}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))


def _train_common(args, mode):
    rc = _cfg(args)
    data = _need_data(args.data)
    path = None
    if mode == "saic":
        path = args.distilled or data / "train_distilled.tsv"
        if not Path(path).is_file():
            raise FileNotFoundError(f"distilled targets not found: {path} (run distill first)")
    train_recs, _ = taskgen.load_split(data, "train", path)
    val_recs, _ = taskgen.load_split(data, "val")
    tcfg = _train_config(rc, mode)
    out = Path(args.out)
    if mode == "teacher":
        cfg = _model_config(rc)
        params, hist = training.train_teacher(train_recs, cfg, tcfg, out, val_recs)
    else:
        teacher = _need_file(args.teacher, "teacher checkpoint (run train-teacher first)")
        if mode == "saic" and any(r.distilled is None for r in train_recs):
            raise ContractError("SAIC training needs distilled targets (run distill first)")
        train_fn = training.train_saic if mode == "saic" else training.train_filler
        cfg, params, hist = train_fn(train_recs, teacher, tcfg, out, val_recs)
    name = {"teacher": "teacher.ckpt", "saic": "saic.ckpt", "cmlm": "filler.ckpt"}[mode]
    with atomic_path(out / name) as tmp:
        save_checkpoint(tmp, cfg, params)
    print(f"{mode}: {len(hist)} steps, final loss {hist[-1]['loss']:.4f}; checkpoint {out / name}")


def cmd_train_teacher(args):
    _train_common(args, "teacher")


def cmd_train_saic(args):
    _train_common(args, "saic")


def cmd_train_filler(args):
    _train_common(args, "cmlm")


def cmd_distill(args):
    rc = _cfg(args)
    data = _need_data(args.data)
    cfg, params = load_checkpoint(_need_file(args.teacher, "teacher checkpoint"))
    recs, refs = taskgen.load_split(data, "train")
    dist = training.generate_distillation_set(params, cfg, recs, beam=rc.distill_beam, max_len=rc.max_len)
    out = Path(args.out) if args.out else data / "train_distilled.tsv"
    with atomic_path(out) as tmp:
        taskgen.write_records(tmp, dist, refs)
    em = np.mean([r.distilled == r.raw for r in dist])
    bad = sum(r.flag != "ok" for r in dist)
    print(f"distilled {len(dist)} captions to {out}: exact match vs raw {em:.4f}, unterminated {bad}")


def _mean_len(data):
    recs, _ = taskgen.load_split(data, "train")
    return float(np.mean([len(r.raw) for r in recs]))


def cmd_decode(args):
    rc = _cfg(args)
    dcfg = _decode_config(rc)
    data = _need_data(args.data)
    cfg, params = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    recs, _ = taskgen.load_split(data, args.split)
    if args.limit:
        recs = recs[: args.limit]
    mean_len = _mean_len(data) if dcfg.length_source == "mean" else None
    rows = []
    for r in recs:
        t0 = time.perf_counter()
        h = decode(r.features, params, cfg, dcfg, ref_len=len(r.raw), mean_len=mean_len)
        us = (time.perf_counter() - t0) * 1e6
        rows.append((r.scene_id, dcfg.strategy, " ".join(map(str, h.tokens)), taskgen.to_words(h.tokens),
                     repr(h.outliner_logprob), repr(h.filler_logprob), repr(h.total), f"{us:.1f}"))
    _write_tsv(args.out, DECODE_HEADER, rows)
    print(f"decoded {len(rows)} scenes with {dcfg.strategy} to {args.out}")


DECODE_HEADER = ("scene_id", "strategy", "tokens", "words", "outliner_score", "filler_score", "score", "latency_us")


def read_hypotheses(path) -> dict[int, list[int]]:
    """Token lists keyed by scene id from a decode file (``tokens``) or a
    dataset file (``raw``)."""
    with open(_need_file(path, "hypothesis file"), newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        col = "tokens" if "tokens" in reader.fieldnames else "raw"
        return {int(r["scene_id"]): [int(t) for t in r[col].split()] for r in reader}


def cmd_eval(args):
    data = _need_data(args.data)
    recs, _ = taskgen.load_split(data, args.split)
    hyps = read_hypotheses(args.hyp)
    missing = [r.scene_id for r in recs if r.scene_id not in hyps]
    if missing:
        raise ContractError(f"{len(missing)} scenes of split {args.split!r} have no hypothesis (e.g. {missing[0]})")
    rep = evaluate([hyps[r.scene_id] for r in recs], [r.raw for r in recs])
    row = rep.row()
    if args.out:
        _write_tsv(args.out, tuple(row), [tuple(row.values())])
    print("\t".join(row))
    print("\t".join(str(v) for v in row.values()))


def cmd_mask_exp(args):
    rc = _cfg(args)
    data = _need_data(args.data)
    tcfg_, teacher = load_checkpoint(_need_file(args.teacher, "teacher checkpoint"))
    fcfg, filler = load_checkpoint(_need_file(args.filler, "filler checkpoint (run train-filler first)"))
    recs, _ = taskgen.load_split(data, args.split)
    if args.limit:
        recs = recs[: args.limit]
    grid = tuple(float(x) for x in rc.grid.split(","))
    hyps = maskexp.teacher_hypotheses(teacher, tcfg_, recs, beam=5, max_len=rc.max_len)
    rows = maskexp.run_masking_experiment(filler, fcfg, recs, hyps, grid=grid,
                                          seeds=rc.seeds, seed=subseed(rc.seed, "mask-exp"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_path(out / "mask_table.tsv") as tmp:
        maskexp.write_mask_table(tmp, rows)
    maskexp.write_plot_data(out / "plot", rows)
    print(f"mask table: {len(rows)} rows -> {out / 'mask_table.tsv'}")
    if args.table1:
        g = maskexp.run_beam_iteration_grid(filler, fcfg, recs, hyps, p=0.7)
        with atomic_path(out / "beam_iter.tsv") as tmp:
            maskexp.write_grid_table(tmp, g)
        print(f"beam/iteration grid -> {out / 'beam_iter.tsv'}")


def cmd_bench(args):
    rc = _cfg(args)
    data = _need_data(args.data)
    tc, teacher = load_checkpoint(_need_file(args.teacher, "teacher checkpoint"))
    sc, saic = load_checkpoint(_need_file(args.saic, "SAIC checkpoint"))
    recs, _ = taskgen.load_split(data, args.split)
    if args.limit:
        recs = recs[: args.limit]
    k, L = rc.k, rc.max_len
    entries = [
        (teacher, tc, DecodeConfig("AIC", max_len=L)),
        (saic, sc, DecodeConfig("SAIC", k=k, m_out=1, m_fill=1, max_len=L)),
        (saic, sc, DecodeConfig("SAIC", k=k, m_out=5, m_fill=1, max_len=L)),
        (saic, sc, DecodeConfig("NAIC", max_len=L, length_source=rc.length_source)),
        (saic, sc, DecodeConfig("IRNAIC", iterations=5, max_len=L, length_source=rc.length_source)),
    ]
    mean_len = _mean_len(data) if rc.length_source == "mean" else None
    reps = bench.measure_latency(entries, recs, runs=rc.runs, Q=bench.COST_MODELS[args.cost_model],
                                 mean_len=mean_len)
    with atomic_path(args.out) as tmp:
        bench.write_bench_table(tmp, reps)
    for r in reps:
        print(f"{r.strategy:7s} {r.config:26s} {r.latency_us:10.1f} us  {r.speedup_vs_aic:5.2f}x")


# ------------------------------------------------------------------ parser

def _add_config_flags(p, keys):
    p.add_argument("--config", help="flat key = value config file")
    defaults = RunConfig()
    for key in keys:
        val = getattr(defaults, key)
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=type(val), default=None,
                       help=f"(default {val})")


MODEL_KEYS = ["layers", "d_model", "d_ff", "heads", "rpr_window"]
TRAIN_KEYS = ["seed", "epochs", "curriculum_epochs", "lr", "lr_decay", "decay_every", "batch_size",
              "p_hybr", "lam", "patience", "k"]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="saic", description="Semi-autoregressive captioning toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    for name, func, extra, desc in (
            ("train-teacher", cmd_train_teacher, MODEL_KEYS, "train the autoregressive teacher"),
            ("train-saic", cmd_train_saic, [], "fine-tune the teacher into a two-pass model"),
            ("train-filler", cmd_train_filler, [], "train the masked-LM filler for mask-exp")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="run directory")
        if name != "train-teacher":
            p.add_argument("--teacher", help="teacher checkpoint")
        if name == "train-saic":
            p.add_argument("--distilled", help="distilled train file (default <data>/train_distilled.tsv)")
        _add_config_flags(p, TRAIN_KEYS + extra + ["max_len"])
        p.set_defaults(func=func)

    p = sub.add_parser("distill", help="beam-decode the training split with the teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out")
    _add_config_flags(p, ["distill_beam", "max_len"])
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("decode", help="caption a split with one decoding strategy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["strategy", "k", "m_out", "m_fill", "iters", "max_len", "length_source"])
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="BLEU-4, exact match and repetition of a decode file")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--hyp", required=True, help="decode output or dataset file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask-exp", help="masking-strategy experiment over the p grid")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--filler", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--table1", action="store_true", help="also run the M x I grid under Group masking")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["seed", "seeds", "grid", "max_len"])
    p.set_defaults(func=cmd_mask_exp)

    p = sub.add_parser("bench", help="latency and abstract cost per strategy")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--saic", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--cost-model", choices=sorted(bench.COST_MODELS), default="constant")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["runs", "k", "max_len", "length_source"])
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "decode":
        try:
            rc = _cfg(args)
        except (ContractError, FileNotFoundError) as e:
            ap.error(str(e))
        m_out, m_fill = rc.m_out, rc.m_fill
        if m_fill > m_out:
            ap.error(f"--m-fill ({m_fill}) must not exceed --m-out ({m_out}): beam sizes need M_out >= M_fill")
    try:
        args.func(args)
    except (ContractError, FileNotFoundError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
