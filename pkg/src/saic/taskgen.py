"""Synthetic captioning task: scenes of coloured shapes on a 4x4 grid.

Each object contributes one noisy attribute vector (the stand-in for an
image region) and the phrase ``a <color> <shape> at <row> <col>``.
Phrases are joined with ``and`` in row-major cell order, so the caption
is a deterministic function of the objects.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokens import FIRST_WORD, SPECIAL_NAMES

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "black", "white")
SHAPES = ("circle", "square", "triangle", "star", "cross", "heart", "ring", "diamond")
ROWS = ("top", "upper", "lower", "bottom")
COLS = ("left", "midleft", "midright", "right")
GLUE = ("a", "at", "and")

WORDS = GLUE + COLORS + SHAPES + ROWS + COLS
VOCAB = SPECIAL_NAMES + WORDS
VOCAB_SIZE = len(VOCAB)
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
D_FEAT = len(SHAPES) + len(COLORS) + len(ROWS) + len(COLS)
MAX_OBJECTS = 3
FEATURE_NOISE = 0.1

assert WORD_ID["a"] == FIRST_WORD


@dataclass(frozen=True)
class SceneObject:
    shape: int
    color: int
    cell: int           # row * 4 + col

    @property
    def row(self) -> int:
        return self.cell // 4

    @property
    def col(self) -> int:
        return self.cell % 4


@dataclass
class SyntheticScene:
    scene_id: int
    objects: tuple[SceneObject, ...]
    features: np.ndarray        # (n_objects, D_FEAT)
    reference: list[int]        # token ids, no [eos]


@dataclass
class CaptionRecord:
    """One line of a dataset file, with its feature block resolved."""

    scene_id: int
    features: np.ndarray
    raw: list[int]
    distilled: list[int] | None = None
    flag: str = "-"


def describe(objects) -> list[int]:
    words = []
    for obj in sorted(objects, key=lambda o: o.cell):
        if words:
            words.append("and")
        words += ["a", COLORS[obj.color], SHAPES[obj.shape], "at", ROWS[obj.row], COLS[obj.col]]
    return [WORD_ID[w] for w in words]


def encode_objects(objects, rng: np.random.Generator, noise: float = FEATURE_NOISE) -> np.ndarray:
    feat = np.zeros((len(objects), D_FEAT))
    o_color, o_row = len(SHAPES), len(SHAPES) + len(COLORS)
    o_col = o_row + len(ROWS)
    for i, obj in enumerate(objects):
        feat[i, obj.shape] = 1.0
        feat[i, o_color + obj.color] = 1.0
        feat[i, o_row + obj.row] = 1.0
        feat[i, o_col + obj.col] = 1.0
    return feat + noise * rng.standard_normal(feat.shape)


def gen_dataset(n: int, seed: int) -> list[SyntheticScene]:
    if n < 1:
        raise ValueError("need at least one scene")
    rng = np.random.default_rng(seed)
    scenes = []
    for sid in range(n):
        count = int(rng.integers(1, MAX_OBJECTS + 1))
        cells = rng.choice(16, size=count, replace=False)
        objs = tuple(SceneObject(int(rng.integers(len(SHAPES))), int(rng.integers(len(COLORS))), int(c))
                     for c in cells)
        scenes.append(SyntheticScene(sid, objs, encode_objects(objs, rng), describe(objs)))
    return scenes


def split_sizes(n: int, fractions=(0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    return n_train, n_val, n - n_train - n_val


def split_dataset(scenes) -> dict[str, list]:
    a, b, _ = split_sizes(len(scenes))
    return {"train": scenes[:a], "val": scenes[a:a + b], "test": scenes[a + b:]}


def to_words(ids) -> str:
    return " ".join(VOCAB[i] for i in ids)


def from_words(text: str) -> list[int]:
    return [WORD_ID[w] for w in text.split()]


# ------------------------------------------------------------------ files
#
# <dir>/features.npy   all feature rows, scenes concatenated
# <dir>/<split>.tsv     scene_id  features  raw  distilled  flag
#                       features = "start:count" rows into features.npy,
#                       token columns are space-separated ids, "-" if absent
# <dir>/manifest.tsv    key/value summary

HEADER = ("scene_id", "features", "raw", "distilled", "flag")


def _ids(seq) -> str:
    return " ".join(map(str, seq)) if seq is not None else "-"


def _parse_ids(col: str):
    if col == "-":
        return None
    return [int(t) for t in col.split()] if col else []


def write_dataset(scenes, out_dir, seed: int) -> dict[str, int]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, refs, start = [], {}, 0
    for s in scenes:
        rows.append(s.features)
        refs[s.scene_id] = f"{start}:{len(s.features)}"
        start += len(s.features)
    np.save(out / "features.npy", np.concatenate(rows).astype(np.float64))
    splits = split_dataset(scenes)
    for name, part in splits.items():
        write_records(out / f"{name}.tsv",
                      [CaptionRecord(s.scene_id, None, s.reference) for s in part], refs)
    counts = {name: len(part) for name, part in splits.items()}
    with open(out / "manifest.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("key", "value"))
        for k, v in (("scenes", len(scenes)), ("seed", seed), *counts.items(),
                     ("vocab_size", VOCAB_SIZE), ("d_feat", D_FEAT)):
            w.writerow((k, v))
    return counts


def write_records(path, records, feature_refs: dict[int, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(HEADER)
        for r in records:
            w.writerow((r.scene_id, feature_refs[r.scene_id], _ids(r.raw), _ids(r.distilled), r.flag))


def read_manifest(data_dir) -> dict[str, str]:
    with open(Path(data_dir) / "manifest.tsv", newline="") as fh:
        return {row["key"]: row["value"] for row in csv.DictReader(fh, delimiter="\t")}


def load_split(data_dir, split: str, path=None) -> tuple[list[CaptionRecord], dict[int, str]]:
    """Load a split; ``path`` overrides the default ``<split>.tsv`` location."""
    data_dir = Path(data_dir)
    path = Path(path) if path is not None else data_dir / f"{split}.tsv"
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    feats = np.load(data_dir / "features.npy")
    records, refs = [], {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            a, b = (int(x) for x in row["features"].split(":"))
            sid = int(row["scene_id"])
            refs[sid] = row["features"]
            records.append(CaptionRecord(sid, feats[a:a + b], _parse_ids(row["raw"]),
                                         _parse_ids(row["distilled"]), row["flag"]))
    return records, refs


def pad_features(batch) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-size feature blocks into (B, R, d) plus region counts."""
    counts = np.array([len(f) for f in batch])
    out = np.zeros((len(batch), counts.max(), batch[0].shape[1]))
    for i, f in enumerate(batch):
        out[i, : len(f)] = f
    return out, counts
