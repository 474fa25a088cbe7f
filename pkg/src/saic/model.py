"""Transformer encoder-decoder with relative-position self-attention.

A single decoder parameterisation serves as Outliner (causal mask over the
leader subsequence) and Filler (full mask over the expanded sequence).
Only the attention mask and the input layout differ between the two.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import nn
from .errors import ContractError, DimensionError
from .nn import Tensor


@dataclass
class ModelConfig:
    vocab_size: int
    d_feat: int
    layers: int = 2
    d_model: int = 64
    d_ff: int = 128
    heads: int = 4
    rpr_window: int = 4
    max_len: int = 32
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ContractError("d_model must be divisible by heads")
        if self.rpr_window < 1:
            raise ContractError("rpr_window must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class Memory:
    """Encoder output plus the region padding mask used by cross-attention."""

    encoded: Tensor          # (B, regions, d_model)
    key_mask: np.ndarray     # (B, 1, regions) bool

    @property
    def batch(self) -> int:
        return self.encoded.shape[0]


# ------------------------------------------------------------------ params

def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple] = {"enc.in.W": (cfg.d_feat, d), "enc.in.b": (d,)}

    def attn(prefix):
        for name in _attn_names(prefix):
            shapes[name] = (d, d) if name.rsplit(".", 1)[1].startswith("W") else (d,)

    def block(prefix, n_ln):
        shapes[f"{prefix}.ff1.W"] = (d, f)
        shapes[f"{prefix}.ff1.b"] = (f,)
        shapes[f"{prefix}.ff2.W"] = (f, d)
        shapes[f"{prefix}.ff2.b"] = (d,)
        for i in range(1, n_ln + 1):
            shapes[f"{prefix}.ln{i}.g"] = (d,)
            shapes[f"{prefix}.ln{i}.b"] = (d,)

    for l in range(cfg.layers):
        attn(f"enc.{l}.self")
        block(f"enc.{l}", 2)
    shapes["dec.emb"] = (V, d)
    n_rel = 2 * cfg.rpr_window + 1
    for l in range(cfg.layers):
        attn(f"dec.{l}.self")
        shapes[f"dec.{l}.self.Rk"] = (n_rel, cfg.d_head)
        shapes[f"dec.{l}.self.Rv"] = (n_rel, cfg.d_head)
        attn(f"dec.{l}.cross")
        block(f"dec.{l}", 3)
    shapes["out.W"] = (d, V)
    shapes["out.b"] = (V,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    """Uniform(-s, s) weights with s = 1/sqrt(d_model); zero biases, unit gains."""
    s = 1.0 / math.sqrt(cfg.d_model)
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            out[name] = np.ones(shape, dtype=dtype)
        elif leaf.startswith("b"):
            out[name] = np.zeros(shape, dtype=dtype)
        else:
            out[name] = rng.uniform(-s, s, size=shape).astype(dtype)
    return out


def count_params(params) -> int:
    return int(sum(np.asarray(getattr(p, "data", p)).size for p in params.values()))


def params_checksum(params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(getattr(params[name], "data", params[name])).tobytes())
    return h.hexdigest()


def as_trainable(params: dict[str, np.ndarray], dtype=np.float64) -> dict[str, nn.Param]:
    return {k: nn.Param(np.array(v, dtype=dtype)) for k, v in params.items()}


def as_arrays(params, dtype=None) -> dict[str, np.ndarray]:
    out = {}
    for k, v in params.items():
        a = np.asarray(getattr(v, "data", v))
        out[k] = a.astype(dtype) if dtype is not None else a.copy()
    return out


# --------------------------------------------------------------- attention

def rpr_offsets(i: int, n: int, w: int) -> list[int]:
    """Relative offsets ``j - i`` clamped to ``[-w, w]`` for ``j in range(n)``."""
    return [min(w, max(-w, j - i)) for j in range(n)]


_bucket_cache: dict[tuple[int, int], np.ndarray] = {}


def rpr_buckets(n: int, w: int) -> np.ndarray:
    """One-hot ``E[i, j, o]`` = 1 iff clamp(j - i) == o - w.  Shape (n, n, 2w+1)."""
    key = (n, w)
    E = _bucket_cache.get(key)
    if E is None:
        off = np.clip(np.arange(n)[None, :] - np.arange(n)[:, None], -w, w) + w
        E = np.zeros((n, n, 2 * w + 1))
        E[np.arange(n)[:, None], np.arange(n)[None, :], off] = 1.0
        E.setflags(write=False)
        _bucket_cache[key] = E
    return E


def _heads(x: Tensor, h: int) -> Tensor:
    B, n, d = x.shape
    return nn.transpose(nn.reshape(x, (B, n, h, d // h)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    B, h, n, dh = x.shape
    return nn.reshape(nn.transpose(x, (0, 2, 1, 3)), (B, n, h * dh))


def attention(xq: Tensor, xkv: Tensor, P: dict, prefix: str, mask: np.ndarray, heads: int,
              rel: tuple | None = None) -> Tensor:
    """Multi-head attention.  ``mask`` is (B|1, n, m) bool.

    With ``rel=(Rk, Rv, w)`` the logits gain ``q_i . Rk[clamp(j-i)]`` and the
    values gain ``Rv[clamp(j-i)]`` (self-attention only).
    """
    g = lambda name: P[f"{prefix}.{name}"]
    q = _heads(nn.affine(xq, g("Wq"), g("bq")), heads)          # B h n dh
    k = _heads(nn.affine(xkv, g("Wk"), g("bk")), heads)         # B h m dh
    v = _heads(nn.affine(xkv, g("Wv"), g("bv")), heads)
    B, h, n, dh = q.shape
    logits = nn.matmul(q, nn.transpose(k, (0, 1, 3, 2)))        # B h n m
    if rel is not None:
        Rk, Rv, w = rel
        E = rpr_buckets(n, w).astype(q.dtype, copy=False)
        qr = nn.matmul(q, nn.transpose(Rk, (1, 0)))             # B h n O
        O = qr.shape[-1]
        rel_logits = nn.matmul(nn.reshape(qr, (B, h, n, 1, O)), np.swapaxes(E, 1, 2))
        logits = nn.add(logits, nn.reshape(rel_logits, (B, h, n, n)))
    logits = nn.mul(logits, 1.0 / math.sqrt(dh))
    p = nn.softmax_rows(logits, np.asarray(mask)[:, None, :, :])
    out = nn.matmul(p, v)
    if rel is not None:
        pb = nn.matmul(nn.reshape(p, (B, h, n, 1, n)), E)      # B h n 1 O
        out = nn.add(out, nn.matmul(nn.reshape(pb, (B, h, n, O)), Rv))
    return nn.affine(_merge(out), g("Wo"), g("bo"))


def rpr_self_attention(x, mask, Rk, Rv, P: dict, prefix: str, cfg: ModelConfig) -> Tensor:
    """Relative-position self-attention on a single (n, d) or batched input."""
    x = nn.as_tensor(x)
    single = x.data.ndim == 2
    if single:
        x = nn.reshape(x, (1,) + x.shape)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
    n = x.shape[1]
    if mask.shape[-2:] != (n, n):
        raise DimensionError(f"mask {mask.shape} does not match length {n}")
    out = attention(x, x, P, prefix, mask, cfg.heads, rel=(nn.as_tensor(Rk), nn.as_tensor(Rv), cfg.rpr_window))
    return nn.reshape(out, out.shape[1:]) if single else out


def _ffn(x: Tensor, P: dict, prefix: str) -> Tensor:
    hdn = nn.relu(nn.affine(x, P[f"{prefix}.ff1.W"], P[f"{prefix}.ff1.b"]))
    return nn.affine(hdn, P[f"{prefix}.ff2.W"], P[f"{prefix}.ff2.b"])


def _ln(x: Tensor, P: dict, prefix: str, eps: float) -> Tensor:
    return nn.layer_norm(x, P[f"{prefix}.g"], P[f"{prefix}.b"], eps)


def _wrap(params) -> dict:
    return {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in params.items()}


def _dtype(P: dict):
    return P["out.W"].dtype


# ----------------------------------------------------------------- encoder

def encode(feat, params, cfg: ModelConfig, n_regions=None) -> Memory:
    """Encode region features.

    ``feat`` is (regions, d_feat) or a padded batch (B, regions, d_feat);
    for batches ``n_regions`` gives the real region count of each row.
    No positional information is used, so region order is irrelevant.
    """
    P = _wrap(params)
    feat = np.asarray(feat, dtype=_dtype(P))
    if feat.ndim == 2:
        feat = feat[None]
    B, r, d_feat = feat.shape
    if r < 1:
        raise ContractError("need at least one region")
    if d_feat != cfg.d_feat or P["enc.in.W"].shape[0] != d_feat:
        raise DimensionError(f"feature width {d_feat} != {P['enc.in.W'].shape[0]}")
    if n_regions is None:
        key_mask = np.ones((B, 1, r), dtype=bool)
    else:
        key_mask = (np.arange(r)[None, :] < np.asarray(n_regions)[:, None])[:, None, :]
    x = nn.affine(Tensor(feat), P["enc.in.W"], P["enc.in.b"])
    for l in range(cfg.layers):
        pre = f"enc.{l}"
        x = _ln(nn.add(x, attention(x, x, P, f"{pre}.self", key_mask, cfg.heads)), P, f"{pre}.ln1", cfg.ln_eps)
        x = _ln(nn.add(x, _ffn(x, P, pre)), P, f"{pre}.ln2", cfg.ln_eps)
    return Memory(x, key_mask)


def select_memory(mem: Memory, rows) -> Memory:
    """Gather batch rows of a memory (used to repeat it across beams)."""
    rows = np.asarray(rows, dtype=np.intp)
    return Memory(Tensor(mem.encoded.data[rows]), mem.key_mask[rows])


# ----------------------------------------------------------------- decoder

def decoder_forward(tokens, mem: Memory, mask, params, cfg: ModelConfig) -> Tensor:
    """Logits for every position of ``tokens``.

    ``tokens`` is (n,) or (B, n); ``mask`` is (n, n) or (B|1, n, n).  The
    memory batch must be 1 or B.
    """
    P = _wrap(params)
    tok = np.asarray(tokens, dtype=np.intp)
    single = tok.ndim == 1
    if single:
        tok = tok[None]
    if tok.size and (tok.min() < 0 or tok.max() >= cfg.vocab_size):
        raise ContractError("token id outside vocabulary")
    B, n = tok.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape[-2:] != (n, n):
        raise DimensionError(f"mask {mask.shape} does not match {n} tokens")
    if mem.batch not in (1, B):
        raise DimensionError(f"memory batch {mem.batch} vs token batch {B}")
    x = nn.take_rows(P["dec.emb"], tok)
    w = cfg.rpr_window
    for l in range(cfg.layers):
        pre = f"dec.{l}"
        rel = (P[f"{pre}.self.Rk"], P[f"{pre}.self.Rv"], w)
        x = _ln(nn.add(x, attention(x, x, P, f"{pre}.self", mask, cfg.heads, rel=rel)), P, f"{pre}.ln1", cfg.ln_eps)
        x = _ln(nn.add(x, attention(x, mem.encoded, P, f"{pre}.cross", mem.key_mask, cfg.heads)),
                P, f"{pre}.ln2", cfg.ln_eps)
        x = _ln(nn.add(x, _ffn(x, P, pre)), P, f"{pre}.ln3", cfg.ln_eps)
    logits = nn.affine(x, P["out.W"], P["out.b"])
    return nn.reshape(logits, logits.shape[1:]) if single else logits


# -------------------------------------------------------------- checkpoint
#
# Layout: UTF-8 text header terminated by a line "end", then the tensors'
# raw little-endian float32 bytes in directory order.
#
#   saic-checkpoint 1
#   config <key>=<value> ...
#   tensor <name> <dim> <dim> ...
#   end

MAGIC = "saic-checkpoint 1"


def save_checkpoint(path, cfg: ModelConfig, params) -> None:
    arrays = as_arrays(params)
    lines = [MAGIC, "config " + " ".join(f"{k}={v}" for k, v in asdict(cfg).items())]
    for name, a in arrays.items():
        lines.append("tensor " + " ".join([name, *map(str, a.shape)]))
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    header_end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode()) or header_end < 0:
        raise ContractError(f"{path} is not a saic checkpoint")
    header = raw[:header_end].decode("utf-8").split("\n")
    offset = header_end + len(b"\nend\n")
    types = {f.name: f.type for f in fields(ModelConfig)}
    kw = {}
    for item in header[1].split()[1:]:
        k, v = item.split("=", 1)
        kw[k] = float(v) if types[k] in ("float", float) else int(v)
    cfg = ModelConfig(**kw)
    params = {}
    for line in header[2:]:
        parts = line.split()
        name, shape = parts[1], tuple(int(s) for s in parts[2:])
        count = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(raw):
        raise ContractError(f"{path}: payload size does not match tensor directory")
    return cfg, params
