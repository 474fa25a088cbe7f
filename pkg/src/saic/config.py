"""Flat ``key = value`` run configuration and seed splitting.

Precedence is command-line flag > config file > built-in default.  Flags
mirror keys one-to-one with ``-`` in place of ``_`` (``m_out`` is
``--m-out``).  Lines starting with ``#`` and blank lines are ignored;
unknown keys are rejected.

Seeds: every subsystem draws from ``subseed(seed, name)``, a SeedSequence
keyed by the global seed and the CRC-32 of the subsystem name, so streams
are independent but reproducible.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ContractError


@dataclass
class RunConfig:
    seed: int = 0
    # model
    layers: int = 2
    d_model: int = 64
    d_ff: int = 128
    heads: int = 4
    rpr_window: int = 4
    # training
    epochs: int = 30
    curriculum_epochs: int = 0        # 0: same as epochs
    lr: float = 1e-3
    lr_decay: float = 0.9
    decay_every: int = 5
    batch_size: int = 32
    p_hybr: float = 0.5
    lam: float = 1.0
    patience: int = 3
    # decoding
    strategy: str = "SAIC"
    k: int = 4
    m_out: int = 1
    m_fill: int = 1
    iters: int = 1
    max_len: int = 24
    length_source: str = "oracle"
    distill_beam: int = 5
    # experiments
    runs: int = 3
    seeds: int = 4
    grid: str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _coerce(name: str, raw: str):
    typ = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError as e:
        raise ContractError(f"config key {name!r}: cannot parse {raw!r}") from e
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    known = set(RunConfig.keys())
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{source}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ContractError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, val)
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then ``path`` (if given), then non-None ``overrides``."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        if k not in RunConfig.keys():
            raise ContractError(f"unknown config key {k!r}")
        if v is not None:
            values[k] = v
    return RunConfig(**values)


def subseed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])
