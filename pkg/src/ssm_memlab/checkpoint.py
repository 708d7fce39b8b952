"""Checkpoint files.

Layout: one line of JSON (the header) terminated by ``\\n``, then the raw
arrays back to back as little-endian float32 in the order the header lists
them. The header records the model config, seed, dtype, every array's name
and shape, and optional training metadata (step, loss, accuracy,
optimizer state). Loading validates every shape against the config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import ModelConfig, ModelParams, expected_shapes

FORMAT = "ssm-memlab-checkpoint"
VERSION = 1
DTYPE = "<f4"


@dataclass
class LoadedCheckpoint:
    params: ModelParams
    step: int = 0
    meta: dict = field(default_factory=dict)
    optimizer_meta: dict | None = None
    optimizer_arrays: dict = field(default_factory=dict)


def save_checkpoint(path, params: ModelParams, step=0, meta=None, optimizer_state=None):
    """Write ``params`` (and optionally ``(opt_meta, opt_arrays)``) to ``path``."""
    arrays = list(params.named())
    opt_meta = None
    if optimizer_state is not None:
        opt_meta, opt_arrays = optimizer_state
        arrays += sorted(opt_arrays.items())
    header = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": DTYPE,
        "seed": params.config.seed,
        "config": params.config.to_dict(),
        "step": int(step),
        "meta": meta or {},
        "optimizer": opt_meta,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    path = Path(path)
    with path.open("wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype=DTYPE).tobytes())
    return path


def load_checkpoint(path) -> LoadedCheckpoint:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ConfigError(f"{path}: no checkpoint header")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: unreadable checkpoint header ({exc})") from None
    if header.get("format") != FORMAT or header.get("dtype") != DTYPE:
        raise ConfigError(f"{path}: not a {FORMAT} file with dtype {DTYPE}")
    config = ModelConfig.from_dict(header["config"])
    arrays = {}
    offset = nl + 1
    itemsize = np.dtype(DTYPE).itemsize
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * itemsize
        if end > len(raw):
            raise ConfigError(f"{path}: truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, DTYPE, count, offset).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise ConfigError(f"{path}: {len(raw) - offset} trailing bytes")
    want = expected_shapes(config)
    for name, shape in want.items():
        if name not in arrays:
            raise ConfigError(f"{path}: missing array {name}")
        if arrays[name].shape != shape:
            raise ConfigError(f"{path}: {name} has shape {arrays[name].shape}, config expects {shape}")
    params = ModelParams.from_named(config, {n: arrays[n] for n in want})
    extra = {n: a for n, a in arrays.items() if n not in want}
    return LoadedCheckpoint(params, header.get("step", 0), header.get("meta", {}), header.get("optimizer"), extra)


def round_to_storage(params: ModelParams) -> ModelParams:
    """The parameters exactly as a checkpoint will store them."""
    return ModelParams.from_named(
        params.config, {n: a.astype(DTYPE).astype(np.float64) for n, a in params.named()}
    )
