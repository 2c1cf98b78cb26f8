"""Versioned binary checkpoints with bitwise round-trips.

File layout, all little-endian:

    bytes 0..4    magic b"HDLM"
    bytes 4..8    format version (u32)
    bytes 8..16   metadata length in bytes (u64)
    then          metadata JSON (model config, tokenizer vocabulary, step,
                  RNG state, array manifest)
    then          raw array payloads, concatenated in manifest order

Weights are stored as '<f8' so load(save(x)) reproduces every array bit for
bit, and the metadata JSON is written with sorted keys so identical states
produce identical files. Writes go to a temp file and rename into place;
loads fail closed, reporting the byte offset of the first problem.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .model import LayerParams, ModelConfig, Parameters
from .tasks import Tokenizer
from .tensor import Tensor
from .training import OptimizerState

MAGIC = b"HDLM"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIQ")
_LAYER_FIELDS = ("wq", "wk", "wv", "wo", "w_in", "w_out", "g_attn", "g_ffn")
_META_KEYS = ("arrays", "config", "optimizer_step", "rng", "step", "tokenizer")


@dataclass
class Checkpoint:
    """Everything a resumed run needs: weights, optimizer moments, the data
    loader's RNG state, and the tokenizer the weights were trained against."""
    config: ModelConfig
    params: Parameters
    step: int = 0
    optimizer: OptimizerState | None = None
    rng_state: dict | None = None
    tokenizer: Tokenizer | None = None


# ---------------------------------------------------------------------------
# rng plumbing
# ---------------------------------------------------------------------------

def rng_state(rng: np.random.Generator) -> dict:
    """JSON-friendly snapshot of a generator (PCG64 state is plain ints)."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


# ---------------------------------------------------------------------------
# save
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    arrays: list[tuple[str, np.ndarray]] = [
        (name, np.ascontiguousarray(t.data, dtype="<f8"))
        for name, t in ckpt.params.named()
    ]
    opt_step = None
    if ckpt.optimizer is not None:
        opt_step = ckpt.optimizer.step
        for name, _ in ckpt.params.named():
            arrays.append((f"opt.m.{name}", np.ascontiguousarray(ckpt.optimizer.m[name], dtype="<f8")))
            arrays.append((f"opt.v.{name}", np.ascontiguousarray(ckpt.optimizer.v[name], dtype="<f8")))
    meta = {
        "config": asdict(ckpt.config),
        "step": int(ckpt.step),
        "rng": ckpt.rng_state,
        "tokenizer": None if ckpt.tokenizer is None else {
            "tokens": list(ckpt.tokenizer.id_to_token),
            "depth": ckpt.tokenizer.depth,
        },
        "optimizer_step": opt_step,
        "arrays": [
            {"name": name, "dtype": "<f8", "shape": list(arr.shape)}
            for name, arr in arrays
        ],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(arr.tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# load
# ---------------------------------------------------------------------------

def _read_exact(fh, n: int, what: str) -> bytes:
    pos = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise IntegrityError(
            f"truncated checkpoint: {what} needs {n} bytes, found {len(buf)}",
            offset=pos + len(buf),
        )
    return buf


def _expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    e, v, inner = cfg.hidden, cfg.vocab, cfg.ffn_mult * cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, e)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for f in ("wq", "wk", "wv", "wo"):
            shapes[p + f] = (e, e)
        shapes[p + "w_in"] = (e, inner)
        shapes[p + "w_out"] = (inner, e)
        shapes[p + "g_attn"] = shapes[p + "g_ffn"] = (e,)
    for d in range(cfg.depth):
        shapes[f"heads.{d}"] = (e, v)
    return shapes


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        header = _read_exact(fh, _HEADER.size, "header")
        magic, version, meta_len = _HEADER.unpack(header)
        if magic != MAGIC:
            raise IntegrityError(
                f"not a checkpoint file: magic {magic!r} != {MAGIC!r}", offset=0
            )
        if version != FORMAT_VERSION:
            raise IntegrityError(
                f"checkpoint format version {version} is not supported; "
                f"this build reads version {FORMAT_VERSION}",
                offset=4,
            )
        meta_start = fh.tell()
        blob = _read_exact(fh, meta_len, "metadata")
        try:
            meta = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(
                f"checkpoint metadata is not valid JSON ({exc})", offset=meta_start
            ) from exc
        if not isinstance(meta, dict) or any(k not in meta for k in _META_KEYS):
            raise IntegrityError(
                f"checkpoint metadata must carry keys {_META_KEYS}", offset=meta_start
            )
        arrays: dict[str, np.ndarray] = {}
        for entry in meta["arrays"]:
            name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
            dtype = np.dtype(entry["dtype"])
            buf = _read_exact(fh, math.prod(shape) * dtype.itemsize, f"array {name!r}")
            arrays[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
        pos = fh.tell()
        if fh.read(1):
            raise IntegrityError("trailing bytes after the declared payload", offset=pos)
    return _assemble(meta, arrays, meta_start)


def _assemble(meta: dict, arrays: dict[str, np.ndarray], meta_start: int) -> Checkpoint:
    try:
        cfg = ModelConfig(**meta["config"])
    except (TypeError, ValueError) as exc:
        raise IntegrityError(f"checkpoint config rejected: {exc}", offset=meta_start) from exc
    expected = _expected_shapes(cfg)

    def take(name: str) -> np.ndarray:
        if name not in arrays:
            raise IntegrityError(f"checkpoint payload is missing array {name!r}", offset=meta_start)
        arr = arrays.pop(name)
        want = expected[name.removeprefix("opt.m.").removeprefix("opt.v.")]
        if arr.shape != want:
            raise IntegrityError(
                f"array {name!r} has shape {arr.shape}, config implies {want}",
                offset=meta_start,
            )
        return arr

    params = Parameters(
        embed=Tensor(take("embed"), requires_grad=True),
        layers=[
            LayerParams(**{
                f: Tensor(take(f"layers.{i}.{f}"), requires_grad=True)
                for f in _LAYER_FIELDS
            })
            for i in range(cfg.n_layers)
        ],
        heads=[Tensor(take(f"heads.{d}"), requires_grad=True) for d in range(cfg.depth)],
    )
    optimizer = None
    if meta["optimizer_step"] is not None:
        names = [name for name, _ in params.named()]
        optimizer = OptimizerState(
            m={name: take(f"opt.m.{name}") for name in names},
            v={name: take(f"opt.v.{name}") for name in names},
            step=int(meta["optimizer_step"]),
        )
    if arrays:
        raise IntegrityError(
            f"checkpoint carries unexpected arrays {sorted(arrays)}", offset=meta_start
        )
    tokenizer = None
    if meta["tokenizer"] is not None:
        tokens = meta["tokenizer"]["tokens"]
        tokenizer = Tokenizer(
            {t: i for i, t in enumerate(tokens)}, int(meta["tokenizer"]["depth"])
        )
    return Checkpoint(
        config=cfg,
        params=params,
        step=int(meta["step"]),
        optimizer=optimizer,
        rng_state=meta["rng"],
        tokenizer=tokenizer,
    )
