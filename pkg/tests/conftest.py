"""Shared toy-model helpers for the test suite."""

import numpy as np

from hdlm.model import ModelConfig, SegmentStream, init_model, replicate_heads

TINY = dict(n_layers=2, hidden=8, n_heads=2, ffn_mult=2, vocab=11)


def tiny_cfg(**over) -> ModelConfig:
    kw = dict(TINY)
    kw.update(over)
    return ModelConfig(**kw)


def two_level_cfg(**over) -> ModelConfig:
    kw = dict(TINY, depth=2, schedule=(1,), loss_weights=(1.0,))
    kw.update(over)
    return ModelConfig(**kw)


def make_model(cfg: ModelConfig, seed: int = 42, mode: str = "copy"):
    return replicate_heads(init_model(cfg, seed), mode=mode, seed=seed + 1)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def token_stream(ids, loss_rows=(), loss_targets=()) -> SegmentStream:
    """A stream of nothing but freshly embedded tokens at positions 0..T-1."""
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[0]
    return SegmentStream(
        positions=np.arange(n),
        token_rows=np.arange(n),
        token_ids=ids,
        latent_rows=np.empty(0, dtype=np.int64),
        roles=["query"] * n,
        attention_mask=causal_mask(n),
        loss_rows=np.asarray(loss_rows, dtype=np.int64),
        loss_targets=np.asarray(loss_targets, dtype=np.int64),
    )
