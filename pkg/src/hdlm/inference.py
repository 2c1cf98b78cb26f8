"""Staged autoregressive decoding with per-layer key/value caches.

Levels decode in order. The query prefills layers [0, k_1); level d then
samples from its head at depth k_d, and each sampled token is embedded at
segment d's input and forwarded through only that segment's layers, so a
level-d token costs k_d - k_{d-1} layer applications. Between levels, the
carried rows are pushed through the next segment's layers once ("boundary
prefill") to seed its caches.

This path is plain numpy with no tape; the tests hold it to the dense
recompute (`segment_forward` on the materialized stream) within 1e-10 at
every step. Flat mode drives the same machinery as one segment spanning the
whole stack with the final head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import counter
from .errors import ConfigError, DataError, ProtocolError, UsageError
from .model import NORM_EPS, ModelConfig, Parameters
from .tensor import _GELU_C

@dataclass
class GenerationConfig:
    max_len: int = 32          # per level
    temperature: float = 0.0   # 0 picks the argmax
    top_k: int = 0             # 0 disables truncation
    seed: int = 0

    def __post_init__(self):
        if self.max_len < 1:
            raise ConfigError("max_len must be positive")
        if self.temperature < 0 or self.top_k < 0:
            raise ConfigError("temperature and top_k must be non-negative")


@dataclass
class HierOutput:
    token_ids: list[np.ndarray]
    lengths: list[int]
    mean_logprob: list[float]
    texts: list[str] = field(default_factory=list)


@dataclass
class DecodeState:
    params: Parameters
    cfg: ModelConfig
    mode: str
    latents: np.ndarray            # [P, E] deepest computed hidden per row
    positions: int                 # rows materialized so far
    caches: dict[int, dict[str, np.ndarray]]
    next_level: int = 1


# ---------------------------------------------------------------------------
# numpy layer forward over cached context
# ---------------------------------------------------------------------------

def _rms(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    counter.add_aux("rms_norm", x.size)
    return x * inv * gain


def _gelu(x: np.ndarray) -> np.ndarray:
    counter.add_aux("gelu", x.size)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _rope(x: np.ndarray, positions: np.ndarray, head_dim: int, base: float) -> np.ndarray:
    half = head_dim // 2
    n_heads = x.shape[1] // head_dim
    theta = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = positions[:, None].astype(np.float64) * theta[None, :]
    cos = np.tile(np.cos(angles), (1, n_heads))
    sin = np.tile(np.sin(angles), (1, n_heads))
    xe, xo = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = xe * cos - xo * sin
    out[:, 1::2] = xe * sin + xo * cos
    counter.add_aux("rope", x.size)
    return out


def _layer_rows(
    x: np.ndarray,
    lp,
    cache: dict[str, np.ndarray],
    positions: np.ndarray,
    cfg: ModelConfig,
) -> np.ndarray:
    """Forward `x` [n,E] (rows at absolute `positions`) through one block,
    attending over everything already in `cache` plus themselves causally.
    Appends the new keys/values to the cache."""
    n, E = x.shape
    hd = cfg.head_dim
    prior = cache["k"].shape[0]
    h = _rms(x, lp.g_attn.data)
    q = counter.mm(h, lp.wq.data, "attn_proj")
    k = counter.mm(h, lp.wk.data, "attn_proj")
    v = counter.mm(h, lp.wv.data, "attn_proj")
    q = _rope(q, positions, hd, cfg.rope_base)
    k = _rope(k, positions, hd, cfg.rope_base)
    k_all = np.concatenate([cache["k"], k], axis=0)
    v_all = np.concatenate([cache["v"], v], axis=0)
    cache["k"], cache["v"] = k_all, v_all
    ctx = k_all.shape[0]
    inv = 1.0 / math.sqrt(hd)
    heads_out = np.empty((n, E))
    for i in range(cfg.n_heads):
        lo, hi = i * hd, (i + 1) * hd
        scores = counter.mm(q[:, lo:hi], k_all[:, lo:hi].T, "attn_mix") * inv  # [n, ctx]
        allowed = np.arange(ctx)[None, :] <= (prior + np.arange(n))[:, None]
        scores = np.where(allowed, scores, -np.inf)
        m = scores.max(axis=1, keepdims=True)
        e = np.exp(scores - m)
        counter.add_aux("softmax_exp", int(allowed.sum()))
        probs = e / e.sum(axis=1, keepdims=True)
        heads_out[:, lo:hi] = counter.mm(probs, v_all[:, lo:hi], "attn_mix")
    x = x + counter.mm(heads_out, lp.wo.data, "attn_proj")
    h2 = _rms(x, lp.g_ffn.data)
    return x + counter.mm(_gelu(counter.mm(h2, lp.w_in.data, "ffn")), lp.w_out.data, "ffn")


def _run_segment(state: DecodeState, rows: np.ndarray, positions: np.ndarray,
                 layer_range: tuple[int, int]) -> np.ndarray:
    if positions.size and int(positions.max()) >= state.cfg.max_positions:
        raise DataError(
            f"decoding reaches position {int(positions.max())}, "
            f"model capacity is {state.cfg.max_positions}"
        )
    x = rows
    for l in range(*layer_range):
        counter.record_layer(l, x.shape[0])
        cache = state.caches.setdefault(l, {"k": np.empty((0, state.cfg.hidden)),
                                            "v": np.empty((0, state.cfg.hidden))})
        x = _layer_rows(x, state.params.layers[l], cache, positions, state.cfg)
    return x


def _segment_range(cfg: ModelConfig, level: int, mode: str) -> tuple[int, int]:
    if mode == "flat":
        return (0, cfg.n_layers)
    return cfg.segment_ranges()[level - 1]


# ---------------------------------------------------------------------------
# public protocol: prefill, decode level by level
# ---------------------------------------------------------------------------

def prefill(params: Parameters, cfg: ModelConfig, query_ids: np.ndarray,
            mode: str = "hier") -> DecodeState:
    """Embed the query and push it through the first segment's layers."""
    if mode not in ("hier", "flat"):
        raise UsageError(f"unknown decode mode {mode!r}")
    query_ids = np.asarray(query_ids, dtype=np.int64)
    if query_ids.size == 0:
        raise DataError("cannot prefill an empty query")
    if query_ids.min() < 0 or query_ids.max() >= cfg.vocab:
        raise DataError(f"query token id outside vocabulary of size {cfg.vocab}")
    state = DecodeState(
        params=params, cfg=cfg, mode=mode,
        latents=np.empty((0, cfg.hidden)), positions=0, caches={},
    )
    x = params.embed.data[query_ids]
    with counter.phase_region("prefill"):
        x = _run_segment(state, x, np.arange(query_ids.size), _segment_range(cfg, 1, mode))
    state.latents = x
    state.positions = query_ids.size
    return state


def _choose(logits: np.ndarray, gcfg: GenerationConfig,
            rng: np.random.Generator) -> tuple[int, float]:
    """Pick a token id; returns (id, model log-prob of that id)."""
    m = logits.max()
    logprobs = logits - (m + math.log(np.exp(logits - m).sum()))
    counter.add_aux("softmax_exp", logits.size)
    if gcfg.temperature == 0.0:
        tok = int(np.argmax(logits))
        return tok, float(logprobs[tok])
    z = logits / gcfg.temperature
    if gcfg.top_k:
        keep = np.argsort(z)[-gcfg.top_k:]
        masked = np.full_like(z, -np.inf)
        masked[keep] = z[keep]
        z = masked
    zm = z.max()
    p = np.exp(z - zm)
    p /= p.sum()
    tok = int(rng.choice(z.size, p=p))
    return tok, float(logprobs[tok])


def decode_level(state: DecodeState, level: int, gcfg: GenerationConfig,
                 stop_id: int, rng: np.random.Generator | None = None) -> tuple[np.ndarray, float]:
    """Decode one level's response; returns (ids, mean model log-prob).

    Must be called with levels in order 1..D. Decoding runs until `stop_id`
    is produced (it stays in the output) or `max_len` tokens are out. Every
    sampled token is forwarded through the segment so later levels can attend
    to it.
    """
    cfg = state.cfg
    if level != state.next_level:
        raise ProtocolError(f"decode_level({level}) out of order; expected {state.next_level}")
    if level > cfg.depth:
        raise ProtocolError(f"level {level} beyond model depth {cfg.depth}")
    if rng is None:
        rng = np.random.default_rng(gcfg.seed)
    seg = _segment_range(cfg, level, state.mode)
    if state.mode == "hier" and level > 1:
        with counter.phase_region(f"boundary:level{level}"):
            state.latents = _run_segment(
                state, state.latents, np.arange(state.positions), seg
            )
    head = state.params.heads[(cfg.depth if state.mode == "flat" else level) - 1].data
    ids: list[int] = []
    logprobs: list[float] = []
    for j in range(gcfg.max_len):
        logits = counter.mm(state.latents[-1], head, "head")
        tok, lp = _choose(logits, gcfg, rng)
        ids.append(tok)
        logprobs.append(lp)
        with counter.phase_region(f"decode:level{level}:token{j}"):
            row = _run_segment(
                state,
                state.params.embed.data[np.array([tok])],
                np.array([state.positions]),
                seg,
            )
        state.latents = np.concatenate([state.latents, row], axis=0)
        state.positions += 1
        if tok == stop_id:
            break
    state.next_level += 1
    return np.array(ids, dtype=np.int64), float(np.mean(logprobs))


def generate(params: Parameters, cfg: ModelConfig, query_ids: np.ndarray,
             gcfg: GenerationConfig, stop_ids: list[int],
             mode: str = "hier") -> HierOutput:
    """Decode all D levels for one query. `stop_ids` holds each level's
    end-of-level token id."""
    if len(stop_ids) != cfg.depth:
        raise UsageError(f"need {cfg.depth} stop ids, got {len(stop_ids)}")
    rng = np.random.default_rng(gcfg.seed)
    state = prefill(params, cfg, query_ids, mode)
    token_ids: list[np.ndarray] = []
    mean_lp: list[float] = []
    for d in range(1, cfg.depth + 1):
        ids, lp = decode_level(state, d, gcfg, stop_ids[d - 1], rng)
        token_ids.append(ids)
        mean_lp.append(lp)
    return HierOutput(
        token_ids=token_ids,
        lengths=[int(t.size) for t in token_ids],
        mean_logprob=mean_lp,
    )
