"""Decoder-only transformer with language heads at interior layers.

The model decodes a depth-D response hierarchy in stages. The layer stack is
cut at a schedule of interior depths k_1 < ... < k_{D-1} < K (the final depth
K is the implicit last cut): segment d is the layer range [k_{d-1}, k_d), and
the level-d head reads hidden states at depth k_d. Level-d response tokens
are embedded directly at segment d's input; they never traverse earlier
layers. Everything upstream of a cut is therefore bitwise independent of
what happens after it, which the tests lean on heavily.

A `SegmentStream` describes one segment's input: which rows are fresh token
embeddings, which are hidden states carried from the previous segment, plus
positions, the attention mask, and which rows are scored. `segment_forward`
assembles the rows and runs the segment's layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import counter
from .errors import ConfigError, DataError, UsageError
from .tensor import (
    Tensor,
    add,
    concat_cols,
    concat_rows,
    gather_rows,
    gelu,
    matmul,
    rms_norm,
    rope_rotate,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
)

NORM_EPS = 1e-5
INIT_STD = 0.02


@dataclass
class ModelConfig:
    n_layers: int          # K
    hidden: int            # E
    n_heads: int
    ffn_mult: int          # c: FFN inner width is c * E
    vocab: int             # V
    depth: int = 1         # D response levels
    schedule: tuple[int, ...] = ()      # k_1 .. k_{D-1}
    loss_weights: tuple[float, ...] = ()  # f_1 .. f_{D-1}; f_D is fixed to 1
    rope_base: float = 10000.0
    max_positions: int = 4096           # capacity cap on stream length

    def __post_init__(self):
        self.schedule = tuple(int(k) for k in self.schedule)
        self.loss_weights = tuple(float(f) for f in self.loss_weights)
        if self.n_layers < 1 or self.hidden < 1 or self.vocab < 1 or self.depth < 1:
            raise ConfigError("n_layers, hidden, vocab, and depth must be positive")
        if self.n_heads < 1 or self.hidden % self.n_heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by n_heads {self.n_heads}")
        if (self.hidden // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary pairs")
        if self.ffn_mult < 1:
            raise ConfigError("ffn_mult must be positive")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be positive")
        if len(self.schedule) != self.depth - 1:
            raise ConfigError(f"schedule needs {self.depth - 1} cut points, got {len(self.schedule)}")
        if len(self.loss_weights) != self.depth - 1:
            raise ConfigError(f"loss_weights needs {self.depth - 1} entries, got {len(self.loss_weights)}")
        if any(f <= 0 for f in self.loss_weights):
            raise ConfigError("loss weights must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def cut_depths(self) -> tuple[int, ...]:
        """Depth read by each level's head: (k_1, ..., k_{D-1}, K)."""
        return self.schedule + (self.n_layers,)

    def segment_ranges(self) -> list[tuple[int, int]]:
        cuts = (0,) + self.cut_depths()
        return [(cuts[d], cuts[d + 1]) for d in range(self.depth)]


@dataclass
class LayerScheduleReport:
    feasible: bool
    min_layers_bound: float
    violations: list[str] = field(default_factory=list)


def validate_schedule(cfg: ModelConfig) -> LayerScheduleReport:
    """Check the decoding-layer schedule against the structural constraints.

    Three gates: cut points strictly increasing inside (0, K); every level
    left with enough depth to retrieve its response (k_d >= d, sufficient
    because 3^d > 2d); and the stack itself at least log_3(2D) layers deep,
    below which no schedule can work.
    """
    d_total = cfg.depth
    bound = math.log(2 * d_total) / math.log(3.0)
    violations: list[str] = []
    cuts = cfg.schedule
    inner_ok = all(0 < k < cfg.n_layers for k in cuts)
    if not inner_ok:
        violations.append(f"cut depths {cuts} must lie strictly inside (0, {cfg.n_layers})")
    if any(a >= b for a, b in zip(cuts, cuts[1:])):
        violations.append(f"cut depths {cuts} must be strictly increasing")
    full = cfg.cut_depths()
    if inner_ok and any(full[d - 1] < d for d in range(1, d_total + 1)):
        violations.append(f"level d needs cut depth k_d >= d, got {full}")
    if cfg.n_layers < bound:
        violations.append(
            f"{cfg.n_layers} layers cannot retrieve {d_total} levels (needs >= log_3(2D) = {bound:.4f})"
        )
    return LayerScheduleReport(feasible=not violations, min_layers_bound=bound, violations=violations)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_in: Tensor
    w_out: Tensor
    g_attn: Tensor
    g_ffn: Tensor


@dataclass
class Parameters:
    embed: Tensor               # [V, E]
    layers: list[LayerParams]
    heads: list[Tensor]         # one [E, V] projection per level, no bias

    def named(self):
        """(name, tensor) pairs in a fixed order; everything iterates this."""
        yield "embed", self.embed
        for i, lp in enumerate(self.layers):
            for f in ("wq", "wk", "wv", "wo", "w_in", "w_out", "g_attn", "g_ffn"):
                yield f"layers.{i}.{f}", getattr(lp, f)
        for d, h in enumerate(self.heads):
            yield f"heads.{d}", h

    def count(self, include_gains: bool = True) -> int:
        total = 0
        for name, t in self.named():
            if not include_gains and name.endswith(("g_attn", "g_ffn")):
                continue
            total += t.size
        return total


def init_model(cfg: ModelConfig, seed: int) -> Parameters:
    """Fresh parameters: N(0, 0.02) draws in a fixed order, with the two
    residual output projections shrunk by 1/sqrt(2K)."""
    rng = np.random.default_rng(seed)
    E, V, K = cfg.hidden, cfg.vocab, cfg.n_layers
    out_std = INIT_STD / math.sqrt(2.0 * K)

    def draw(rows, cols, std):
        return Tensor(rng.normal(0.0, std, size=(rows, cols)), requires_grad=True)

    embed = draw(V, E, INIT_STD)
    layers = []
    for _ in range(K):
        layers.append(LayerParams(
            wq=draw(E, E, INIT_STD),
            wk=draw(E, E, INIT_STD),
            wv=draw(E, E, INIT_STD),
            wo=draw(E, E, out_std),
            w_in=draw(E, cfg.ffn_mult * E, INIT_STD),
            w_out=draw(cfg.ffn_mult * E, E, out_std),
            g_attn=Tensor(np.ones(E), requires_grad=True),
            g_ffn=Tensor(np.ones(E), requires_grad=True),
        ))
    heads = [draw(E, V, INIT_STD) for _ in range(cfg.depth)]
    return Parameters(embed=embed, layers=layers, heads=heads)


def replicate_heads(params: Parameters, mode: str = "copy", seed: int = 0) -> Parameters:
    """Reset the interior heads from the final one: `copy` clones it, `random`
    draws them fresh. Returns a new Parameters sharing every other tensor."""
    if mode not in ("copy", "random"):
        raise ConfigError(f"unknown head replication mode {mode!r}")
    final = params.heads[-1]
    heads: list[Tensor] = []
    rng = np.random.default_rng(seed)
    for _ in params.heads[:-1]:
        if mode == "copy":
            heads.append(Tensor(final.data.copy(), requires_grad=True))
        else:
            heads.append(Tensor(rng.normal(0.0, INIT_STD, size=final.shape), requires_grad=True))
    heads.append(final)
    return Parameters(embed=params.embed, layers=params.layers, heads=heads)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def transformer_layer_forward(
    hidden: Tensor,
    layer: LayerParams,
    mask: np.ndarray,
    positions: np.ndarray,
    n_heads: int,
    rope_base: float = 10000.0,
) -> Tensor:
    """One pre-norm residual block over hidden [T,E].

    Attention queries/keys are rotated by absolute `positions` before the
    per-head dot products; `mask` (bool [T,T], True = may attend) is applied
    inside the softmax, so masked scores never touch the normalizer.
    """
    T, E = hidden.shape
    head_dim = E // n_heads
    x = hidden
    h = rms_norm(x, layer.g_attn, NORM_EPS)
    with counter.tag_region("attn_proj"):
        q = matmul(h, layer.wq)
        k = matmul(h, layer.wk)
        v = matmul(h, layer.wv)
    q = rope_rotate(q, positions, head_dim, rope_base)
    k = rope_rotate(k, positions, head_dim, rope_base)
    outs = []
    inv_scale = 1.0 / math.sqrt(head_dim)
    with counter.tag_region("attn_mix"):
        for i in range(n_heads):
            lo, hi = i * head_dim, (i + 1) * head_dim
            qh = slice_cols(q, lo, hi)
            kh = slice_cols(k, lo, hi)
            vh = slice_cols(v, lo, hi)
            probs = softmax_rows(scale(matmul(qh, transpose(kh)), inv_scale), mask)
            outs.append(matmul(probs, vh))
    with counter.tag_region("attn_proj"):
        x = add(x, matmul(concat_cols(outs), layer.wo))
    h2 = rms_norm(x, layer.g_ffn, NORM_EPS)
    with counter.tag_region("ffn"):
        return add(x, matmul(gelu(matmul(h2, layer.w_in)), layer.w_out))


@dataclass
class SegmentStream:
    """Input description for one segment's forward pass.

    Rows [0, n_rows) are either fresh token embeddings (`token_rows` filled
    from `token_ids`) or hidden states carried from the previous segment
    (`latent_rows` filled from `latents`, attached by the caller once that
    segment has run). `loss_rows` are the rows whose next-token prediction is
    scored, against `loss_targets`.
    """
    positions: np.ndarray
    token_rows: np.ndarray
    token_ids: np.ndarray
    latent_rows: np.ndarray
    roles: list[str]
    attention_mask: np.ndarray
    loss_rows: np.ndarray
    loss_targets: np.ndarray
    latents: Tensor | None = None

    @property
    def n_rows(self) -> int:
        return self.positions.shape[0]

    def with_latents(self, latents: Tensor) -> "SegmentStream":
        if latents.shape[0] != self.latent_rows.shape[0]:
            raise UsageError(
                f"stream expects {self.latent_rows.shape[0]} carried rows, got {latents.shape[0]}"
            )
        return replace(self, latents=latents)


def _assemble_rows(stream: SegmentStream, params: Parameters, vocab: int) -> Tensor:
    T = stream.n_rows
    n_tok, n_lat = stream.token_rows.shape[0], stream.latent_rows.shape[0]
    if n_tok + n_lat != T:
        raise UsageError(f"stream rows {T} != {n_tok} token + {n_lat} latent rows")
    if n_tok and (stream.token_ids.min() < 0 or stream.token_ids.max() >= vocab):
        raise DataError(f"token id outside vocabulary of size {vocab}")
    if n_lat and stream.latents is None:
        raise UsageError("stream has carried rows but no latents attached")
    pieces = []
    if n_tok:
        pieces.append(gather_rows(params.embed, stream.token_ids))
    if n_lat:
        pieces.append(stream.latents)
    block = pieces[0] if len(pieces) == 1 else concat_rows(pieces)
    order = np.empty(T, dtype=np.int64)
    order[stream.token_rows] = np.arange(n_tok)
    order[stream.latent_rows] = n_tok + np.arange(n_lat)
    if np.array_equal(order, np.arange(T)):
        return block
    return gather_rows(block, order)


def segment_forward(
    stream: SegmentStream,
    params: Parameters,
    layer_range: tuple[int, int],
    cfg: ModelConfig,
) -> Tensor:
    """Assemble the stream's rows and run layers [a, b) over them.

    Returns hidden states [T, E] at depth b. An empty range returns the
    assembled input itself.
    """
    a, b = layer_range
    if not (0 <= a <= b <= cfg.n_layers):
        raise UsageError(f"layer range [{a}, {b}) outside stack of {cfg.n_layers}")
    if stream.n_rows and int(stream.positions.max()) >= cfg.max_positions:
        raise DataError(
            f"stream reaches position {int(stream.positions.max())}, "
            f"model capacity is {cfg.max_positions}"
        )
    x = _assemble_rows(stream, params, cfg.vocab)
    if x.shape[1] != cfg.hidden:
        raise UsageError(f"stream rows have width {x.shape[1]}, model expects {cfg.hidden}")
    for l in range(a, b):
        counter.record_layer(l, stream.n_rows)
        x = transformer_layer_forward(
            x, params.layers[l], stream.attention_mask, stream.positions,
            cfg.n_heads, cfg.rope_base,
        )
    return x


def head_logits(level: int, hidden: Tensor, params: Parameters) -> Tensor:
    """Project hidden rows [T,E] through the level-d head (1-based d)."""
    if not 1 <= level <= len(params.heads):
        raise UsageError(f"level {level} outside 1..{len(params.heads)}")
    with counter.tag_region("head"):
        return matmul(hidden, params.heads[level - 1])
