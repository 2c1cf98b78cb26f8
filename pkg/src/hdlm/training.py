"""Staged finetuning of the hierarchy: streams, losses, AdamW, the loop.

Teacher forcing everywhere. In hierarchical mode, segment d's stream carries
the previous segment's hidden rows and injects the gold level-d response
tokens behind them; the level-d loss is the mean next-token NLL over that
response, read at depth k_d. The combined objective is

    total = f_1 L_1 + ... + f_{D-1} L_{D-1} + L_D

per sample, averaged over the batch. Gradients flow backward across segment
boundaries through the carried rows unless `detach_segments` cuts them.

Flat mode is the ablation baseline: one stream through every layer, all
response levels scored together at the final head (a plain next-token
finetune when D = 1).

Batching concatenates the per-sample streams into one block-diagonal stream
per segment, which keeps the op count per step independent of batch size;
positions stay sample-absolute and the attention mask never crosses sample
boundaries, so per-sample results are unchanged by their neighbors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, UsageError
from .model import (
    LayerParams,
    ModelConfig,
    Parameters,
    SegmentStream,
    head_logits,
    segment_forward,
)
from .tensor import Tape, Tensor, add, backward, cross_entropy, gather_rows, scale


@dataclass
class HierSample:
    """One training example: query ids plus one id sequence per level, each
    already terminated by that level's end-of-level token."""
    query: np.ndarray
    responses: list[np.ndarray]

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.int64)
        self.responses = [np.asarray(r, dtype=np.int64) for r in self.responses]
        if self.query.size == 0:
            raise DataError("sample has an empty query")

    @property
    def depth(self) -> int:
        return len(self.responses)


@dataclass
class TrainConfig:
    lr: float = 3e-4
    total_steps: int = 1000
    batch_size: int = 16
    warmup_frac: float = 0.03
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mode: str = "hier"              # "hier" | "flat"
    detach_segments: bool = False

    def __post_init__(self):
        if self.mode not in ("hier", "flat"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.lr < 0 or self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("lr, total_steps, batch_size must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")


@dataclass
class LossBreakdown:
    """Per-step report. In hierarchical mode `total` equals
    sum(weights[d] * per_level[d]) up to float reassociation; in flat mode
    per_level are diagnostics and `total` is the token-weighted mean."""
    per_level: list[float]
    weights: list[float]
    tokens_per_level: list[int]
    total: float
    lr: float = 0.0


def cosine_schedule(step: int, total_steps: int, base_lr: float, warmup_frac: float = 0.03) -> float:
    """Linear warmup to base_lr, then a half-cosine decay to zero."""
    if total_steps < 1:
        raise ConfigError("total_steps must be positive")
    step = min(max(step, 0), total_steps)
    warmup = int(round(warmup_frac * total_steps))
    if step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    progress = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# stream construction
# ---------------------------------------------------------------------------

def _roles(sample: HierSample, through_level: int) -> list[str]:
    roles = ["query"] * sample.query.size
    for d in range(1, through_level + 1):
        roles += [f"response:{d}"] * sample.responses[d - 1].size
    return roles


def build_segment_stream(sample: HierSample, level: int, mode: str = "hier") -> SegmentStream:
    """Lay out segment `level`'s input rows for one sample.

    Hierarchical mode: rows for the query and responses below `level` are
    carried latents (the caller attaches them), level's own response tokens
    are injected at the end, and the loss covers exactly those tokens.
    Flat mode (level must be 1): every token of every level is injected at
    layer zero and all response tokens are scored.
    """
    if mode == "flat":
        if level != 1:
            raise UsageError("flat mode has a single segment; level must be 1")
        ids = np.concatenate([sample.query] + [r for r in sample.responses])
        n = ids.size
        n_query = sample.query.size
        return SegmentStream(
            positions=np.arange(n),
            token_rows=np.arange(n),
            token_ids=ids,
            latent_rows=np.empty(0, dtype=np.int64),
            roles=_roles(sample, sample.depth),
            attention_mask=np.tril(np.ones((n, n), dtype=bool)),
            loss_rows=np.arange(n_query - 1, n - 1),
            loss_targets=ids[n_query:],
        )
    if mode != "hier":
        raise UsageError(f"unknown stream mode {mode!r}")
    if not 1 <= level <= sample.depth:
        raise UsageError(f"level {level} outside sample depth {sample.depth}")
    n_prev = sample.query.size + sum(r.size for r in sample.responses[: level - 1])
    resp = sample.responses[level - 1]
    n = n_prev + resp.size
    if level == 1:
        token_rows = np.arange(n)
        token_ids = np.concatenate([sample.query, resp])
        latent_rows = np.empty(0, dtype=np.int64)
    else:
        token_rows = np.arange(n_prev, n)
        token_ids = resp
        latent_rows = np.arange(n_prev)
    return SegmentStream(
        positions=np.arange(n),
        token_rows=token_rows,
        token_ids=token_ids,
        latent_rows=latent_rows,
        roles=_roles(sample, level),
        attention_mask=np.tril(np.ones((n, n), dtype=bool)),
        loss_rows=np.arange(n_prev - 1, n - 1) if resp.size else np.empty(0, dtype=np.int64),
        loss_targets=resp,
    )


def concat_streams(streams: list[SegmentStream]) -> tuple[SegmentStream, np.ndarray]:
    """Stack per-sample streams into one block-diagonal batch stream.

    Returns the combined stream plus each sample's row offset. Positions stay
    sample-absolute; the mask forbids attention across samples. Carried rows
    keep sample-major order, so the previous segment's full output tensor can
    be attached as the latents without reshuffling.
    """
    if not streams:
        raise UsageError("concat_streams of nothing")
    sizes = [s.n_rows for s in streams]
    offsets = np.concatenate([[0], np.cumsum(sizes)])[:-1]
    total = int(sum(sizes))
    mask = np.zeros((total, total), dtype=bool)
    for off, s in zip(offsets, streams):
        mask[off:off + s.n_rows, off:off + s.n_rows] = s.attention_mask
    return SegmentStream(
        positions=np.concatenate([s.positions for s in streams]),
        token_rows=np.concatenate([s.token_rows + off for off, s in zip(offsets, streams)]),
        token_ids=np.concatenate([s.token_ids for s in streams]),
        latent_rows=np.concatenate([s.latent_rows + off for off, s in zip(offsets, streams)]),
        roles=[r for s in streams for r in s.roles],
        attention_mask=mask,
        loss_rows=np.concatenate([s.loss_rows + off for off, s in zip(offsets, streams)]),
        loss_targets=np.concatenate([s.loss_targets for s in streams]),
    ), offsets


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def level_loss(level: int, hidden: Tensor, rows: np.ndarray, targets: np.ndarray,
               params: Parameters) -> Tensor:
    """Mean next-token NLL of `targets` read from `hidden` rows through the
    level's head."""
    picked = gather_rows(hidden, rows)
    return cross_entropy(head_logits(level, picked, params), targets)


def total_loss(per_level: list[Tensor], weights: list[float]) -> Tensor:
    """Weighted sum of the level losses; weights has one entry per level with
    the last pinned to 1 by the callers."""
    if len(per_level) != len(weights):
        raise UsageError(f"{len(per_level)} losses vs {len(weights)} weights")
    acc = None
    for lvl, w in zip(per_level, weights):
        term = lvl if w == 1.0 else scale(lvl, w)
        acc = term if acc is None else add(acc, term)
    return acc


def _nll_rows(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Plain-array per-row NLL, for diagnostics off the tape."""
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return lse - logits[np.arange(logits.shape[0]), targets]


def hierarchical_loss(
    params: Parameters,
    batch: list[HierSample],
    mcfg: ModelConfig,
    mode: str = "hier",
    detach_segments: bool = False,
) -> tuple[Tensor, LossBreakdown]:
    """Forward the batch through the staged (or flat) objective.

    Returns the scalar loss tensor, ready for `backward`, and the breakdown
    with per-level means over the batch.
    """
    depth = mcfg.depth
    if any(s.depth != depth for s in batch):
        raise DataError(f"sample depth differs from model depth {depth}")
    weights = list(mcfg.loss_weights) + [1.0]
    n = len(batch)

    if mode == "flat":
        streams = [build_segment_stream(s, 1, "flat") for s in batch]
        big, offsets = concat_streams(streams)
        hidden = segment_forward(big, params, (0, mcfg.n_layers), mcfg)
        logits = head_logits(depth, hidden, params)
        sample_losses = []
        for off, s, st in zip(offsets, batch, streams):
            rows = st.loss_rows + off
            sample_losses.append(cross_entropy(gather_rows(logits, rows), st.loss_targets))
        total = scale(total_loss(sample_losses, [1.0] * n), 1.0 / n)
        # per-level diagnostics, off the tape
        level_nll_sums = np.zeros(depth)
        level_counts = np.zeros(depth, dtype=np.int64)
        for off, s, st in zip(offsets, batch, streams):
            nll = _nll_rows(logits.data[st.loss_rows + off], st.loss_targets)
            edges = np.cumsum([0] + [r.size for r in s.responses])
            for d in range(depth):
                level_nll_sums[d] += nll[edges[d]:edges[d + 1]].sum()
                level_counts[d] += edges[d + 1] - edges[d]
        per_level = [float(level_nll_sums[d] / level_counts[d]) for d in range(depth)]
        breakdown = LossBreakdown(
            per_level=per_level,
            weights=[1.0] * depth,
            tokens_per_level=[int(c) for c in level_counts],
            total=total.item(),
        )
        return total, breakdown

    if mode != "hier":
        raise UsageError(f"unknown training mode {mode!r}")

    per_sample_levels: list[list[Tensor]] = [[] for _ in batch]
    tokens_per_level = []
    latents: Tensor | None = None
    for d in range(1, depth + 1):
        streams = [build_segment_stream(s, d, "hier") for s in batch]
        big, offsets = concat_streams(streams)
        if d > 1:
            big = big.with_latents(latents.detach() if detach_segments else latents)
        hidden = segment_forward(big, params, mcfg.segment_ranges()[d - 1], mcfg)
        latents = hidden
        for i, (off, st) in enumerate(zip(offsets, streams)):
            per_sample_levels[i].append(
                level_loss(d, hidden, st.loss_rows + off, st.loss_targets, params)
            )
        tokens_per_level.append(int(sum(st.loss_targets.size for st in streams)))
    sample_totals = [total_loss(levels, weights) for levels in per_sample_levels]
    total = scale(total_loss(sample_totals, [1.0] * n), 1.0 / n)
    per_level = [
        float(np.mean([per_sample_levels[i][d].item() for i in range(n)]))
        for d in range(depth)
    ]
    breakdown = LossBreakdown(
        per_level=per_level,
        weights=weights,
        tokens_per_level=tokens_per_level,
        total=total.item(),
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, params: Parameters) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.named()},
            v={name: np.zeros_like(t.data) for name, t in params.named()},
        )


def adamw_update(
    params: Parameters,
    grads: dict[Tensor, np.ndarray],
    opt: OptimizerState,
    lr: float,
    tcfg: TrainConfig,
) -> tuple[Parameters, OptimizerState]:
    """One decoupled-weight-decay Adam step; functional, returns fresh state.

    Decay applies to matrices only (norm gains are 1-D). Parameters that got
    no gradient this step are carried over untouched.
    """
    t = opt.step + 1
    new_m, new_v = {}, {}
    new_tensors: dict[str, Tensor] = {}
    c1 = 1.0 - tcfg.beta1 ** t
    c2 = 1.0 - tcfg.beta2 ** t
    for name, p in params.named():
        g = grads.get(p)
        if g is None:
            new_m[name] = opt.m[name]
            new_v[name] = opt.v[name]
            new_tensors[name] = p
            continue
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name}")
        m = tcfg.beta1 * opt.m[name] + (1.0 - tcfg.beta1) * g
        v = tcfg.beta2 * opt.v[name] + (1.0 - tcfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + tcfg.adam_eps)
        data = p.data
        if tcfg.weight_decay and p.data.ndim > 1:
            data = data * (1.0 - lr * tcfg.weight_decay)
        new_m[name], new_v[name] = m, v
        new_tensors[name] = Tensor(data - lr * update, requires_grad=True)
    rebuilt = _rebuild(params, new_tensors)
    return rebuilt, OptimizerState(m=new_m, v=new_v, step=t)


def _rebuild(params: Parameters, tensors: dict[str, Tensor]) -> Parameters:
    layers = []
    for i in range(len(params.layers)):
        layers.append(LayerParams(**{
            f: tensors[f"layers.{i}.{f}"]
            for f in ("wq", "wk", "wv", "wo", "w_in", "w_out", "g_attn", "g_ffn")
        }))
    heads = [tensors[f"heads.{d}"] for d in range(len(params.heads))]
    return Parameters(embed=tensors["embed"], layers=layers, heads=heads)


# ---------------------------------------------------------------------------
# steps and the loop
# ---------------------------------------------------------------------------

def train_step(
    params: Parameters,
    batch: list[HierSample],
    opt: OptimizerState,
    tcfg: TrainConfig,
    mcfg: ModelConfig,
) -> tuple[Parameters, OptimizerState, LossBreakdown]:
    lr = cosine_schedule(opt.step, tcfg.total_steps, tcfg.lr, tcfg.warmup_frac)
    with Tape() as tape:
        loss, breakdown = hierarchical_loss(
            params, batch, mcfg, mode=tcfg.mode, detach_segments=tcfg.detach_segments
        )
    if not math.isfinite(breakdown.total):
        raise DivergenceError(
            f"non-finite loss at optimizer step {opt.step}: per-level {breakdown.per_level}"
        )
    grads = backward(tape, loss)
    params, opt = adamw_update(params, grads, opt, lr, tcfg)
    breakdown.lr = lr
    return params, opt, breakdown


def train_loop(
    params: Parameters,
    samples: list[HierSample],
    tcfg: TrainConfig,
    mcfg: ModelConfig,
    seed: int,
    on_step=None,
) -> tuple[Parameters, OptimizerState, list[LossBreakdown]]:
    """Shuffle-each-epoch minibatch loop for `total_steps` steps.

    `on_step(step, breakdown, params, opt, rng)` fires after every update
    with the post-update state, so callers can checkpoint mid-run (the rng
    is the live shuffle generator; snapshot its state, do not draw from it).
    Deterministic for a fixed seed, sample list, and configs.
    """
    if not samples:
        raise DataError("no training samples")
    opt = OptimizerState.create(params)
    rng = np.random.default_rng(seed)
    history: list[LossBreakdown] = []
    step = 0
    while step < tcfg.total_steps:
        order = rng.permutation(len(samples))
        for lo in range(0, len(order), tcfg.batch_size):
            if step >= tcfg.total_steps:
                break
            batch = [samples[i] for i in order[lo:lo + tcfg.batch_size]]
            params, opt, breakdown = train_step(params, batch, opt, tcfg, mcfg)
            history.append(breakdown)
            if on_step is not None:
                on_step(step, breakdown, params, opt, rng)
            step += 1
    return params, opt, history
