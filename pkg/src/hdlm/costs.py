"""Closed-form FLOPs accounting for flat and staged decoding.

All counts are exact integers at 2 FLOPs per multiply-accumulate.
Normalization, activations, and softmax exponentials are excluded here (the
instrumented counter tags them separately as aux work). Three modes:

* ``paper``: the asymptotic per-token-per-layer coefficient f = (8+4c)E^2
  only, with inference priced as a fresh forward pass over the whole prefix
  for every decoded token.
* ``exact``: keeps the quadratic attention term 4L^2 E and the 2LEV head
  term that ``paper`` drops.
* ``full``: ``exact`` plus the f-priced prefill work the per-token sums skip
  over: the query prefill for both variants and the staged model's carry of
  all existing rows into the second segment.

``infer_flops_cached`` is a separate closed form priced the way the real
cache-backed decoder works (prefill once, then one new row per step); it is
the formula the instrumented counter is checked against. The savings
formulas cover two-level schedules, matching the derivation they come from.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from . import counter
from .errors import ConfigError

MODES = ("paper", "exact", "full")


@dataclass(frozen=True)
class CostParams:
    """Symbol bag for the two-level formulas. k1 = 0 is accepted as the
    degenerate no-staging schedule (zero training savings)."""

    B: int
    L: int
    L1: int
    L2: int
    E: int
    V: int
    K: int
    k1: int
    c: int
    mode: str = "paper"

    def __post_init__(self):
        if self.mode == "asymptotic":
            object.__setattr__(self, "mode", "paper")
        if self.mode not in MODES:
            raise ConfigError(f"cost mode must be one of {MODES}, got {self.mode!r}")
        for name in ("B", "L", "L1", "L2", "E", "V", "K", "c"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.k1, int) or not 0 <= self.k1 < self.K:
            raise ConfigError(f"k1 must lie in [0, K), got k1={self.k1}, K={self.K}")


@dataclass
class CostReport:
    params: dict
    mode: str
    train_baseline: int
    train_hdlm: int
    train_savings: int
    train_reduction: float
    infer_baseline: int
    infer_hdlm: int
    infer_savings: int
    infer_reduction: float
    savings_second_diff_l2: int
    savings_second_diff_k1: int | None
    counter_measured: dict = field(default_factory=dict)
    counter_delta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# primitive costs
# ---------------------------------------------------------------------------

def coefficient(c: int, E: int) -> int:
    """Per-token per-layer matmul FLOPs: (8 + 4c) E^2."""
    return (8 + 4 * c) * E * E


def attn_flops(phase: str, B: int, L: int, E: int, t: int | None = None) -> int:
    """One attention layer: 8BLE^2 + 4BL^2E when training over L rows;
    4BE^2 + 4BE(L+t-1) for decoded token t at prompt length L."""
    if phase == "train":
        if t is not None:
            raise ConfigError("t applies to the infer phase only")
        return 8 * B * L * E * E + 4 * B * L * L * E
    if phase == "infer":
        if t is None:
            raise ConfigError("infer phase needs the token index t")
        return 4 * B * E * E + 4 * B * E * (L + t - 1)
    raise ConfigError(f"unknown phase {phase!r}")


def ffn_flops(phase: str, B: int, L: int, c: int, E: int, t: int | None = None) -> int:
    """Feed-forward: 4BcLE^2 over L rows; 4Bc(L+t-1)E^2 per decoded token."""
    if phase == "train":
        if t is not None:
            raise ConfigError("t applies to the infer phase only")
        return 4 * B * c * L * E * E
    if phase == "infer":
        if t is None:
            raise ConfigError("infer phase needs the token index t")
        return 4 * B * c * (L + t - 1) * E * E
    raise ConfigError(f"unknown phase {phase!r}")


def decode_head_flops(L: int, E: int, V: int) -> int:
    """Vocabulary projection over L rows: 2LEV."""
    return 2 * L * E * V


def _per_layer(p: CostParams, n: int, exact: bool) -> int:
    """Matmul FLOPs for one layer over n rows (per batch element)."""
    base = coefficient(p.c, p.E) * n
    return base + 4 * n * n * p.E if exact else base


def forward_flops(p: CostParams, L: int) -> int:
    """One forward pass over L rows through all K layers plus the head.

    Paper mode keeps only BL(8+4c)KE^2; exact and full add the quadratic
    attention and head terms.
    """
    if p.mode == "paper":
        return p.B * L * coefficient(p.c, p.E) * p.K
    return p.B * p.K * _per_layer(p, L, exact=True) + decode_head_flops(L, p.E, p.V) * p.B


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_flops(variant: str, p: CostParams) -> int:
    """One training step (forward plus two backward passes = 3x forward).

    The flat baseline runs every layer over the whole L + L1 + L2 sequence.
    The staged variant runs the first k1 layers without the level-2 rows, and
    in exact mode prices the heads at the scored rows only.
    """
    f = coefficient(p.c, p.E)
    lt = p.L + p.L1 + p.L2
    if variant == "baseline":
        if p.mode == "paper":
            return 3 * p.B * f * p.K * lt
        return 3 * forward_flops(p, lt)
    if variant == "hdlm":
        if p.mode == "paper":
            return 3 * p.B * f * (p.k1 * (p.L + p.L1) + (p.K - p.k1) * lt)
        seg1 = p.k1 * _per_layer(p, p.L + p.L1, exact=True)
        seg2 = (p.K - p.k1) * _per_layer(p, lt, exact=True)
        heads = decode_head_flops(p.L1 + p.L2, p.E, p.V)
        return 3 * p.B * (seg1 + seg2 + heads)
    raise ConfigError(f"unknown variant {variant!r}")


def train_savings(p: CostParams) -> int:
    return train_flops("baseline", p) - train_flops("hdlm", p)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _series(start: int, n: int) -> int:
    """sum_{j=1..n} (start + j - 1)."""
    return n * start + n * (n - 1) // 2


def _series_sq(start: int, n: int) -> int:
    """sum_{j=1..n} (start + j - 1)^2."""
    def cubes(m):  # sum of squares 1..m
        return m * (m + 1) * (2 * m + 1) // 6
    hi, lo = start + n - 1, start - 1
    return cubes(hi) - cubes(lo)


def _steps(p: CostParams, layers: int, start: int, n: int) -> int:
    """n decode steps where step j reruns `layers` layers over start+j-1 rows."""
    f = coefficient(p.c, p.E)
    total = p.B * f * layers * _series(start, n)
    if p.mode != "paper":
        total += p.B * layers * 4 * p.E * _series_sq(start, n)
        total += p.B * 2 * p.E * p.V * _series(start, n)
    return total


def infer_flops(variant: str, p: CostParams) -> int:
    """Autoregressive decoding cost, priced as a fresh forward pass over the
    prefix for every token (the convention the savings derivation uses).

    Full mode also charges the query prefill and, for the staged variant,
    the one-time carry of all L + L1 rows into the second segment.
    """
    f = coefficient(p.c, p.E)
    if variant == "baseline":
        total = _steps(p, p.K, p.L, p.L1 + p.L2)
        if p.mode == "full":
            total += p.B * f * p.K * p.L
        return total
    if variant == "hdlm":
        total = _steps(p, p.k1, p.L, p.L1)
        total += _steps(p, p.K - p.k1, p.L + p.L1, p.L2)
        if p.mode == "full":
            total += p.B * f * p.k1 * p.L
            total += p.B * f * (p.K - p.k1) * (p.L + p.L1)
        return total
    raise ConfigError(f"unknown variant {variant!r}")


def infer_savings(p: CostParams) -> int:
    return infer_flops("baseline", p) - infer_flops("hdlm", p)


def infer_savings_terms(p: CostParams) -> tuple[int, int]:
    """Paper-mode savings split into its two manifestly positive pieces:
    the late layers skipped while level 1 decodes, and the early layers
    skipped while level 2 decodes."""
    f = coefficient(p.c, p.E)
    skipped_late = p.B * f * (p.K - p.k1) * _series(p.L, p.L1)
    skipped_early = p.B * f * p.k1 * _series(p.L + p.L1, p.L2)
    return skipped_late, skipped_early


def infer_flops_cached(variant: str, p: CostParams) -> int:
    """Matmul FLOPs of the actual cache-backed decoder.

    Prefill runs each segment's layers once over the existing rows; every
    decode step then projects one new row, attends over the cache (which
    already holds the new row), and applies the head to one row.
    """
    f = coefficient(p.c, p.E)

    def block(rows):
        return f * rows + 4 * rows * rows * p.E

    def steps(layers, ctx0, n):
        # step j: ctx0 + j rows in cache, one new projected row, one head row
        return layers * (f * n + 4 * p.E * _series(ctx0 + 1, n)) + n * 2 * p.E * p.V

    if variant == "baseline":
        total = p.K * block(p.L) + steps(p.K, p.L, p.L1 + p.L2)
    elif variant == "hdlm":
        total = p.k1 * block(p.L) + steps(p.k1, p.L, p.L1)
        carried = p.L + p.L1
        total += (p.K - p.k1) * block(carried) + steps(p.K - p.k1, carried, p.L2)
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    return p.B * total


# ---------------------------------------------------------------------------
# instrumentation and the assembled report
# ---------------------------------------------------------------------------

def count_ops_instrumented(fn, *args, **kwargs) -> tuple[object, counter.OpCounter]:
    """Run fn under a fresh operation counter; returns (result, counter)."""
    with counter.count_ops() as ops:
        result = fn(*args, **kwargs)
    return result, ops


def _second_diff(values: list[int]) -> int:
    return values[2] - 2 * values[1] + values[0]


def savings_report(p: CostParams, measured: dict | None = None) -> CostReport:
    """Baseline-vs-staged totals, reductions, and linearity diagnostics.

    The second differences probe the savings along L2 and k1 sweeps; in
    paper mode both are exactly zero (the savings are affine in each).
    `measured` maps any of the four closed-form keys to instrumented counts,
    and the report carries their relative deltas.
    """
    tb, th = train_flops("baseline", p), train_flops("hdlm", p)
    ib, ih = infer_flops("baseline", p), infer_flops("hdlm", p)

    l2_vals = [train_savings(replace(p, L2=p.L2 + d)) for d in (0, 1, 2)]
    sd_k1 = None
    if p.K >= 4:
        s = min(max(p.k1 - 1, 1), p.K - 3)
        sd_k1 = _second_diff([train_savings(replace(p, k1=k)) for k in (s, s + 1, s + 2)])

    closed = {"train_baseline": tb, "train_hdlm": th,
              "infer_baseline": ib, "infer_hdlm": ih}
    deltas = {}
    for key, got in (measured or {}).items():
        if key not in closed:
            raise ConfigError(f"unknown measured key {key!r}")
        deltas[key] = (got - closed[key]) / closed[key]

    return CostReport(
        params={k: v for k, v in asdict(p).items() if k != "mode"},
        mode=p.mode,
        train_baseline=tb, train_hdlm=th, train_savings=tb - th,
        train_reduction=(tb - th) / tb,
        infer_baseline=ib, infer_hdlm=ih, infer_savings=ib - ih,
        infer_reduction=(ib - ih) / ib,
        savings_second_diff_l2=_second_diff(l2_vals),
        savings_second_diff_k1=sd_k1,
        counter_measured=dict(measured or {}),
        counter_delta=deltas,
    )
