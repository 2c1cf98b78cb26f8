"""Dense 64-bit tensors with tape-based reverse-mode differentiation.

Every differentiable computation in the package is built from the ops in this
file. Ground rules: float64 only, row-major storage, shapes checked strictly
(no broadcasting beyond what the model needs), and gradients produced by
replaying an explicit tape in reverse record order, so repeated runs are
bitwise identical.

A `Tape` is installed with `with Tape() as tape:`; ops executed inside the
block record themselves when any input requires gradients. `backward(tape,
loss)` then returns a gradient map keyed by the participating tensors. Tapes
are per-thread and single-owner: parallel evaluation of independent samples
is fine as long as each thread opens its own tape.
"""

from __future__ import annotations

import math
import threading
from collections.abc import Callable, Sequence

import numpy as np

from . import counter
from .errors import ShapeError, UsageError

_STACK = threading.local()


class Tensor:
    """A float64 ndarray plus a flag marking it as a gradient target."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, severed from any tape (used to cut segment boundaries)."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Ordered record of executed ops, replayed in reverse by `backward`."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._records.append((out, inputs, backward_fn))

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        if popped is not self:
            raise UsageError("tape stack corrupted: tapes must nest")

    def __len__(self) -> int:
        return len(self._records)


def _tape_stack() -> list[Tape]:
    if not hasattr(_STACK, "tapes"):
        _STACK.tapes = []
    return _STACK.tapes


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None:
        tape._produced.add(id(out))
        if out.requires_grad:
            tape._record(out, inputs, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-replay `tape` from `loss`; returns {tensor: gradient array}.

    Tensors that did not influence the loss are simply absent from the map
    (their gradient is zero). Accumulation order is the fixed reverse record
    order, so results are bitwise reproducible.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise UsageError("loss was not produced under this tape")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.get(out)
        if g is None:
            continue
        contribs = backward_fn(g)
        for inp, contrib in zip(inputs, contribs):
            if contrib is None or not inp.requires_grad:
                continue
            held = grads.get(inp)
            if held is None:
                # copy: a backward fn may hand the same array to two inputs
                grads[inp] = np.array(contrib)
            else:
                held += contrib
    return grads


# -- ops ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a [m,k] @ b [k,n] -> [m,n]. Strictly 2-D."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    tag = counter.current_tag()
    out = counter.mm(a.data, b.data, tag)

    def bwd(g):
        ga = counter.mm(g, b.data.T, tag) if a.requires_grad else None
        gb = counter.mm(a.data.T, g, tag) if b.requires_grad else None
        return ga, gb

    return _emit(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors (covers scalars, shape ())."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs 2-D, got {a.shape}")
    return _emit(a.data.T, (a,), lambda g: (g.T,))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """x [n,*] indexed by int rows idx [r] -> [r,*]. Backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs 1-D indices, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise UsageError(f"gather_rows index out of range for {x.shape[0]} rows")

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(x.data[idx], (x,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows of nothing")
    cols = {p.shape[1:] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows column mismatch: {sorted(cols)}")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] of {x.shape}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _emit(x.data[:, start:stop], (x,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts or any(p.ndim != 2 for p in parts):
        raise ShapeError("concat_cols needs 2-D tensors")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols row mismatch: {sorted(rows)}")
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise RMS normalization of x [T,E], scaled by gain [E]."""
    if x.ndim != 2 or gain.shape != (x.shape[1],):
        raise ShapeError(f"rms_norm shapes {x.shape}, gain {gain.shape}")
    xd = x.data
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=1) + eps)  # [T]
    xn = xd * inv[:, None]
    counter.add_aux("rms_norm", x.size)

    def bwd(g):
        g_gain = np.sum(g * xn, axis=0) if gain.requires_grad else None
        if x.requires_grad:
            gxn = g * gain.data
            dot = np.sum(gxn * xd, axis=1)  # [T]
            gx = gxn * inv[:, None] - xd * (inv ** 3 * dot / x.shape[1])[:, None]
        else:
            gx = None
        return gx, g_gain

    return _emit(xn * gain.data, (x, gain), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU, elementwise."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(u)
    counter.add_aux("gelu", x.size)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _emit(0.5 * xd * (1.0 + t), (x,), bwd)


def rope_rotate(x: Tensor, positions: np.ndarray, head_dim: int, base: float = 10000.0) -> Tensor:
    """Rotary position twist of x [T,E] at absolute `positions` [T].

    Columns are consumed in within-head (even, odd) pairs; `head_dim` must be
    even and divide E. The backward pass is the inverse rotation.
    """
    if x.ndim != 2 or head_dim <= 0 or head_dim % 2 or x.shape[1] % head_dim:
        raise ShapeError(f"rope_rotate x {x.shape}, head_dim {head_dim}")
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (x.shape[0],):
        raise ShapeError(f"rope_rotate positions {positions.shape} for {x.shape[0]} rows")
    half = head_dim // 2
    n_heads = x.shape[1] // head_dim
    theta = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)  # [half]
    angles = positions[:, None].astype(np.float64) * theta[None, :]  # [T, half]
    cos = np.tile(np.cos(angles), (1, n_heads))  # [T, E/2]
    sin = np.tile(np.sin(angles), (1, n_heads))
    xe, xo = x.data[:, 0::2], x.data[:, 1::2]
    out = np.empty_like(x.data)
    out[:, 0::2] = xe * cos - xo * sin
    out[:, 1::2] = xe * sin + xo * cos
    counter.add_aux("rope", x.size)

    def bwd(g):
        ge, go = g[:, 0::2], g[:, 1::2]
        gx = np.empty_like(g)
        gx[:, 0::2] = ge * cos + go * sin
        gx[:, 1::2] = -ge * sin + go * cos
        return (gx,)

    return _emit(out, (x,), bwd)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax of x [T,S]; boolean `mask` marks the allowed entries.

    Masked entries come out exactly 0.0 and contribute nothing to the row
    maximum, the normalizer, or the gradient.
    """
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs 2-D, got {x.shape}")
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xd.shape:
            raise ShapeError(f"softmax mask {mask.shape} vs x {xd.shape}")
        if not mask.any(axis=1).all():
            raise UsageError("softmax_rows: a row has every entry masked")
        xs = np.where(mask, xd, -np.inf)
        m = np.max(xs, axis=1, keepdims=True)
        e = np.exp(xs - m)
    else:
        m = np.max(xd, axis=1, keepdims=True)
        e = np.exp(xd - m)
    out = e / np.sum(e, axis=1, keepdims=True)
    counter.add_aux("softmax_exp", int(mask.sum()) if mask is not None else x.size)

    def bwd(g):
        dot = np.sum(g * out, axis=1, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (x,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, active: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over the active rows of logits [T,V].

    targets [T] holds the class index per row; `active` (bool [T], default
    all) selects which rows enter the mean. Returns a scalar tensor.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs 2-D logits, got {logits.shape}")
    T, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (T,):
        raise ShapeError(f"cross_entropy targets {targets.shape} for {T} rows")
    if active is None:
        active = np.ones(T, dtype=bool)
    else:
        active = np.asarray(active, dtype=bool)
        if active.shape != (T,):
            raise ShapeError(f"cross_entropy active {active.shape} for {T} rows")
    n_active = int(active.sum())
    if n_active == 0:
        raise UsageError("cross_entropy: no active rows")
    if targets[active].size and (targets[active].min() < 0 or targets[active].max() >= V):
        raise UsageError(f"cross_entropy: target id outside [0, {V})")
    xd = logits.data
    m = np.max(xd, axis=1, keepdims=True)
    e = np.exp(xd - m)
    z = np.sum(e, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])  # [T]
    nll = lse - xd[np.arange(T), targets]
    counter.add_aux("softmax_exp", logits.size)
    loss = np.float64(np.sum(nll[active]) / n_active)

    def bwd(g):
        gl = e / z
        gl[np.arange(T), targets] -= 1.0
        gl *= (active[:, None] * (float(g) / n_active))
        return (gl,)

    return _emit(np.asarray(loss), (logits,), bwd)


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    return _emit(np.asarray(np.sum(x.data)), (x,), lambda g: (np.full_like(x.data, float(g)),))


# -- finite-difference checking ------------------------------------------------

def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max |analytic - central difference| error over input coordinates.

    `fn(*inputs)` must return a scalar tensor. Checks every coordinate of
    every requires_grad input, or `max_coords` randomly chosen ones per input
    when set. The error is relative with an absolute floor of 1: |a - n| /
    max(1, |a|, |n|), so near-zero gradients are compared absolutely.
    """
    with Tape() as tape:
        loss = fn(*inputs)
    grads = backward(tape, loss)
    worst = 0.0
    for inp in inputs:
        if not inp.requires_grad:
            continue
        analytic = grads.get(inp)
        if analytic is None:
            analytic = np.zeros_like(inp.data)
        flat = inp.data.reshape(-1)
        n_coords = flat.size
        if max_coords is not None and max_coords < n_coords:
            if rng is None:
                raise UsageError("grad_check: max_coords needs an rng")
            coords = rng.choice(n_coords, size=max_coords, replace=False)
        else:
            coords = range(n_coords)
        aflat = analytic.reshape(-1)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + eps
            f_plus = fn(*inputs).item()
            flat[c] = keep - eps
            f_minus = fn(*inputs).item()
            flat[c] = keep
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[c] - numeric) / max(1.0, abs(aflat[c]), abs(numeric))
            if err > worst:
                worst = err
    return worst
