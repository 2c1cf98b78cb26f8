"""Measured operation counts for cross-checking the closed-form cost model.

An `OpCounter` installed via `count_ops()` collects three things from code
that runs under it:

* multiply-accumulate counts of every matrix product the numerics layer
  executes (forward ops and their tape-replayed backward closures), bucketed
  by a caller-chosen tag;
* auxiliary elementwise tallies (normalization, activations, softmax
  exponentials, rotary twiddles) kept out of the MAC total, since the closed
  forms exclude them by convention;
* layer-application events (which layer ran over how many rows), used to
  verify per-token layer traversal counts during staged decoding.

Counters are per-thread; instrumented runs should be single-threaded.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

FLOPS_PER_MAC = 2

_STATE = threading.local()


@dataclass
class LayerEvent:
    phase: str
    layer: int
    rows: int


@dataclass
class OpCounter:
    macs: dict[str, int] = field(default_factory=dict)
    aux: dict[str, int] = field(default_factory=dict)
    layer_events: list[LayerEvent] = field(default_factory=list)

    def add_macs(self, n: int, tag: str) -> None:
        self.macs[tag] = self.macs.get(tag, 0) + int(n)

    def add_aux(self, name: str, n: int) -> None:
        self.aux[name] = self.aux.get(name, 0) + int(n)

    def total_flops(self) -> int:
        """Total counted FLOPs over all MAC buckets (aux tallies excluded)."""
        return FLOPS_PER_MAC * sum(self.macs.values())

    def flops(self, tag: str) -> int:
        return FLOPS_PER_MAC * self.macs.get(tag, 0)


def _stack() -> list:
    if not hasattr(_STATE, "counters"):
        _STATE.counters = []
    return _STATE.counters


def active() -> OpCounter | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def count_ops():
    """Install a fresh counter for the duration of the block and yield it."""
    c = OpCounter()
    _stack().append(c)
    try:
        yield c
    finally:
        _stack().pop()


# -- tag and phase contexts --------------------------------------------------

def current_tag() -> str:
    return getattr(_STATE, "tag", "other")


@contextmanager
def tag_region(tag: str):
    """Bucket matrix products recorded inside the block under `tag`."""
    prev = current_tag()
    _STATE.tag = tag
    try:
        yield
    finally:
        _STATE.tag = prev


def current_phase() -> str:
    return getattr(_STATE, "phase", "")


@contextmanager
def phase_region(phase: str):
    """Label layer events recorded inside the block with `phase`."""
    prev = current_phase()
    _STATE.phase = phase
    try:
        yield
    finally:
        _STATE.phase = prev


def record_layer(layer: int, rows: int) -> None:
    c = active()
    if c is not None:
        c.layer_events.append(LayerEvent(current_phase(), layer, rows))


# -- counted primitives ------------------------------------------------------

def mm(a: np.ndarray, b: np.ndarray, tag: str | None = None) -> np.ndarray:
    """np.matmul with MAC accounting. a is 1-D or 2-D, b is 1-D or 2-D."""
    c = active()
    if c is not None:
        m = a.shape[0] if a.ndim == 2 else 1
        k = a.shape[-1]
        n = b.shape[-1] if b.ndim == 2 else 1
        c.add_macs(m * k * n, tag if tag is not None else current_tag())
    return np.matmul(a, b)


def add_aux(name: str, n: int) -> None:
    c = active()
    if c is not None:
        c.add_aux(name, n)
