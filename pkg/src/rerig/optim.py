"""Flat parameter vectors, Adam updates, and a finite-difference gradient gate.

Every learned component in this package stores its weights as named segments
of one flat float array (ParamVector).  The optimizer and the checkpoint
format both operate on that flat view; actual tensor shapes live with the
model that owns the segment.

grad_check is the correctness authority for gradients: any differentiable
operation must agree with central differences at 64-bit before it is trusted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ParamVector",
    "AdamState",
    "GradCheckReport",
    "init_adam",
    "adam_step",
    "exponential_lr",
    "grad_check",
]


@dataclass(frozen=True)
class ParamVector:
    """Named, disjoint segments over one flat 1-D array of reals."""

    values: np.ndarray
    segments: tuple[tuple[str, int, int], ...]  # (name, offset, length)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64) \
            if not isinstance(self.values, np.ndarray) else self.values
        if values.ndim != 1:
            raise ValueError("ParamVector values must be 1-D")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "segments", tuple(self.segments))
        cursor = 0
        seen = set()
        for name, offset, length in self.segments:
            if name in seen:
                raise ValueError(f"duplicate segment name {name!r}")
            seen.add(name)
            if offset != cursor or length < 0:
                raise ValueError("segments must be disjoint and covering, in order")
            cursor += length
        if cursor != values.size:
            raise ValueError(
                f"segments cover {cursor} values, array has {values.size}")

    @classmethod
    def from_arrays(cls, named: Sequence[tuple[str, np.ndarray]],
                    dtype=np.float64) -> "ParamVector":
        """Flatten (name, array) pairs, preserving order."""
        parts, segments, offset = [], [], 0
        for name, arr in named:
            flat = np.asarray(arr, dtype=dtype).reshape(-1)
            parts.append(flat)
            segments.append((name, offset, flat.size))
            offset += flat.size
        values = np.concatenate(parts) if parts else np.zeros(0, dtype=dtype)
        return cls(values, tuple(segments))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _, _ in self.segments)

    def segment(self, name: str) -> np.ndarray:
        for seg_name, offset, length in self.segments:
            if seg_name == name:
                return self.values[offset:offset + length]
        raise KeyError(name)

    def name_at(self, index: int) -> str:
        """Segment owning flat coordinate `index`."""
        for name, offset, length in self.segments:
            if offset <= index < offset + length:
                return name
        raise IndexError(index)

    def require_finite(self, label: str = "value") -> None:
        """Raise if any entry is NaN or infinite, naming the segment."""
        finite = np.isfinite(self.values)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise ValueError(
                f"non-finite {label} in segment {self.name_at(bad)!r}")

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values), self.segments)

    @property
    def size(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    k: int
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15  # small eps works better for sparse hash-grid updates

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("step count must be non-negative")
        if self.m.shape != self.v.shape:
            raise ValueError("moment shapes differ")
        if np.any(self.v < 0):
            raise ValueError("second moment must be non-negative")


def init_adam(params: ParamVector, lr: float = 1e-2, beta1: float = 0.9,
              beta2: float = 0.99, eps: float = 1e-15) -> AdamState:
    zeros = np.zeros_like(params.values)
    return AdamState(zeros, zeros.copy(), 0, lr, beta1, beta2, eps)


def exponential_lr(lr0: float, decay: float, step: int) -> float:
    """Constant (decay=1) or exponentially decayed learning rate."""
    return lr0 * decay ** step


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState,
              lr: float | None = None) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update. Functional: inputs are not mutated."""
    if params.segments != grads.segments:
        raise ValueError("params and grads have different segment layouts")
    grads.require_finite("gradient")
    g = grads.values
    if lr is None:
        lr = state.lr
    k = state.k + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1 ** k)
    v_hat = v / (1 - state.beta2 ** k)
    new_values = params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, k, state.lr, state.beta1, state.beta2, state.eps)
    return params.with_values(new_values), new_state


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_segment: str
    worst_index: int
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < 1e-4


LossFn = Callable[[ParamVector], tuple[float, ParamVector]]


def grad_check(loss_fn: LossFn, params: ParamVector, eps: float = 1e-3,
               samples: int = 64, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    loss_fn maps a ParamVector to (scalar loss, analytic gradient).  It must
    be deterministic: two evaluations at the same point are required to return
    the identical loss, otherwise finite differences are meaningless and a
    ValueError is raised.  `samples` coordinates are drawn without replacement
    (all of them if the vector is smaller).  Relative error uses the usual
    symmetric denominator max(|analytic|, |numeric|, 1e-8).
    """
    loss_a, grads = loss_fn(params)
    loss_b, _ = loss_fn(params)
    if loss_a != loss_b:
        raise ValueError(
            f"loss_fn is nondeterministic: {loss_a!r} != {loss_b!r}")
    if params.size == 0:
        return GradCheckReport(0.0, "", -1, 0)

    rng = np.random.default_rng(seed)
    n = min(samples, params.size)
    coords = rng.choice(params.size, size=n, replace=False)

    worst_err, worst_idx = -1.0, int(coords[0])
    base = params.values
    for i in coords:
        i = int(i)
        step = np.zeros_like(base)
        step[i] = eps
        lo, _ = loss_fn(params.with_values(base - step))
        hi, _ = loss_fn(params.with_values(base + step))
        numeric = (hi - lo) / (2 * eps)
        analytic = float(grads.values[i])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        err = abs(analytic - numeric) / denom
        if err > worst_err:
            worst_err, worst_idx = err, i
    if not math.isfinite(worst_err):
        raise ValueError("non-finite error during gradient check")
    return GradCheckReport(worst_err, params.name_at(worst_idx), worst_idx, n)
