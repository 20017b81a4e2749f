"""Grids, path containers, seeded random streams and the discrete L2 geometry.

Every path type may carry leading batch axes: a batch of ``B`` samples is a
stack along axis 0, so ``NoisePath.increments`` has shape ``(N, m)`` for one
sample and ``(B, N, m)`` for a batch.  Controls may likewise be stacked as
``(R, N, p)`` to advance ``R`` independent training runs in lockstep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "TemporalGrid",
    "ControlPath",
    "NoisePath",
    "StatePath",
    "AdjointPath",
    "DataSample",
    "make_grid",
    "make_rng",
    "inner_product",
    "l2_norm",
    "sample_noise",
]


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TemporalGrid:
    """Uniform partition of ``[0, T]`` into ``N`` steps."""

    T: float
    N: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise ValueError(f"terminal time must be positive, got T={self.T!r}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"number of steps must be an integer >= 1, got N={self.N!r}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "N", int(self.N))

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.h
        t[-1] = self.T
        return t


@dataclass(frozen=True)
class ControlPath:
    """Piecewise-constant control; row ``n`` acts on ``[t_n, t_{n+1})``."""

    grid: TemporalGrid
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim < 2 or v.shape[-2] != self.grid.N:
            raise ValueError(f"control must have shape (..., {self.grid.N}, p), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("control contains non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def p(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def zeros(cls, grid: TemporalGrid, p: int) -> "ControlPath":
        return cls(grid, np.zeros((grid.N, p)))

    def with_values(self, values) -> "ControlPath":
        return ControlPath(self.grid, values)


@dataclass(frozen=True)
class NoisePath:
    """Brownian increments ``w_n ~ N(0, h I_m)`` with their seed provenance."""

    grid: TemporalGrid
    increments: np.ndarray
    seed: int | None = None
    stream: tuple = ()

    def __post_init__(self):
        w = _frozen(self.increments)
        if w.ndim < 2 or w.shape[-2] != self.grid.N:
            raise ValueError(f"increments must have shape (..., {self.grid.N}, m), got {w.shape}")
        object.__setattr__(self, "increments", w)

    @property
    def m(self) -> int:
        return self.increments.shape[-1]


@dataclass(frozen=True)
class StatePath:
    states: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states))


@dataclass(frozen=True)
class AdjointPath:
    """Sample-wise adjoint pair: ``y`` is ``(..., N+1, d)``, ``z`` is ``(..., N, d, m)``."""

    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen(self.y))
        object.__setattr__(self, "z", _frozen(self.z))


@dataclass(frozen=True)
class DataSample:
    input: np.ndarray = field(default_factory=lambda: np.zeros(0))
    target: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        x, y = _frozen(self.input), _frozen(self.target)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("data sample contains non-finite entries")
        object.__setattr__(self, "input", x)
        object.__setattr__(self, "target", y)

    def __len__(self):
        return self.input.shape[0] if self.input.ndim > 1 else 1

    def __getitem__(self, idx) -> "DataSample":
        return DataSample(self.input[idx], self.target[idx])


def make_grid(T: float, N: int) -> TemporalGrid:
    return TemporalGrid(T, N)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent Philox stream keyed by ``(seed, *stream)``.

    Gaussian draws go through numpy's ziggurat sampler.  Distinct stream
    tuples give statistically independent sequences; the same tuple always
    reproduces the same sequence on a given build.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(s) for s in stream]
    if any(s < 0 for s in key):
        raise ValueError(f"seed and stream ids must be non-negative, got {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _check_pair(u: ControlPath, v: ControlPath):
    if u.grid != v.grid:
        raise ValueError(f"controls live on different grids: {u.grid} vs {v.grid}")
    if u.values.shape[-2:] != v.values.shape[-2:]:
        raise ValueError(f"control shapes differ: {u.values.shape} vs {v.values.shape}")


def inner_product(u: ControlPath, v: ControlPath):
    """``h * sum_n u_n . v_n``; batched over any leading axes."""
    _check_pair(u, v)
    return u.grid.h * np.sum(u.values * v.values, axis=(-2, -1))


def l2_norm(u: ControlPath):
    """``sqrt(<u, u>)``, computed without underflow or overflow."""
    return path_norm(u.values, u.grid.h)


def path_norm(values: np.ndarray, h: float):
    """Discrete L2 norm of a raw ``(..., N, p)`` array.

    Entries are scaled by the largest magnitude first, so tiny or huge
    paths neither underflow nor overflow; ``inf`` entries give ``inf``.
    """
    values = np.asarray(values, dtype=float)
    scale = np.max(np.abs(values), axis=(-2, -1), keepdims=True)
    safe = np.where((scale > 0) & np.isfinite(scale), scale, 1.0)
    with np.errstate(over="ignore"):
        norm = safe[..., 0, 0] * np.sqrt(h * np.sum(np.square(values / safe), axis=(-2, -1)))
    return np.where(np.isposinf(scale[..., 0, 0]), np.inf, norm)


def sample_noise(
    grid: TemporalGrid, m: int, seed: int, stream: int | Sequence[int] = 0, size: int | None = None
) -> NoisePath:
    """Draw ``N x m`` (or ``size x N x m``) independent ``N(0, h)`` increments."""
    if int(m) != m or m < 1:
        raise ValueError(f"noise dimension must be >= 1, got m={m!r}")
    stream = (stream,) if np.isscalar(stream) else tuple(stream)
    rng = make_rng(seed, *stream)
    shape = (grid.N, int(m)) if size is None else (int(size), grid.N, int(m))
    w = rng.standard_normal(shape) * np.sqrt(grid.h)
    return NoisePath(grid, w, seed=int(seed), stream=stream)
