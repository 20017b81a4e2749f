"""Projected SGD on piecewise-constant controls.

Iteration ``k`` of a run with seed ``s`` draws its noise and data from the
stream ``(s, k // ITER_BLOCK)`` at a fixed offset, so a run is reproducible
and independent of how often diagnostics are taken.  Several runs with
different seeds can be advanced in lockstep (:func:`run_sgd_repeats`); each
one follows the iterates it would follow alone, up to the summation order
of the batch mean.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ControlPath, TemporalGrid, make_rng, path_norm
from .io import atomic_writer
from .problems import ProblemSpec, default_bounds
from .solver import SCHEMES, DivergenceError, GradientPath, _backward, _cost, _forward, _gradient, estimate_full_gradient

__all__ = [
    "Constant",
    "Harmonic",
    "lr",
    "BoxBounds",
    "SgdConfig",
    "TraceRecord",
    "TrainingTrace",
    "TrainingDiverged",
    "RepeatResult",
    "project",
    "sgd_step",
    "run_sgd",
    "run_sgd_repeats",
    "save_control",
    "load_control",
    "CHECKPOINT_HEADER",
]

ITER_BLOCK = 64
CHECKPOINT_HEADER = "SNNBP-CTRL v1"
_STREAM_SGD = 4101


@dataclass(frozen=True)
class Constant:
    eta: float

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"learning rate must be positive, got {self.eta!r}")


@dataclass(frozen=True)
class Harmonic:
    """``eta_k = theta / (k + M)``: divergent sum, summable squares."""

    theta: float = 2.0
    M: float = 3.0

    def __post_init__(self):
        if not (self.theta > 0 and self.M > 0):
            raise ValueError(f"theta and M must be positive, got theta={self.theta!r}, M={self.M!r}")


def lr(schedule, k: int) -> float:
    if k < 0:
        raise ValueError("iteration index must be >= 0")
    if isinstance(schedule, Constant):
        return float(schedule.eta)
    if isinstance(schedule, Harmonic):
        return schedule.theta / (k + schedule.M)
    raise TypeError(f"unknown schedule {schedule!r}")


def _lr_array(schedule, k0: int, k1: int) -> np.ndarray:
    return np.array([lr(schedule, k) for k in range(k0, k1)])


@dataclass(frozen=True)
class BoxBounds:
    lower: np.ndarray | float = -np.inf
    upper: np.ndarray | float = np.inf

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise ValueError("box bounds need lower <= upper in every coordinate")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def for_problem(cls, spec: ProblemSpec) -> "BoxBounds":
        return cls(*default_bounds(spec))

    def contains(self, values) -> bool:
        return bool(np.all(values >= self.lower) and np.all(values <= self.upper))


@dataclass(frozen=True)
class SgdConfig:
    """``K = 0`` is allowed and returns ``u0`` with a single trace record."""

    K: int = 1000
    B: int = 1
    schedule: Constant | Harmonic = field(default_factory=Harmonic)
    bounds: BoxBounds | None = None
    seed: int = 0
    diagnostics_every: int = 0
    oracle_M: int = 0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 0:
            raise ValueError(f"K must be a non-negative integer, got {self.K!r}")
        if int(self.B) != self.B or self.B < 1:
            raise ValueError(f"B must be an integer >= 1, got {self.B!r}")
        if self.diagnostics_every < 0 or self.oracle_M < 0:
            raise ValueError("diagnostics_every and oracle_M must be >= 0")
        if not isinstance(self.schedule, (Constant, Harmonic)):
            raise TypeError(f"unknown schedule {self.schedule!r}")


@dataclass
class TraceRecord:
    """Diagnostics at iteration ``k``, taken before the ``k``-th step.

    ``cost`` is the mean sampled training cost over the iterations since the
    previous checkpoint (NaN at ``k = 0``).
    """

    k: int
    eta: float
    cost: float
    control_norm: float
    grad_norm: float = math.nan
    grad_norm_stderr: float = math.nan
    ref_distance: float = math.nan


@dataclass
class TrainingTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path):
        names = list(TraceRecord.__dataclass_fields__)
        with atomic_writer(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for rec in self.records:
                w.writerow([_fmt(getattr(rec, n)) for n in names])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


class TrainingDiverged(RuntimeError):
    def __init__(self, k: int, control: ControlPath, trace: TrainingTrace):
        super().__init__(f"training diverged at iteration {k}")
        self.k, self.control, self.trace = k, control, trace


@dataclass
class RepeatResult:
    """Output of :func:`run_sgd_repeats`; ``diverged[r] = -1`` means repeat ``r`` finished."""

    controls: np.ndarray
    traces: list
    diverged: np.ndarray
    snapshots: dict


def project(u: ControlPath, bounds: BoxBounds) -> ControlPath:
    return u.with_values(np.clip(u.values, bounds.lower, bounds.upper))


def sgd_step(u: ControlPath, grad: GradientPath, eta: float, bounds: BoxBounds) -> ControlPath:
    if not eta > 0:
        raise ValueError(f"step size must be positive, got {eta!r}")
    if grad.values.shape != u.values.shape:
        raise ValueError(f"gradient shape {grad.values.shape} != control shape {u.values.shape}")
    finite = np.isfinite(grad.values)
    if not np.all(finite):
        raise DivergenceError("gradient", int(np.argmax(~finite.all(axis=-1))))
    return project(u.with_values(u.values - eta * grad.values), bounds)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def draw_block(spec: ProblemSpec, grid: TemporalGrid, seed: int, block: int, B: int):
    """Noise ``(ITER_BLOCK, B, N, m)`` then data ``(ITER_BLOCK, B, ...)`` for one block."""
    rng = make_rng(seed, _STREAM_SGD, block)
    w = rng.standard_normal((ITER_BLOCK, B, grid.N, spec.m)) * np.sqrt(grid.h)
    data = spec.sample_data(rng, (ITER_BLOCK, B))
    return w, data.input, data.target


@dataclass(frozen=True)
class _RawData:
    """Unvalidated data view for the hot loop."""

    input: np.ndarray
    target: np.ndarray


class _GenericEngine:
    """Numpy iteration over all active repeats at once."""

    def __init__(self, spec, grid, scheme, bounds):
        self.spec, self.grid, self.scheme = spec, grid, scheme
        self.lo, self.hi = bounds.lower, bounds.upper

    def run(self, uv, blocks, i0, etas, active):
        """Apply ``len(etas)`` steps in place; returns costs ``(R, n)`` and first bad step per repeat.

        ``blocks[r]`` holds repeat ``r``'s draws for the current block and
        the segment starts at offset ``i0`` within it.
        """
        spec, grid = self.spec, self.grid
        costs = np.zeros((uv.shape[0], len(etas)))
        bad_at = np.full(uv.shape[0], -1)
        idx = np.flatnonzero(active)
        for i, eta in enumerate(etas):
            if idx.size == 0:
                break
            u = uv[idx][:, None]
            w = np.stack([blocks[r][0][i0 + i] for r in idx])
            data = _RawData(*(np.stack([blocks[r][j][i0 + i] for r in idx]) for j in (1, 2)))
            with np.errstate(all="ignore"):
                X = _forward(spec, u, w, spec.initial_state(data), grid, check=False)
                Y = _backward(spec, u, X, data.target, grid, self.scheme, check=False)
                G = _gradient(spec, u, X, Y, w, grid, self.scheme).mean(axis=1)
                c = _cost(spec, u, X, data.target, grid).mean(axis=1)
            ok = np.all(np.isfinite(G), axis=(-2, -1)) & np.isfinite(c)
            bad_at[idx[~ok]] = i
            keep = idx[ok]
            uv[keep] = np.clip(uv[keep] - eta * G[ok], self.lo, self.hi)
            costs[keep, i] = c[ok]
            idx = keep
        return costs, bad_at


def _fast_engine(spec, grid, scheme, bounds):
    kind = spec.meta.get("kind")
    if scheme != "discrete" or kind not in ("lq", "snn"):
        return None
    if kind == "snn" and spec.meta["arch"].activation != "sigmoid":
        return None
    from ._kernels import LqEngine, SnnEngine

    return (LqEngine if kind == "lq" else SnnEngine)(spec, grid, bounds)


def run_sgd_repeats(
    spec: ProblemSpec,
    u0: ControlPath,
    config: SgdConfig,
    seeds,
    reference: ControlPath | None = None,
    scheme: str = "discrete",
    fast: bool | None = None,
    snapshots=(),
) -> RepeatResult:
    """Advance one projected-SGD run per seed in lockstep.

    ``u0.values`` is ``(N, p)`` (shared start) or ``(R, N, p)``.  Controls at
    the iterations listed in ``snapshots`` are returned as ``(R, N, p)``
    arrays; they equal the final controls of shorter runs with the same
    seeds.  A diverged repeat is frozen at its last finite iterate, flagged,
    and gets no further trace records.  ``fast=None`` picks the compiled SNN
    engine whenever it applies.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if u0.p != spec.p:
        raise ValueError(f"control has p={u0.p}, problem expects p={spec.p}")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    R, grid, K = len(seeds), u0.grid, config.K
    bounds = config.bounds if config.bounds is not None else BoxBounds.for_problem(spec)
    uv = np.array(np.broadcast_to(u0.values, (R,) + u0.values.shape[-2:]), dtype=float)
    if not bounds.contains(uv):
        raise ValueError("initial control violates the admissible box")
    snapshots = sorted({int(k) for k in snapshots})
    if snapshots and (snapshots[0] < 0 or snapshots[-1] > K):
        raise ValueError(f"snapshot iterations must lie in [0, {K}]")

    engine = None
    if fast or fast is None:
        engine = _fast_engine(spec, grid, scheme, bounds)
        if fast and engine is None:
            raise ValueError("no compiled engine for this problem and scheme")
    if engine is None:
        engine = _GenericEngine(spec, grid, scheme, bounds)

    every = config.diagnostics_every
    records = (set(range(0, K + 1, every)) if every > 0 else set()) | {0, K}
    events = sorted(records | set(snapshots) | set(range(0, K + 1, ITER_BLOCK)))

    ref = None if reference is None else np.asarray(reference.values)
    traces = [TrainingTrace() for _ in seeds]
    diverged = np.full(R, -1)
    snaps = {}
    cost_sum, cost_cnt = np.zeros(R), 0
    blk_id, blk = None, None

    for j, k in enumerate(events):
        active = diverged < 0
        if k in records:
            window = cost_sum / cost_cnt if cost_cnt else np.full(R, np.nan)
            eta_k = lr(config.schedule, k)
            for r in np.flatnonzero(active):
                rec = TraceRecord(k, eta_k, float(window[r]), float(path_norm(uv[r], grid.h)))
                if config.oracle_M > 0:
                    g = estimate_full_gradient(spec, ControlPath(grid, uv[r]), config.oracle_M, seeds[r], scheme)
                    rec.grad_norm, rec.grad_norm_stderr = float(g.norm), float(g.aggregate_stderr)
                if ref is not None:
                    rec.ref_distance = float(path_norm(uv[r] - ref, grid.h))
                traces[r].records.append(rec)
            cost_sum[:], cost_cnt = 0.0, 0
        if k in snapshots:
            snaps[k] = uv.copy()
        if k == K:
            break
        k_next = events[j + 1]
        b = k // ITER_BLOCK
        if b != blk_id:
            blk = [draw_block(spec, grid, s, b, config.B) if a else None for s, a in zip(seeds, active)]
            blk_id = b
        i0 = k - b * ITER_BLOCK
        etas = _lr_array(config.schedule, k, k_next)
        costs, bad_at = engine.run(uv, blk, i0, etas, active)
        hit = bad_at >= 0
        diverged[hit] = k + bad_at[hit]
        cost_sum += costs.sum(axis=1)
        cost_cnt += k_next - k

    return RepeatResult(uv, traces, diverged, snaps)


def run_sgd(
    spec: ProblemSpec,
    u0: ControlPath,
    config: SgdConfig,
    reference: ControlPath | None = None,
    scheme: str = "discrete",
    fast: bool | None = None,
):
    """Projected SGD from ``u0``; returns ``(final control, trace)``.

    Raises :class:`TrainingDiverged`, carrying the last finite control and
    the trace so far, if an iteration produces a non-finite gradient or cost.
    """
    res = run_sgd_repeats(spec, u0, config, [config.seed], reference, scheme, fast)
    u = ControlPath(u0.grid, res.controls[0])
    if res.diverged[0] >= 0:
        raise TrainingDiverged(int(res.diverged[0]), u, res.traces[0])
    return u, res.traces[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_control(path, u: ControlPath) -> Path:
    if u.values.ndim != 2:
        raise ValueError("checkpoints hold a single (N, p) control")
    path = Path(path)
    N, p = u.values.shape
    with atomic_writer(path) as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        fh.write(f"{N} {p} {u.grid.h!r}\n")
        for row in u.values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    return path


def load_control(path) -> ControlPath:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: missing '{CHECKPOINT_HEADER}' header")
    try:
        N_s, p_s, h_s = lines[1].split()
        N, p, h = int(N_s), int(p_s), float(h_s)
    except (IndexError, ValueError) as err:
        raise ValueError(f"{path}: malformed 'N p h' line") from err
    rows = [ln for ln in lines[2:] if ln.strip()]
    if len(rows) != N:
        raise ValueError(f"{path}: expected {N} rows, found {len(rows)}")
    try:
        values = [[float(v) for v in ln.split()] for ln in rows]
    except ValueError as err:
        raise ValueError(f"{path}: non-numeric entry") from err
    if any(len(r) != p for r in values):
        raise ValueError(f"{path}: expected {p} entries per row")
    return ControlPath(TemporalGrid(N * h, N), np.array(values))
