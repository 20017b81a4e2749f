"""Reproducible numerical studies built on the solver and optimizer.

Every report is a pure function of its configuration, seed included.
Repeat ``r`` of a study always trains with :func:`repeat_seed` of
``(seed, key, r)``, so reports do not depend on worker count or on the
order in which repeats finish.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import ControlPath, make_grid, make_rng, path_norm
from .io import atomic_writer
from .optimizer import Constant, Harmonic, SgdConfig, TrainingTrace, run_sgd, run_sgd_repeats
from .problems import (
    LqParams,
    ProblemSpec,
    SnnArch,
    initial_control,
    lq_ustar,
    make_dataset_1d,
    make_dataset_8d,
    make_lq_problem,
    make_snn_problem,
    truth_1d,
    truth_8d,
)

__all__ = [
    "LqStudyConfig",
    "ConvergenceRow",
    "ConvergenceReport",
    "StudyFailure",
    "GradientDecayReport",
    "FuncApproxConfig",
    "BandReport",
    "FuncApproxResult",
    "repeat_seed",
    "lq_reference",
    "run_lq_convergence_in_N",
    "run_lq_convergence_in_K",
    "run_gradient_decay",
    "predict_with_bands",
    "band_report",
    "run_funcapprox_1d",
    "run_funcapprox_8d",
    "write_convergence_csv",
    "write_bands_csv",
]

Z95 = 1.96
DIVERGENCE_LIMIT = 0.10
_STREAM_BANDS = 6101


def repeat_seed(seed: int, *key: int) -> int:
    """64-bit training seed derived from ``(seed, *key)``."""
    hi, lo = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, key)]).generate_state(2)
    return (int(hi) << 32) | int(lo)


# ---------------------------------------------------------------------------
# LQ convergence studies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LqStudyConfig:
    """Defaults follow the N-sweep; ``batch`` is the SGD mini-batch size."""

    sigma: float = 0.5
    T: float = 1.0
    N_list: tuple = tuple(range(20, 101, 10))
    kappa: float = 0.2
    repeats: int = 50
    schedule: Constant | Harmonic = field(default_factory=Harmonic)
    batch: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "N_list", tuple(int(n) for n in self.N_list))
        if not self.N_list or min(self.N_list) < 1:
            raise ValueError("N_list needs at least one entry, all >= 1")
        if self.repeats < 1 or self.batch < 1:
            raise ValueError("repeats and batch must be >= 1")
        if not self.kappa >= 0:
            raise ValueError("kappa must be >= 0")

    def K_for(self, N: int) -> int:
        return int(round(self.kappa * N * N))


@dataclass
class ConvergenceRow:
    N: int
    K: int
    rmse: float
    stderr: float
    diverged: int
    errors: np.ndarray = field(repr=False, default=None)


@dataclass
class ConvergenceReport:
    """RMSE rows and the least-squares fit of ``log rmse`` on ``log x``.

    ``x`` is ``"N"`` or ``"K"``.  For K sweeps ``per_doubling`` holds the
    relative RMSE improvement per doubling of K between consecutive rows and
    ``plateau_K`` the first K from which every later improvement is below
    10% (``None`` if there is none).
    """

    rows: list
    x: str
    slope: float
    intercept: float
    residuals: np.ndarray
    per_doubling: np.ndarray | None = None
    plateau_K: int | None = None
    final_control: ControlPath | None = None

    @property
    def diverged(self) -> int:
        return sum(r.diverged for r in self.rows)


class StudyFailure(RuntimeError):
    """More than 10% of the repeats in a row diverged."""

    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = rows


def lq_reference(grid, sigma: float) -> ControlPath:
    """Closed-form optimal control sampled at the left nodes."""
    return ControlPath(grid, lq_ustar(grid.nodes[:-1], sigma))


def _row(N, K, err, diverged, R):
    if diverged > DIVERGENCE_LIMIT * R:
        raise StudyFailure(f"{diverged}/{R} repeats diverged at N={N}, K={K}", [])
    if err.size == 0:
        return ConvergenceRow(N, K, math.nan, math.nan, diverged, err)
    sq = err**2
    rmse = float(np.sqrt(np.mean(sq)))
    se_ms = float(np.std(sq, ddof=1) / np.sqrt(sq.size)) if sq.size > 1 else math.nan
    stderr = se_ms / (2 * rmse) if rmse > 0 else 0.0
    return ConvergenceRow(N, K, rmse, stderr, diverged, err)


def _fit(x, rows):
    y = np.array([r.rmse for r in rows])
    x = np.asarray(x, dtype=float)
    if len(rows) < 2 or np.any(y <= 0) or np.any(x <= 0):
        return math.nan, math.nan, np.full(len(rows), math.nan)
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(intercept), ly - (slope * lx + intercept)


def _lq_run(args):
    """Worker body: one group of repeats on one grid."""
    sigma, T, N, cfg, seeds, u0_values, snapshots = args
    spec = make_lq_problem(LqParams(sigma=sigma, T=T))
    grid = make_grid(T, N)
    u0 = ControlPath(grid, u0_values)
    res = run_sgd_repeats(spec, u0, cfg, seeds, snapshots=snapshots)
    return res.controls, res.diverged, res.snapshots


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _split(seeds, workers):
    n = max(1, min(workers, len(seeds)))
    return [list(part) for part in np.array_split(np.asarray(seeds, dtype=object), n) if len(part)]


def _first_good(grid, controls, diverged):
    ok = np.flatnonzero(diverged < 0)
    return ControlPath(grid, controls[ok[0]]) if ok.size else None


def _errors(controls, diverged, ref, h):
    ok = diverged < 0
    return path_norm(controls[ok] - ref, h), int((~ok).sum())


def run_lq_convergence_in_N(config: LqStudyConfig = LqStudyConfig(), workers: int = 1, u0: str = "zero") -> ConvergenceReport:
    """RMSE of ``R`` projected-SGD runs against ``u*`` for each N, with ``K = round(kappa N^2)``.

    ``u0="optimum"`` starts every run from the sampled optimum instead of 0.
    """
    rows, last = [], None
    for N in config.N_list:
        grid = make_grid(config.T, N)
        ref = lq_reference(grid, config.sigma)
        start = ref.values if u0 == "optimum" else np.zeros_like(ref.values)
        K = config.K_for(N)
        cfg = SgdConfig(K=K, B=config.batch, schedule=config.schedule)
        seeds = [repeat_seed(config.seed, N, r) for r in range(config.repeats)]
        out = _map(_lq_run, [(config.sigma, config.T, N, cfg, s, start, ()) for s in _split(seeds, workers)], workers)
        controls = np.concatenate([o[0] for o in out])
        diverged = np.concatenate([o[1] for o in out])
        err, n_div = _errors(controls, diverged, ref.values, grid.h)
        try:
            rows.append(_row(N, K, err, n_div, config.repeats))
        except StudyFailure as exc:
            raise StudyFailure(str(exc), rows) from None
        last = _first_good(grid, controls, diverged)
    slope, intercept, resid = _fit([r.N for r in rows], rows)
    return ConvergenceReport(rows, "N", slope, intercept, resid, final_control=last)


def _per_doubling(rows):
    out = []
    for a, b in zip(rows[:-1], rows[1:]):
        doublings = math.log2(b.K / a.K) if a.K > 0 and b.K > a.K else math.nan
        out.append(1.0 - (b.rmse / a.rmse) ** (1.0 / doublings) if doublings > 0 else math.nan)
    return np.array(out)


def run_lq_convergence_in_K(
    N: int = 60,
    K_list=(200, 2000, 4000, 8000, 16000),
    repeats: int = 20,
    schedule=None,
    seed: int = 0,
    batch: int = 64,
    sigma: float = 0.5,
    T: float = 1.0,
    workers: int = 1,
) -> ConvergenceReport:
    """RMSE against ``u*`` at fixed N for each K in ``K_list``.

    One run per repeat is trained to ``max(K_list)`` and read at every K;
    because iteration randomness depends only on ``(seed, k)``, each reading
    equals a separate run of that length.
    """
    K_list = sorted({int(k) for k in K_list})
    if not K_list or K_list[0] < 0:
        raise ValueError("K_list needs at least one entry, all >= 0")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    schedule = schedule if schedule is not None else Harmonic()
    grid = make_grid(T, N)
    ref = lq_reference(grid, sigma)
    cfg = SgdConfig(K=K_list[-1], B=batch, schedule=schedule)
    seeds = [repeat_seed(seed, N, r) for r in range(repeats)]
    zero = np.zeros_like(ref.values)
    out = _map(_lq_run, [(sigma, T, N, cfg, s, zero, tuple(K_list)) for s in _split(seeds, workers)], workers)
    diverged_final = np.concatenate([o[1] for o in out])
    rows = []
    for K in K_list:
        controls = np.concatenate([o[2][K] for o in out])
        # a repeat counts as diverged at K if it failed before step K
        div_K = np.where((diverged_final >= 0) & (diverged_final < K), diverged_final, -1)
        err, n_div = _errors(controls, div_K, ref.values, grid.h)
        try:
            rows.append(_row(N, K, err, n_div, repeats))
        except StudyFailure as exc:
            raise StudyFailure(str(exc), rows) from None
    slope, intercept, resid = _fit([r.K for r in rows], rows)
    per = _per_doubling(rows)
    plateau = None
    for i in range(len(per)):
        if np.all(per[i:] < 0.10):
            plateau = rows[i].K
            break
    final = _first_good(grid, np.concatenate([o[0] for o in out]), diverged_final)
    return ConvergenceReport(rows, "K", slope, intercept, resid, per, plateau, final)


# ---------------------------------------------------------------------------
# Gradient-norm decay
# ---------------------------------------------------------------------------


@dataclass
class GradientDecayReport:
    trace: TrainingTrace
    control: ControlPath

    @property
    def ratio(self) -> float:
        g = self.trace.column("grad_norm")
        return float(g[-1] / g[0]) if g[0] > 0 else (0.0 if g[-1] == 0 else math.inf)


def run_gradient_decay(spec: ProblemSpec, config: SgdConfig, u0: ControlPath | None = None) -> GradientDecayReport:
    """Train and record oracle gradient norms every ``config.diagnostics_every`` steps."""
    if config.oracle_M <= 0:
        raise ValueError("gradient decay needs oracle_M > 0")
    if u0 is None:
        grid = spec.meta["arch"].grid() if spec.meta.get("kind") == "snn" else make_grid(spec.meta.get("T", 1.0), 20)
        u0 = initial_control(spec, grid, seed=config.seed)
    u, trace = run_sgd(spec, u0, config)
    return GradientDecayReport(trace, u)


# ---------------------------------------------------------------------------
# Function approximation with uncertainty bands
# ---------------------------------------------------------------------------


def predict_with_bands(spec: ProblemSpec, u: ControlPath, inputs, M: int = 400, seed: int = 0, chunk: int = 1 << 14):
    """Mean readout and ``1.96 sd`` half-width over ``M`` forward passes per input.

    ``inputs`` is ``(n, d_in)``; returns two ``(n, d_out)`` arrays.  Noise is
    drawn point by point in input order, so results do not depend on
    ``chunk``.
    """
    from .solver import _forward

    if M < 2:
        raise ValueError("M must be >= 2")
    arch = spec.meta["arch"]
    readout = spec.meta["readout"]
    inputs = np.asarray(inputs, dtype=float).reshape(-1, arch.d_in)
    grid = u.grid
    rng = make_rng(seed, _STREAM_BANDS)
    per = max(1, chunk // M)
    means, halves = [], []
    for lo in range(0, len(inputs), per):
        x = inputs[lo : lo + per]
        w = rng.standard_normal((len(x), M, grid.N, spec.m)) * np.sqrt(grid.h)
        x0 = np.pad(x, [(0, 0), (0, arch.L - arch.d_in)])[:, None, :]
        out = readout(_forward(spec, u.values, w, x0, grid)[..., -1, :])
        shift = out[:, :1]
        dev = out - shift
        means.append(shift[:, 0] + dev.mean(axis=1))
        halves.append(Z95 * dev.std(axis=1, ddof=1))
    return np.concatenate(means), np.concatenate(halves)


@dataclass
class BandReport:
    """One evaluation grid: predicted means and bands next to the noise-free truth."""

    name: str
    points: np.ndarray
    mean: np.ndarray
    half_width: np.ndarray
    truth_mean: np.ndarray
    truth_half_width: np.ndarray
    interior: np.ndarray

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean((self.mean - self.truth_mean) ** 2)))

    @property
    def band_error(self) -> float:
        return float(np.mean(np.abs(self.half_width - self.truth_half_width)))

    @property
    def interior_half_width(self) -> float:
        return float(np.mean(self.half_width[self.interior]))


def band_report(name, spec, u, points, truth, noise, M, seed) -> BandReport:
    points = np.asarray(points, dtype=float)
    mean, half = predict_with_bands(spec, u, points, M, seed)
    tm = np.asarray(truth(points), dtype=float).reshape(mean.shape)
    interior = np.all((points >= 0.05) & (points <= 0.95), axis=-1)
    return BandReport(name, points, mean, half, tm, np.full(mean.shape, Z95 * noise), interior)


@dataclass(frozen=True)
class FuncApproxConfig:
    """Training and evaluation settings shared by the 1-D and 8-D studies.

    The learning rate is ``Harmonic(theta, M)``; ``grid_points`` is the
    number of evaluation points per axis and ``band_M`` the number of
    forward passes per point.
    """

    theta: float = 1000.0
    M: float = 10000.0
    batch: int = 1
    n_data: int = 10_000
    points_per_dim: int = 6
    data_noise: float = 0.05
    diffusion_floor: float = 0.01
    reg: float = 1e-4
    noise_init: float = 0.05
    grid_points: int = 101
    band_M: int = 400
    diagnostics_every: int = 0
    oracle_M: int = 0
    seed: int = 0

    def schedule(self):
        return Harmonic(self.theta, self.M)


@dataclass
class FuncApproxResult:
    views: dict
    control: ControlPath
    trace: TrainingTrace

    @property
    def band(self) -> BandReport:
        return next(iter(self.views.values()))


def _train_snn(spec, arch, K, config):
    grid = arch.grid()
    u0 = initial_control(spec, grid, seed=config.seed, noise_init=config.noise_init)
    cfg = SgdConfig(
        K=K, B=config.batch, schedule=config.schedule(), seed=repeat_seed(config.seed, 1),
        diagnostics_every=config.diagnostics_every, oracle_M=config.oracle_M,
    )
    return run_sgd(spec, u0, cfg)


def run_funcapprox_1d(arch: SnnArch = SnnArch(L=4, N_layers=8), K: int = 2_000_000, config: FuncApproxConfig = FuncApproxConfig()):
    data = make_dataset_1d(config.n_data, config.data_noise, seed=config.seed)
    spec = make_snn_problem(arch, data, config.diffusion_floor, config.reg)
    u, trace = _train_snn(spec, arch, K, config)
    x = np.linspace(0.0, 1.0, config.grid_points)[:, None]
    view = band_report("grid", spec, u, x, lambda p: truth_1d(p[:, 0]), config.data_noise, config.band_M, config.seed)
    return FuncApproxResult({"grid": view}, u, trace)


def sections_8d(n: int):
    """Axis sections through the all-0.5 point and the two marginal surfaces."""
    t = np.linspace(0.0, 1.0, n)
    views = {}
    for axis in range(8):
        pts = np.full((n, 8), 0.5)
        pts[:, axis] = t
        views[f"axis_{axis + 1}"] = pts
    for a, b in ((1, 4), (3, 6)):
        A, B = np.meshgrid(t, t, indexing="ij")
        pts = np.full((n * n, 8), 0.5)
        pts[:, a], pts[:, b] = A.ravel(), B.ravel()
        views[f"surface_{a + 1}_{b + 1}"] = pts
    return views


def run_funcapprox_8d(
    arch: SnnArch = SnnArch(L=40, N_layers=15, d_in=8),
    K: int = 3_000_000,
    config: FuncApproxConfig = FuncApproxConfig(grid_points=21),
):
    data = make_dataset_8d(config.points_per_dim, config.data_noise, seed=config.seed)
    spec = make_snn_problem(arch, data, config.diffusion_floor, config.reg)
    u, trace = _train_snn(spec, arch, K, config)
    views = {
        name: band_report(name, spec, u, pts, truth_8d, config.data_noise, config.band_M, repeat_seed(config.seed, i))
        for i, (name, pts) in enumerate(sections_8d(config.grid_points).items())
    }
    return FuncApproxResult(views, u, trace)


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(int(v)) if isinstance(v, (np.integer,)) else v


def write_convergence_csv(report: ConvergenceReport, path):
    with atomic_writer(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "K", "rmse", "stderr", "diverged"])
        for r in report.rows:
            w.writerow([r.N, r.K, _fmt(r.rmse), _fmt(r.stderr), r.diverged])
    return path


def write_bands_csv(report: BandReport, path):
    d_in = report.points.shape[1]
    d_out = report.mean.shape[1]
    sfx = [""] if d_out == 1 else [f"_{j + 1}" for j in range(d_out)]
    cols = ("mean", "half_width", "truth_mean", "truth_half_width")
    with atomic_writer(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{i + 1}" for i in range(d_in)] + [c + s for c in cols for s in sfx])
        for i in range(len(report.points)):
            vals = [getattr(report, c)[i, j] for c in cols for j in range(d_out)]
            w.writerow([_fmt(v) for v in report.points[i]] + [_fmt(v) for v in vals])
    return path
