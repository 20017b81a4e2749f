"""Forward Euler-Maruyama simulation, sample-wise adjoints and gradients.

Two adjoint index conventions are available through ``scheme``:

``"discrete"`` (default)
    ``Y_N = phi_x(X_N)``, ``Y_n = Y_{n+1} + h (f_x(X_n, u_n)^T Y_{n+1} + r_x(X_n, u_n))``
    and gradient row ``n = f_u(X_n, u_n)^T Y_{n+1} + g_u : Z_n + r_u(X_n, u_n)``.
    This is the exact pathwise derivative of the left-point cost
    ``h sum_n r(X_n, u_n) + phi(X_N)``, so its mean is the gradient of the
    discretized cost functional.

``"right-point"``
    The right-point recursion ``Y_n = Y_{n+1} + h (f_x^T Y_{n+1} + r_x)`` at
    ``(X_{n+1}, u_{n+1})`` (``u_{N-1}`` on the last step) with gradient row
    ``n = f_u^T Y_n + g_u : Z_n + r_u``.  Consistent to O(h) with the above.

In both, ``Z_n = Y_{n+1} w_n^T / h``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    AdjointPath,
    ControlPath,
    DataSample,
    NoisePath,
    StatePath,
    TemporalGrid,
    make_rng,
    path_norm,
)
from .problems import ProblemSpec

__all__ = [
    "DivergenceError",
    "GradientPath",
    "TrajectoryBundle",
    "SCHEMES",
    "simulate_forward",
    "backward_sample",
    "sample_gradient",
    "simulate_bundle",
    "batch_gradient",
    "estimate_full_gradient",
    "estimate_cost",
    "finite_difference_gradient",
    "adjoint_moments",
]

SCHEMES = ("discrete", "right-point")
CHUNK = 4096

_STREAM_FULL_GRADIENT = 3101
_STREAM_COST = 3102
_STREAM_FD = 3103
_STREAM_MOMENTS = 3104


class DivergenceError(FloatingPointError):
    """A simulated path left the finite range."""

    def __init__(self, stage: str, step: int, sample: int | None = None):
        where = f" in sample {sample}" if sample is not None else ""
        super().__init__(f"non-finite {stage} at step {step}{where}")
        self.stage, self.step, self.sample = stage, step, sample


@dataclass(frozen=True)
class GradientPath:
    grid: TemporalGrid
    values: np.ndarray
    stderr: np.ndarray | None = None

    @property
    def norm(self):
        return path_norm(self.values, self.grid.h)

    @property
    def aggregate_stderr(self):
        """Discrete L2 norm of the per-entry standard errors."""
        if self.stderr is None:
            return 0.0
        return path_norm(self.stderr, self.grid.h)

    def as_control(self) -> ControlPath:
        return ControlPath(self.grid, self.values)


@dataclass(frozen=True)
class TrajectoryBundle:
    noise: NoisePath
    state: StatePath
    adjoint: AdjointPath
    data: DataSample
    cost_sample: float


def _check_scheme(scheme):
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def _first_bad_step(arr, time_axis):
    bad = ~np.isfinite(arr)
    axes = tuple(i for i in range(arr.ndim) if i != time_axis % arr.ndim)
    per_step = np.any(bad, axis=axes)
    step = int(np.argmax(per_step))
    sample = None
    if arr.ndim > 2:
        per_sample = np.any(bad, axis=tuple(range(1, arr.ndim)))
        sample = int(np.argmax(per_sample))
    return step, sample


# ---------------------------------------------------------------------------
# Array kernels.  ``uv`` is (..., N, p), ``w`` is (..., N, m).
# ---------------------------------------------------------------------------


def _forward(spec: ProblemSpec, uv, w, x0, grid: TemporalGrid, check: bool = True):
    N, h = grid.N, grid.h
    t = grid.nodes
    lead = np.broadcast_shapes(uv.shape[:-2], w.shape[:-2], np.shape(x0)[:-1])
    X = np.empty(lead + (N + 1, spec.d))
    X[..., 0, :] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(N):
            xn, un = X[..., n, :], uv[..., n, :]
            X[..., n + 1, :] = xn + h * spec.f(xn, un, t[n]) + spec.g_apply(un, t[n], w[..., n, :])
    if check and not np.all(np.isfinite(X)):
        step, sample = _first_bad_step(X, -2)
        raise DivergenceError("state", step, sample)
    return X


def _backward(spec: ProblemSpec, uv, X, target, grid: TemporalGrid, scheme: str, check: bool = True):
    N, h = grid.N, grid.h
    t = grid.nodes
    Y = np.empty(X.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        Y[..., N, :] = spec.phi_x(X[..., N, :], target)
        for n in range(N - 1, -1, -1):
            yn1 = Y[..., n + 1, :]
            if scheme == "discrete":
                xe, ue, te = X[..., n, :], uv[..., n, :], t[n]
            else:
                xe, ue, te = X[..., n + 1, :], uv[..., min(n + 1, N - 1), :], t[n + 1]
            Y[..., n, :] = yn1 + h * (spec.f_x_vjp(xe, ue, te, yn1) + spec.r_x(xe, ue, te))
    if check and not np.all(np.isfinite(Y)):
        step, sample = _first_bad_step(Y, -2)
        raise DivergenceError("adjoint", step, sample)
    return Y


def _gradient(spec: ProblemSpec, uv, X, Y, w, grid: TemporalGrid, scheme: str):
    """Gradient rows from (X, Y, w); ``Z_n = Y_{n+1} w_n^T / h`` is never stored."""
    N, h = grid.N, grid.h
    t = grid.nodes[:N]
    Xn = X[..., :N, :]
    Yf = Y[..., 1:, :] if scheme == "discrete" else Y[..., :N, :]
    G = (
        spec.f_u_vjp(Xn, uv, t, Yf)
        + spec.gu_dot_yw(uv, t, Y[..., 1:, :], w) / h
        + spec.r_u(Xn, uv, t)
    )
    return np.broadcast_to(G, np.broadcast_shapes(Xn.shape[:-1], uv.shape[:-1]) + (spec.p,))


def _cost(spec: ProblemSpec, uv, X, target, grid: TemporalGrid):
    N, h = grid.N, grid.h
    running = h * np.sum(spec.r(X[..., :N, :], uv, grid.nodes[:N]), axis=-1)
    return running + spec.phi(X[..., N, :], target)


def _draw(spec: ProblemSpec, rng, grid: TemporalGrid, size):
    """Noise first, then data: the fixed draw order of every estimator."""
    w = rng.standard_normal(tuple(np.atleast_1d(size)) + (grid.N, spec.m)) * np.sqrt(grid.h)
    data = spec.sample_data(rng, size)
    return w, data


# ---------------------------------------------------------------------------
# Path-level API
# ---------------------------------------------------------------------------


def simulate_forward(spec: ProblemSpec, u: ControlPath, noise: NoisePath, data: DataSample) -> StatePath:
    if noise.grid != u.grid:
        raise ValueError("control and noise live on different grids")
    if u.p != spec.p or noise.m != spec.m:
        raise ValueError(f"expected p={spec.p}, m={spec.m}; got p={u.p}, m={noise.m}")
    x0 = spec.initial_state(data)
    return StatePath(_forward(spec, u.values, noise.increments, x0, u.grid))


def backward_sample(
    spec: ProblemSpec,
    u: ControlPath,
    state: StatePath,
    noise: NoisePath,
    data: DataSample,
    scheme: str = "discrete",
) -> AdjointPath:
    _check_scheme(scheme)
    grid = u.grid
    Y = _backward(spec, u.values, state.states, data.target, grid, scheme)
    Z = Y[..., 1:, :, None] * noise.increments[..., None, :] / grid.h
    return AdjointPath(Y, Z)


def sample_gradient(
    spec: ProblemSpec, u: ControlPath, state: StatePath, adjoint: AdjointPath, scheme: str = "discrete"
) -> GradientPath:
    """Gradient rows from a materialized adjoint pair (uses ``gu_dot_z`` on Z)."""
    _check_scheme(scheme)
    grid = u.grid
    N = grid.N
    t = grid.nodes[:N]
    X, Y = state.states, adjoint.y
    Xn = X[..., :N, :]
    Yf = Y[..., 1:, :] if scheme == "discrete" else Y[..., :N, :]
    G = spec.f_u_vjp(Xn, u.values, t, Yf) + spec.gu_dot_z(u.values, t, adjoint.z) + spec.r_u(Xn, u.values, t)
    G = np.broadcast_to(G, np.broadcast_shapes(Xn.shape[:-1], u.values.shape[:-1]) + (spec.p,))
    if not np.all(np.isfinite(G)):
        step, sample = _first_bad_step(G, -2)
        raise DivergenceError("gradient", step, sample)
    return GradientPath(grid, np.array(G))


def simulate_bundle(
    spec: ProblemSpec, u: ControlPath, seed: int, stream=(0,), scheme: str = "discrete"
) -> TrajectoryBundle:
    """One full realization (noise, data, state, adjoint, sampled cost)."""
    stream = (stream,) if np.isscalar(stream) else tuple(stream)
    rng = make_rng(seed, *stream)
    w, data = _draw(spec, rng, u.grid, ())
    noise = NoisePath(u.grid, w, seed=seed, stream=stream)
    state = simulate_forward(spec, u, noise, data)
    adjoint = backward_sample(spec, u, state, noise, data, scheme)
    cost = float(_cost(spec, u.values, state.states, data.target, u.grid))
    return TrajectoryBundle(noise, state, adjoint, data, cost)


# ---------------------------------------------------------------------------
# Monte-Carlo estimators
# ---------------------------------------------------------------------------


class _ShiftedMoments:
    """Running mean/variance shifted by the first sample.

    Identical samples give a mean equal to that sample bit for bit.
    """

    def __init__(self):
        self.n = 0
        self.shift = self.s1 = self.s2 = None

    def add(self, batch):
        batch = np.asarray(batch, dtype=float)
        if self.shift is None:
            self.shift = batch[0].copy()
            self.s1 = np.zeros_like(self.shift)
            self.s2 = np.zeros_like(self.shift)
        dev = batch - self.shift
        self.s1 += dev.sum(axis=0)
        self.s2 += np.square(dev).sum(axis=0)
        self.n += len(batch)

    @property
    def mean(self):
        return self.shift + self.s1 / self.n

    @property
    def stderr(self):
        if self.n < 2:
            return np.zeros_like(self.shift)
        var = (self.s2 - self.s1**2 / self.n) / (self.n - 1)
        return np.sqrt(np.maximum(var, 0.0) / self.n)


def _sample_chunks(spec, u: ControlPath, B: int, rng, scheme, want_grad=True):
    grid = u.grid
    for lo in range(0, B, CHUNK):
        size = min(CHUNK, B - lo)
        w, data = _draw(spec, rng, grid, size)
        x0 = spec.initial_state(data)
        try:
            X = _forward(spec, u.values, w, x0, grid)
            cost = _cost(spec, u.values, X, data.target, grid)
            G = None
            if want_grad:
                Y = _backward(spec, u.values, X, data.target, grid, scheme)
                G = _gradient(spec, u.values, X, Y, w, grid, scheme)
        except DivergenceError as err:
            sample = None if err.sample is None else lo + err.sample
            raise DivergenceError(err.stage, err.step, sample) from None
        yield G, cost


def batch_gradient(
    spec: ProblemSpec, u: ControlPath, B: int, seed: int, stream=(0,), scheme: str = "discrete"
):
    """Mini-batch mean of ``B`` sample gradients and the mean sampled cost.

    Returns ``(GradientPath with per-entry stderr, mean cost)``.
    """
    _check_scheme(scheme)
    if int(B) != B or B < 1:
        raise ValueError(f"batch size must be >= 1, got {B!r}")
    stream = (stream,) if np.isscalar(stream) else tuple(stream)
    rng = make_rng(seed, *stream)
    gm, cm = _ShiftedMoments(), _ShiftedMoments()
    for G, cost in _sample_chunks(spec, u, int(B), rng, scheme):
        gm.add(G)
        cm.add(cost)
    return GradientPath(u.grid, gm.mean, gm.stderr), float(cm.mean)


def estimate_full_gradient(spec: ProblemSpec, u: ControlPath, M: int, seed: int, scheme: str = "discrete") -> GradientPath:
    """High-sample Monte-Carlo estimate of the expected gradient, with stderr."""
    grad, _ = batch_gradient(spec, u, M, seed, (_STREAM_FULL_GRADIENT,), scheme)
    return grad


def estimate_cost(spec: ProblemSpec, u: ControlPath, M: int, seed: int):
    """Monte-Carlo mean and standard error of ``h sum r(X_n, u_n) + phi(X_N)``."""
    if int(M) != M or M < 1:
        raise ValueError(f"M must be >= 1, got {M!r}")
    rng = make_rng(seed, _STREAM_COST)
    cm = _ShiftedMoments()
    for _, cost in _sample_chunks(spec, u, int(M), rng, "discrete", want_grad=False):
        cm.add(cost)
    return float(cm.mean), float(cm.stderr)


def finite_difference_gradient(
    spec: ProblemSpec, u: ControlPath, M: int, eps: float, seed: int
) -> GradientPath:
    """Central differences of the sampled cost with common random numbers.

    Each of the ``N * p`` coordinates is perturbed by ``+-eps`` against the
    same ``M`` noise/data draws; the difference quotient is divided by
    ``h`` so rows are comparable with functional gradients.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if int(M) != M or M < 1:
        raise ValueError(f"M must be >= 1, got {M!r}")
    grid = u.grid
    N, p, h = grid.N, spec.p, grid.h
    rng = make_rng(seed, _STREAM_FD)
    w, data = _draw(spec, rng, grid, int(M))
    x0 = spec.initial_state(data)
    base = u.values
    vals = np.empty((N, p))
    errs = np.empty((N, p))
    for n in range(N):
        for j in range(p):
            up = base.copy()
            um = base.copy()
            up[n, j] += eps
            um[n, j] -= eps
            cp = _cost(spec, up, _forward(spec, up, w, x0, grid), data.target, grid)
            cn = _cost(spec, um, _forward(spec, um, w, x0, grid), data.target, grid)
            q = (cp - cn) / (2 * eps * h)
            vals[n, j] = q.mean()
            errs[n, j] = q.std(ddof=1) / np.sqrt(M) if M > 1 else 0.0
    return GradientPath(grid, vals, errs)


def adjoint_moments(spec: ProblemSpec, u: ControlPath, M: int, seed: int, scheme: str = "discrete"):
    """Empirical second moments of the sample-wise adjoint pair.

    Returns ``(E|Y_n|^2 for n = 0..N, E|Z_n|^2 for n = 0..N-1)`` over ``M``
    independent realizations, with ``|Z_n|`` the Frobenius norm.
    """
    _check_scheme(scheme)
    if int(M) != M or M < 1:
        raise ValueError(f"M must be >= 1, got {M!r}")
    grid = u.grid
    rng = make_rng(seed, _STREAM_MOMENTS)
    y2 = np.zeros(grid.N + 1)
    z2 = np.zeros(grid.N)
    for lo in range(0, int(M), CHUNK):
        size = min(CHUNK, int(M) - lo)
        w, data = _draw(spec, rng, grid, size)
        X = _forward(spec, u.values, w, spec.initial_state(data), grid)
        Y = _backward(spec, u.values, X, data.target, grid, scheme)
        ysq = np.sum(np.square(Y), axis=-1)
        y2 += ysq.sum(axis=0)
        # |Y w^T|_F = |Y| |w|
        z2 += np.sum(ysq[:, 1:] * np.sum(np.square(w), axis=-1), axis=0) / grid.h**2
    return y2 / M, z2 / M
