"""Problem definitions: dynamics, costs and their partial derivatives.

A :class:`ProblemSpec` bundles the callbacks of a controlled SDE

    X_{n+1} = X_n + h f(X_n, u_n, t_n) + g(u_n, t_n) w_n

with running cost ``r`` and terminal cost ``phi``.  All callbacks broadcast
over leading axes: ``x`` is ``(..., d)``, ``u`` is ``(..., p)`` and ``t`` is a
scalar or an array broadcastable against the leading axes.

Two problems are built in: the 8-dimensional linear-quadratic benchmark with
a closed-form optimal control, and a residual network with a bounded
sigmoid drift used for noisy regression.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import DataSample, ControlPath, TemporalGrid, make_rng

__all__ = [
    "ProblemSpec",
    "DerivativeInconsistency",
    "LqParams",
    "SnnArch",
    "lq_beta",
    "lq_a",
    "lq_constants",
    "lq_xstar",
    "lq_ustar",
    "make_lq_problem",
    "make_snn_problem",
    "check_problem_derivatives",
    "ArrayDataset",
    "MeshDataset",
    "make_dataset_1d",
    "make_dataset_8d",
    "truth_1d",
    "truth_8d",
    "save_dataset_csv",
    "load_dataset_csv",
    "default_bounds",
    "initial_control",
]


class DerivativeInconsistency(AssertionError):
    def __init__(self, callback: str, error: float, tol: float):
        super().__init__(f"{callback}: max relative error {error:.3e} exceeds tol {tol:.1e}")
        self.callback = callback
        self.error = error


@dataclass(frozen=True)
class ProblemSpec:
    d: int
    p: int
    m: int
    f: Callable
    f_x: Callable
    f_u: Callable
    g: Callable
    gu_dot_z: Callable
    r: Callable
    r_x: Callable
    r_u: Callable
    phi: Callable
    phi_x: Callable
    initial_state: Callable
    sample_data: Callable
    # Optional fused products; derived from the full Jacobians when omitted.
    f_x_vjp: Callable | None = None
    f_u_vjp: Callable | None = None
    g_apply: Callable | None = None
    gu_dot_yw: Callable | None = None
    name: str = "custom"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.f_x_vjp is None:
            object.__setattr__(
                self, "f_x_vjp", lambda x, u, t, y: np.einsum("...ij,...i->...j", self.f_x(x, u, t), y)
            )
        if self.f_u_vjp is None:
            object.__setattr__(
                self, "f_u_vjp", lambda x, u, t, y: np.einsum("...ij,...i->...j", self.f_u(x, u, t), y)
            )
        if self.g_apply is None:
            object.__setattr__(
                self, "g_apply", lambda u, t, w: np.einsum("...ij,...j->...i", self.g(u, t), w)
            )
        if self.gu_dot_yw is None:
            object.__setattr__(
                self, "gu_dot_yw", lambda u, t, y, w: self.gu_dot_z(u, t, y[..., :, None] * w[..., None, :])
            )

    @property
    def is_deterministic(self) -> bool:
        return bool(self.meta.get("deterministic", False))


# ---------------------------------------------------------------------------
# Linear-quadratic benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LqParams:
    sigma: float = 0.5
    T: float = 1.0
    d: int = 8

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")
        if self.T != 1.0:
            raise ValueError("the closed-form LQ benchmark is defined on [0, 1] only")
        if self.d != 8:
            raise ValueError("the LQ benchmark is 8-dimensional")


def lq_beta(t, sigma):
    return (1 + sigma**2) + sigma**2 * (1 - np.asarray(t, dtype=float))


def lq_constants(sigma):
    """``(D, x_T, alpha)`` of the closed form; ``alpha`` is a function of t."""
    s2 = sigma**2
    ell = math.log1p(s2 / (1 + s2))
    D = ell / (s2 + ell)
    # x_T^(i) = D * F_i(1) for the primitive F_i behind a_t^(i).
    x_T = D * np.array([0.5, math.sin(1.0), 0.5, 1.0 / 3.0, math.log(2.0), math.cos(2 * math.pi), math.tan(1.0)])

    def alpha(t):
        return np.log((1 + 2 * s2) / (s2 * (2 - np.asarray(t, dtype=float)) + 1))

    return D, x_T, alpha


def lq_a(t, sigma):
    t = np.asarray(t, dtype=float)
    if np.any(np.isclose(np.cos(t), 0.0)):
        raise ValueError("a_t is undefined where cos t = 0")
    b = lq_beta(t, sigma)
    s2 = sigma**2
    return np.stack(
        [
            -(t**2) / (2 * b),
            -np.sin(t) / b,
            -0.5 * np.exp(1 - t) / b,
            -(t**3) / (3 * b),
            -np.log1p(t) / b,
            -np.cos(2 * np.pi * t) / b,
            -np.tan(t) / b,
            (1 - t) / (s2 * (1 - t) + 1),
        ],
        axis=-1,
    )


def lq_xstar(t, sigma):
    """Tracking target; with it the closed-form ``u*`` is exactly optimal."""
    t = np.asarray(t, dtype=float)
    s2 = sigma**2
    _, x_T, alpha = lq_constants(sigma)
    w = alpha(t) / s2
    return np.stack(
        [
            t + w * (0.5 - x_T[0]),
            np.cos(t) + w * (math.sin(1.0) - x_T[1]),
            -np.exp(1 - t) / 2 + w * (0.5 - x_T[2]),
            t**2 + w * (1.0 / 3.0 - x_T[3]),
            1 / (1 + t) + w * (math.log(2.0) - x_T[4]),
            -2 * np.pi * np.sin(2 * np.pi * t) + w * (math.cos(2 * math.pi) - x_T[5]),
            1 / np.cos(t) ** 2 + w * (math.tan(1.0) - x_T[6]),
            1 + s2 / (1 + s2 * (1 - t)) ** 2,
        ],
        axis=-1,
    )


def lq_ustar(t, sigma, T=1.0):
    t = np.asarray(t, dtype=float)
    s2 = sigma**2
    b = lq_beta(t, sigma)
    _, x_T, _ = lq_constants(sigma)
    return np.stack(
        [
            (-(t**2) / 2 + T**2 / 2 - x_T[0]) / b,
            (-np.sin(t) + math.sin(1.0) - x_T[1]) / b,
            (-0.5 * np.exp(T - t) + 0.5 - x_T[2]) / b,
            (-(t**3) + T**3 - 3 * x_T[3]) / (3 * b),
            (-np.log1p(t) + math.log1p(T) - x_T[4]) / b,
            (-np.cos(2 * np.pi * t) + math.cos(2 * math.pi) - x_T[5]) / b,
            (-np.tan(t) + math.tan(1.0) - x_T[6]) / b,
            (T - t) / (s2 * (T - t) + 1),
        ],
        axis=-1,
    )


@functools.lru_cache(maxsize=4096)
def _lq_tables(t: float, sigma: float):
    a, xs = lq_a(t, sigma), lq_xstar(t, sigma)
    a.setflags(write=False)
    xs.setflags(write=False)
    return a, xs


def _lq_eval(fn_index, t, sigma):
    if np.ndim(t) == 0:
        return _lq_tables(float(t), float(sigma))[fn_index]
    return (lq_a, lq_xstar)[fn_index](t, sigma)


def make_lq_problem(params: LqParams = LqParams()) -> ProblemSpec:
    """``dX = (u - a_t) dt + sigma u dW`` with quadratic tracking cost."""
    sigma = float(params.sigma)
    d = params.d
    eye = np.eye(d)
    zeros_dd = np.zeros((d, d))

    def f(x, u, t):
        return np.broadcast_to(u - _lq_eval(0, t, sigma), np.broadcast_shapes(np.shape(x), np.shape(u)))

    def f_x(x, u, t):
        return np.broadcast_to(zeros_dd, np.broadcast_shapes(np.shape(x), np.shape(u)) + (d,))

    def f_u(x, u, t):
        return np.broadcast_to(eye, np.broadcast_shapes(np.shape(x), np.shape(u)) + (d,))

    def g(u, t):
        return sigma * u[..., :, None] * eye

    def gu_dot_z(u, t, z):
        return sigma * np.diagonal(z, axis1=-2, axis2=-1)

    def r(x, u, t):
        dx = x - _lq_eval(1, t, sigma)
        return 0.5 * np.sum(dx * dx, axis=-1) + 0.5 * np.sum(u * u, axis=-1)

    def r_x(x, u, t):
        return np.broadcast_to(x - _lq_eval(1, t, sigma), np.broadcast_shapes(np.shape(x), np.shape(u)))

    def r_u(x, u, t):
        return np.broadcast_to(u, np.broadcast_shapes(np.shape(x), np.shape(u)))

    def phi(x, target):
        return 0.5 * np.sum(x * x, axis=-1)

    def phi_x(x, target):
        return x

    def initial_state(data: DataSample):
        lead = data.input.shape[:-1] if data.input.ndim > 1 else ()
        return np.zeros(lead + (d,))

    def sample_data(rng, size=None):
        shape = () if size is None else tuple(np.atleast_1d(size))
        return DataSample(np.zeros(shape + (0,)), np.zeros(shape + (0,)))

    return ProblemSpec(
        d=d, p=d, m=d,
        f=f, f_x=f_x, f_u=f_u, g=g, gu_dot_z=gu_dot_z,
        r=r, r_x=r_x, r_u=r_u, phi=phi, phi_x=phi_x,
        initial_state=initial_state, sample_data=sample_data,
        f_x_vjp=lambda x, u, t, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y))),
        f_u_vjp=lambda x, u, t, y: np.broadcast_to(y, np.broadcast_shapes(np.shape(x), np.shape(u), np.shape(y))),
        g_apply=lambda u, t, w: sigma * u * w,
        gu_dot_yw=lambda u, t, y, w: sigma * y * w,
        name="lq",
        meta={"kind": "lq", "params": params, "T": params.T, "lower": -1e6, "upper": 1e6, "data_free": True},
    )


# ---------------------------------------------------------------------------
# Sigmoid SNN regression problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SnnArch:
    """Residual stochastic network with ``N_layers`` layers of ``L`` neurons.

    Each layer's control is the flat vector ``(a, W, V, mix, c)`` with
    ``a`` and ``V`` of length ``n_sig``, ``W`` of shape ``(n_sig, L)``,
    ``mix`` of shape ``(L, n_sig)`` and a scalar noise parameter ``c``.
    """

    L: int = 4
    N_layers: int = 8
    n_sig: int | None = None
    d_in: int = 1
    d_out: int = 1
    h: float = 1.0
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.n_sig is None:
            object.__setattr__(self, "n_sig", self.L)
        for name in ("L", "N_layers", "n_sig", "d_in", "d_out"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.L < max(self.d_in, self.d_out):
            raise ValueError(f"L={self.L} must be >= d_in={self.d_in} and d_out={self.d_out}")
        if not self.h > 0:
            raise ValueError("layer step h must be positive")
        if self.activation not in ("sigmoid", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def p(self) -> int:
        return 2 * self.n_sig + 2 * self.n_sig * self.L + 1

    @property
    def T(self) -> float:
        return self.h * self.N_layers

    def grid(self) -> TemporalGrid:
        return TemporalGrid(self.T, self.N_layers)

    def slices(self) -> dict:
        ns, L = self.n_sig, self.L
        edges = np.cumsum([0, ns, ns * L, ns, L * ns, 1])
        names = ("a", "W", "V", "mix", "c")
        return {k: slice(int(lo), int(hi)) for k, lo, hi in zip(names, edges[:-1], edges[1:])}

    def unpack(self, u):
        s = self.slices()
        lead = u.shape[:-1]
        return (
            u[..., s["a"]],
            u[..., s["W"]].reshape(lead + (self.n_sig, self.L)),
            u[..., s["V"]],
            u[..., s["mix"]].reshape(lead + (self.L, self.n_sig)),
            u[..., s["c"].start],
        )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(c):
    return np.logaddexp(0.0, c)


def make_snn_problem(arch: SnnArch, dataset, diffusion_floor: float = 0.01, reg: float = 1e-4) -> ProblemSpec:
    """Regression SNN with drift ``mix @ (a * act(W x + V))``.

    The diffusion is ``(diffusion_floor + softplus(c)) I_L``, the running
    cost is ``reg/2 |u|^2`` and the terminal cost is half the squared error
    of the first ``d_out`` output neurons against the target.
    """
    if not diffusion_floor > 0:
        raise ValueError("diffusion_floor must be positive")
    if len(dataset) < 1:
        raise ValueError("dataset is empty")
    if dataset.d_in != arch.d_in or dataset.d_out != arch.d_out:
        raise ValueError(
            f"dataset dims (d_in={dataset.d_in}, d_out={dataset.d_out}) do not match "
            f"architecture (d_in={arch.d_in}, d_out={arch.d_out})"
        )
    L, ns = arch.L, arch.n_sig
    p = arch.p
    sl = arch.slices()
    ic = sl["c"].start
    floor = float(diffusion_floor)
    relu = arch.activation == "relu"

    def act(z):
        if relu:
            return np.maximum(z, 0.0), (z > 0).astype(float)
        s = _sigmoid(z)
        return s, s * (1 - s)

    def pre(x, u):
        a, W, V, mix, c = arch.unpack(u)
        z = np.einsum("...jk,...k->...j", W, x) + V
        s, ds = act(z)
        return a, W, mix, s, ds

    def f(x, u, t):
        a, W, mix, s, ds = pre(x, u)
        return np.einsum("...ij,...j->...i", mix, a * s)

    def f_x(x, u, t):
        a, W, mix, s, ds = pre(x, u)
        return np.einsum("...ij,...jk->...ik", mix, (a * ds)[..., :, None] * W)

    def f_x_vjp(x, u, t, y):
        a, W, mix, s, ds = pre(x, u)
        q = np.einsum("...ij,...i->...j", mix, y)
        return np.einsum("...jk,...j->...k", W, q * a * ds)

    def f_u_vjp(x, u, t, y):
        a, W, mix, s, ds = pre(x, u)
        q = np.einsum("...ij,...i->...j", mix, y)
        qad = q * a * ds
        lead = np.broadcast_shapes(q.shape[:-1], np.shape(x)[:-1])
        out = np.zeros(lead + (p,))
        out[..., sl["a"]] = q * s
        out[..., sl["W"]] = (qad[..., :, None] * x[..., None, :]).reshape(lead + (ns * L,))
        out[..., sl["V"]] = qad
        out[..., sl["mix"]] = (y[..., :, None] * (a * s)[..., None, :]).reshape(lead + (L * ns,))
        return out

    def f_u(x, u, t):
        a, W, mix, s, ds = pre(x, u)
        lead = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        out = np.zeros(lead + (L, p))
        # d f_i / d a_j = mix_ij s_j
        out[..., sl["a"]] = mix * s[..., None, :]
        ad = a * ds
        # d f_i / d W_jk = mix_ij a_j s'_j x_k
        out[..., sl["W"]] = (
            (mix * ad[..., None, :])[..., :, :, None] * x[..., None, None, :]
        ).reshape(lead + (L, ns * L))
        out[..., sl["V"]] = mix * ad[..., None, :]
        # d f_i / d mix_kj = delta_ik a_j s_j
        eye = np.eye(L)
        out[..., sl["mix"]] = (eye[:, :, None] * (a * s)[..., None, None, :]).reshape(lead + (L, L * ns))
        return out

    def noise_scale(u):
        return floor + _softplus(u[..., ic])

    def g(u, t):
        return noise_scale(u)[..., None, None] * np.eye(L)

    def g_apply(u, t, w):
        return noise_scale(u)[..., None] * w

    def gu_dot_z(u, t, z):
        tr = np.trace(z, axis1=-2, axis2=-1)
        lead = np.broadcast_shapes(np.shape(u)[:-1], tr.shape)
        out = np.zeros(lead + (p,))
        out[..., ic] = _sigmoid(u[..., ic]) * tr
        return out

    def gu_dot_yw(u, t, y, w):
        tr = np.sum(y * w, axis=-1)
        lead = np.broadcast_shapes(np.shape(u)[:-1], tr.shape)
        out = np.zeros(lead + (p,))
        out[..., ic] = _sigmoid(u[..., ic]) * tr
        return out

    def r(x, u, t):
        return 0.5 * reg * np.sum(u * u, axis=-1) + 0.0 * x[..., 0]

    def r_x(x, u, t):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u)[:-1] + (L,)))

    def r_u(x, u, t):
        return reg * np.broadcast_to(u, np.broadcast_shapes(np.shape(x)[:-1] + (p,), np.shape(u)))

    def readout(x):
        return x[..., : arch.d_out]

    def phi(x, target):
        e = readout(x) - target
        return 0.5 * np.sum(e * e, axis=-1)

    def phi_x(x, target):
        out = np.zeros(np.broadcast_shapes(np.shape(x), np.shape(target)[:-1] + (L,)))
        out[..., : arch.d_out] = readout(x) - target
        return out

    def initial_state(data: DataSample):
        x = np.asarray(data.input, dtype=float)
        pad = [(0, 0)] * (x.ndim - 1) + [(0, L - arch.d_in)]
        return np.pad(x, pad)

    def sample_data(rng, size=None):
        idx = rng.integers(0, len(dataset), size=size)
        return dataset.take(idx)

    return ProblemSpec(
        d=L, p=p, m=L,
        f=f, f_x=f_x, f_u=f_u, g=g, gu_dot_z=gu_dot_z,
        r=r, r_x=r_x, r_u=r_u, phi=phi, phi_x=phi_x,
        initial_state=initial_state, sample_data=sample_data,
        f_x_vjp=f_x_vjp, f_u_vjp=f_u_vjp, g_apply=g_apply, gu_dot_yw=gu_dot_yw,
        name="snn",
        meta={
            "kind": "snn",
            "arch": arch,
            "T": arch.T,
            "dataset": dataset,
            "diffusion_floor": floor,
            "reg": float(reg),
            "readout": readout,
        },
    )


def default_bounds(spec: ProblemSpec):
    """Default admissible box ``(lower, upper)`` as p-vectors."""
    if spec.meta.get("kind") == "snn":
        arch = spec.meta["arch"]
        sl = arch.slices()
        lower = np.full(spec.p, -10.0)
        upper = np.full(spec.p, 10.0)
        lower[sl["a"]], upper[sl["a"]] = -4.5, 4.5
        lower[sl["c"]], upper[sl["c"]] = -np.inf, np.inf
        return lower, upper
    lo = spec.meta.get("lower", -1e6)
    hi = spec.meta.get("upper", 1e6)
    return np.full(spec.p, float(lo)), np.full(spec.p, float(hi))


def initial_control(spec: ProblemSpec, grid: TemporalGrid, seed: int = 0, noise_init: float = 0.05) -> ControlPath:
    """Zero path for LQ; small uniform weights for the SNN with ``g ~ noise_init``."""
    if spec.meta.get("kind") != "snn":
        return ControlPath.zeros(grid, spec.p)
    arch = spec.meta["arch"]
    floor = spec.meta["diffusion_floor"]
    rng = make_rng(seed, 7001)
    u = rng.uniform(-0.5, 0.5, size=(grid.N, spec.p))
    excess = max(noise_init - floor, 1e-8)
    u[:, arch.slices()["c"]] = np.log(np.expm1(excess))
    return ControlPath(grid, u)


# ---------------------------------------------------------------------------
# Derivative checks
# ---------------------------------------------------------------------------


def _fd_jacobian(fun, z0, eps):
    """Central-difference Jacobian of ``fun`` at ``z0``: shape out + (len(z0),)."""
    cols = []
    for j in range(z0.size):
        dz = np.zeros_like(z0)
        dz[j] = eps
        cols.append((np.asarray(fun(z0 + dz)) - np.asarray(fun(z0 - dz))) / (2 * eps))
    return np.stack(cols, axis=-1)


def _rel_err(analytic, fd):
    analytic = np.asarray(analytic, dtype=float)
    fd = np.asarray(fd, dtype=float)
    return float(np.max(np.abs(analytic - fd)) / max(1.0, float(np.max(np.abs(fd)))))


def check_problem_derivatives(
    spec: ProblemSpec, trials: int = 100, tol: float = 1e-6, seed: int = 0, eps: float = 1e-6, raise_on_failure: bool = True
) -> dict:
    """Compare every analytic partial with central finite differences.

    Errors are ``max|analytic - fd| / max(1, max|fd|)``.  Returns the worst
    error per callback; raises :class:`DerivativeInconsistency` naming the
    first callback above ``tol`` unless ``raise_on_failure`` is false.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = make_rng(seed, 9001)
    T = float(spec.meta.get("T", 1.0))
    worst = dict.fromkeys(
        ["f_x", "f_u", "f_x_vjp", "f_u_vjp", "g_apply", "gu_dot_yw", "gu_dot_z", "r_x", "r_u", "phi_x"], 0.0
    )
    for _ in range(trials):
        x = rng.standard_normal(spec.d)
        u = rng.uniform(-1.0, 1.0, spec.p)
        t = float(rng.uniform(0.0, T))
        y = rng.standard_normal(spec.d)
        w = rng.standard_normal(spec.m)
        z = rng.standard_normal((spec.d, spec.m))
        data = spec.sample_data(rng)
        target = data.target

        errs = {
            "f_x": _rel_err(spec.f_x(x, u, t), _fd_jacobian(lambda v: spec.f(v, u, t), x, eps)),
            "f_u": _rel_err(spec.f_u(x, u, t), _fd_jacobian(lambda v: spec.f(x, v, t), u, eps)),
            "r_x": _rel_err(spec.r_x(x, u, t), _fd_jacobian(lambda v: spec.r(v, u, t), x, eps)),
            "r_u": _rel_err(spec.r_u(x, u, t), _fd_jacobian(lambda v: spec.r(x, v, t), u, eps)),
            "phi_x": _rel_err(spec.phi_x(x, target), _fd_jacobian(lambda v: spec.phi(v, target), x, eps)),
            "gu_dot_z": _rel_err(
                spec.gu_dot_z(u, t, z), _fd_jacobian(lambda v: np.sum(spec.g(v, t) * z), u, eps)
            ),
            "f_x_vjp": _rel_err(spec.f_x_vjp(x, u, t, y), spec.f_x(x, u, t).T @ y),
            "f_u_vjp": _rel_err(spec.f_u_vjp(x, u, t, y), spec.f_u(x, u, t).T @ y),
            "g_apply": _rel_err(spec.g_apply(u, t, w), spec.g(u, t) @ w),
            "gu_dot_yw": _rel_err(spec.gu_dot_yw(u, t, y, w), spec.gu_dot_z(u, t, np.outer(y, w))),
        }
        for k, v in errs.items():
            worst[k] = max(worst[k], v)
    if raise_on_failure:
        for k, v in worst.items():
            if not v <= tol:
                raise DerivativeInconsistency(k, v, tol)
    return worst


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def truth_1d(x):
    return np.sin(2 * np.pi * np.asarray(x, dtype=float))


def truth_8d(x):
    x = np.asarray(x, dtype=float)
    x1, x2, x3, x4, x5, x6, x7, x8 = np.moveaxis(x, -1, 0)
    return (
        np.exp(x1) * np.cos(2 * np.pi * x2)
        + 8 * x3 * (x4 - 0.5) ** 2
        + x5
        + np.log(2 + x6)
        + x7**2
        + 2 * x8
    )


class ArrayDataset:
    """In-memory input/target pairs."""

    def __init__(self, inputs, targets):
        inputs = np.asarray(inputs, dtype=float)
        targets = np.asarray(targets, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if targets.ndim == 1:
            targets = targets[:, None]
        if len(inputs) != len(targets):
            raise ValueError("inputs and targets differ in length")
        self.inputs, self.targets = inputs, targets

    def __len__(self):
        return len(self.inputs)

    @property
    def d_in(self):
        return self.inputs.shape[1]

    @property
    def d_out(self):
        return self.targets.shape[1]

    def points(self, idx):
        return self.inputs[idx]

    def take(self, idx) -> DataSample:
        return DataSample(self.inputs[idx], self.targets[idx])


class MeshDataset:
    """Uniform tensor mesh over ``[0, 1]^dim``; points are computed from indices.

    Only the noisy targets are stored (one float per mesh point).
    """

    def __init__(self, points_per_dim: int, dim: int, targets):
        self.points_per_dim = int(points_per_dim)
        self.dim = int(dim)
        self.targets = np.asarray(targets, dtype=float).reshape(-1, 1)
        if len(self.targets) != self.points_per_dim**self.dim:
            raise ValueError("target count does not match mesh size")

    def __len__(self):
        return self.points_per_dim**self.dim

    @property
    def d_in(self):
        return self.dim

    @property
    def d_out(self):
        return 1

    def points(self, idx):
        idx = np.asarray(idx)
        digits = np.stack(np.unravel_index(idx, (self.points_per_dim,) * self.dim), axis=-1)
        return digits / (self.points_per_dim - 1.0)

    def take(self, idx) -> DataSample:
        return DataSample(self.points(idx), self.targets[np.asarray(idx)])


def make_dataset_1d(n: int = 10_000, noise: float = 0.05, seed: int = 0) -> ArrayDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed, 5101)
    x = rng.uniform(0.0, 1.0, size=n)
    y = truth_1d(x) + noise * rng.standard_normal(n)
    return ArrayDataset(x, y)


def make_dataset_8d(points_per_dim: int = 6, noise: float = 0.05, seed: int = 0) -> MeshDataset:
    if points_per_dim < 2:
        raise ValueError("points_per_dim must be >= 2")
    rng = make_rng(seed, 5108)
    size = points_per_dim**8
    probe = MeshDataset(points_per_dim, 8, np.zeros(size))
    targets = np.empty(size)
    chunk = 1 << 18
    for lo in range(0, size, chunk):
        idx = np.arange(lo, min(lo + chunk, size))
        targets[idx] = truth_8d(probe.points(idx))
    targets += noise * rng.standard_normal(size)
    return MeshDataset(points_per_dim, 8, targets)


def save_dataset_csv(dataset, path) -> Path:
    """Write ``x_1..x_{d_in}, y_1..y_{d_out}`` rows atomically."""
    from .io import atomic_writer

    path = Path(path)
    header = [f"x_{i + 1}" for i in range(dataset.d_in)] + [f"y_{i + 1}" for i in range(dataset.d_out)]
    with atomic_writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(header)
        chunk = 1 << 16
        for lo in range(0, len(dataset), chunk):
            idx = np.arange(lo, min(lo + chunk, len(dataset)))
            s = dataset.take(idx)
            for xi, yi in zip(s.input, s.target):
                w.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])
    return path


def load_dataset_csv(path) -> ArrayDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xs = [i for i, h in enumerate(header) if h.startswith("x_")]
    ys = [i for i, h in enumerate(header) if h.startswith("y_")]
    if not xs or not ys or len(xs) + len(ys) != len(header):
        raise ValueError(f"unexpected dataset header {header}")
    data = np.array(body, dtype=float).reshape(len(body), len(header))
    return ArrayDataset(data[:, xs], data[:, ys])
