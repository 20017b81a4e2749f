"""Problem-specific training engines used by ``run_sgd_repeats``.

Both engines are numba kernels that walk samples, steps and coordinates
one at a time.  They reproduce the generic numpy engine iterate for iterate
up to rounding (see ``tests/test_kernels.py``).
"""

from __future__ import annotations

import numba
import numpy as np

from .problems import lq_a, lq_xstar


@numba.njit(cache=True)
def _lq_segment(u, w, a, xs, etas, lo, hi, h, sigma):
    """In-place SGD steps on one ``(N, d)`` LQ control; returns (costs, first bad step or -1)."""
    N, d = u.shape
    n_it, B = w.shape[0], w.shape[1]
    Xn = np.zeros((N, d))
    x = np.zeros(d)
    G = np.zeros((N, d))
    costs = np.zeros(n_it)
    for it in range(n_it):
        G[:, :] = 0.0
        csum = 0.0
        for b in range(B):
            x[:] = 0.0
            run = 0.0
            for n in range(N):
                for i in range(d):
                    Xn[n, i] = x[i]
                    e = x[i] - xs[n, i]
                    run += e * e
                    x[i] += h * (u[n, i] - a[n, i]) + sigma * u[n, i] * w[it, b, n, i]
            term = 0.0
            for i in range(d):
                term += x[i] * x[i]
            csum += 0.5 * (h * run + term)
            # x now holds Y_N; walk back carrying Y_{n+1}
            for n in range(N - 1, -1, -1):
                for i in range(d):
                    G[n, i] += x[i] * (1.0 + sigma * w[it, b, n, i] / h)
                    x[i] += h * (Xn[n, i] - xs[n, i])
        usq = 0.0
        finite = True
        for n in range(N):
            for i in range(d):
                usq += u[n, i] * u[n, i]
                G[n, i] = G[n, i] / B + u[n, i]
                if not np.isfinite(G[n, i]):
                    finite = False
        costs[it] = csum / B + 0.5 * h * usq
        if not (finite and np.isfinite(costs[it])):
            return costs, it
        eta = etas[it]
        for n in range(N):
            for i in range(d):
                u[n, i] = min(max(u[n, i] - eta * G[n, i], lo[i]), hi[i])
    return costs, -1


class LqEngine:
    """Discrete-adjoint SGD steps for the LQ benchmark."""

    def __init__(self, spec, grid, bounds):
        self.sigma = float(spec.meta["params"].sigma)
        self.h = grid.h
        t = grid.nodes[:-1]
        self.a = np.ascontiguousarray(lq_a(t, self.sigma))
        self.xs = np.ascontiguousarray(lq_xstar(t, self.sigma))
        self.lo = np.ascontiguousarray(np.broadcast_to(bounds.lower, (spec.p,)), dtype=float)
        self.hi = np.ascontiguousarray(np.broadcast_to(bounds.upper, (spec.p,)), dtype=float)

    def run(self, uv, blocks, i0, etas, active):
        i1 = i0 + len(etas)
        return _run_each(
            uv, active, len(etas),
            lambda r, u: _lq_segment(u, blocks[r][0][i0:i1], self.a, self.xs, etas, self.lo, self.hi, self.h, self.sigma),
        )


def _run_each(uv, active, n_it, step):
    R = uv.shape[0]
    costs = np.zeros((R, n_it))
    bad_at = np.full(R, -1)
    for r in np.flatnonzero(active):
        u = np.ascontiguousarray(uv[r])
        c, bad = step(r, u)
        uv[r] = u
        costs[r] = c
        if bad >= 0:
            bad_at[r] = bad
            costs[r, bad:] = 0.0
    return costs, bad_at


@numba.njit(cache=True)
def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@numba.njit(cache=True)
def _softplus(c):
    return max(c, 0.0) + np.log1p(np.exp(-abs(c)))


@numba.njit(cache=True)
def _snn_segment(u, w, xin, tgt, etas, lo, hi, ns, L, d_in, d_out, h, floor, reg):
    """In-place SGD steps on one ``(N, p)`` control; returns (costs, first bad step or -1)."""
    N, p = u.shape
    n_it, B = w.shape[0], w.shape[1]
    oW, oV = ns, ns + ns * L
    oM, oC = oV + ns, oV + ns + L * ns
    X = np.zeros((N + 1, L))
    S = np.zeros((N, ns))
    Y = np.zeros(L)
    Yn = np.zeros(L)
    q = np.zeros(ns)
    G = np.zeros((N, p))
    costs = np.zeros(n_it)
    for it in range(n_it):
        G[:, :] = 0.0
        csum = 0.0
        for b in range(B):
            X[0, :] = 0.0
            for j in range(d_in):
                X[0, j] = xin[it, b, j]
            for n in range(N):
                gs = floor + _softplus(u[n, oC])
                for j in range(ns):
                    z = u[n, oV + j]
                    for k in range(L):
                        z += u[n, oW + j * L + k] * X[n, k]
                    S[n, j] = _sig(z)
                for i in range(L):
                    acc = 0.0
                    for j in range(ns):
                        acc += u[n, oM + i * ns + j] * u[n, j] * S[n, j]
                    X[n + 1, i] = X[n, i] + h * acc + gs * w[it, b, n, i]
            cost = 0.0
            for i in range(L):
                Y[i] = 0.0
            for i in range(d_out):
                e = X[N, i] - tgt[it, b, i]
                Y[i] = e
                cost += 0.5 * e * e
            csum += cost
            for n in range(N - 1, -1, -1):
                # Y holds Y_{n+1}
                for j in range(ns):
                    acc = 0.0
                    for i in range(L):
                        acc += u[n, oM + i * ns + j] * Y[i]
                    q[j] = acc
                yw = 0.0
                for i in range(L):
                    yw += Y[i] * w[it, b, n, i]
                    Yn[i] = Y[i]
                for j in range(ns):
                    s = S[n, j]
                    qad = q[j] * u[n, j] * s * (1.0 - s)
                    G[n, j] += q[j] * s
                    G[n, oV + j] += qad
                    for k in range(L):
                        G[n, oW + j * L + k] += qad * X[n, k]
                        Yn[k] += h * u[n, oW + j * L + k] * qad
                for i in range(L):
                    for j in range(ns):
                        G[n, oM + i * ns + j] += Y[i] * u[n, j] * S[n, j]
                G[n, oC] += _sig(u[n, oC]) * yw / h
                for i in range(L):
                    Y[i] = Yn[i]
        usq = 0.0
        for n in range(N):
            for k in range(p):
                usq += u[n, k] * u[n, k]
        costs[it] = csum / B + 0.5 * reg * h * usq
        finite = np.isfinite(costs[it])
        for n in range(N):
            for k in range(p):
                if not np.isfinite(G[n, k]):
                    finite = False
        if not finite:
            return costs, it
        eta = etas[it]
        for n in range(N):
            for k in range(p):
                v = u[n, k] - eta * (G[n, k] / B + reg * u[n, k])
                u[n, k] = min(max(v, lo[k]), hi[k])
    return costs, -1


class SnnEngine:
    """Compiled discrete-adjoint SGD steps for the sigmoid SNN."""

    def __init__(self, spec, grid, bounds):
        arch = spec.meta["arch"]
        self.ns, self.L = arch.n_sig, arch.L
        self.d_in, self.d_out = arch.d_in, arch.d_out
        self.h = grid.h
        self.floor = float(spec.meta["diffusion_floor"])
        self.reg = float(spec.meta["reg"])
        p = spec.p
        self.lo = np.ascontiguousarray(np.broadcast_to(bounds.lower, (p,)), dtype=float)
        self.hi = np.ascontiguousarray(np.broadcast_to(bounds.upper, (p,)), dtype=float)

    def run(self, uv, blocks, i0, etas, active):
        i1 = i0 + len(etas)
        return _run_each(
            uv, active, len(etas),
            lambda r, u: _snn_segment(
                u, *(np.ascontiguousarray(a[i0:i1]) for a in blocks[r]),
                etas, self.lo, self.hi, self.ns, self.L, self.d_in, self.d_out, self.h, self.floor, self.reg,
            ),
        )
