"""Small hand-checkable problems for unit tests.

``toy_problem`` has diagonal structure with ``d = p = m``:

    f = drift * u            g = noise * I          (g independent of u)
    r = run * (|u - center|^2 / 2 + quartic * sum(u^4) / 4)
    phi = terminal * |x|^2 / 2,   X_0 = x0
"""

import numpy as np

from snnbp.core import DataSample
from snnbp.problems import ProblemSpec


def toy_problem(d=1, x0=0.0, center=1.0, run=1.0, quartic=0.0, terminal=0.0, drift=0.0, noise=0.0):
    eye = np.eye(d)

    def lead(*arrs):
        return np.broadcast_shapes(*(np.shape(a)[:-1] for a in arrs))

    def f(x, u, t):
        return np.broadcast_to(drift * u, lead(x, u) + (d,))

    def f_x(x, u, t):
        return np.zeros(lead(x, u) + (d, d))

    def f_u(x, u, t):
        return np.broadcast_to(drift * eye, lead(x, u) + (d, d))

    def g(u, t):
        return np.broadcast_to(noise * eye, np.shape(u)[:-1] + (d, d))

    def gu_dot_z(u, t, z):
        return np.zeros(np.broadcast_shapes(np.shape(u)[:-1], np.shape(z)[:-2]) + (d,))

    def r(x, u, t):
        e = u - center
        val = run * (0.5 * np.sum(e * e, axis=-1) + 0.25 * quartic * np.sum(u**4, axis=-1))
        return np.broadcast_to(val, lead(x, u))

    def r_x(x, u, t):
        return np.zeros(lead(x, u) + (d,))

    def r_u(x, u, t):
        return np.broadcast_to(run * ((u - center) + quartic * u**3), lead(x, u) + (d,))

    def phi(x, target):
        return 0.5 * terminal * np.sum(x * x, axis=-1)

    def phi_x(x, target):
        return terminal * x

    def initial_state(data):
        shape = data.input.shape[:-1] if data.input.ndim > 1 else ()
        return np.full(shape + (d,), float(x0))

    def sample_data(rng, size=None):
        shape = () if size is None else tuple(np.atleast_1d(size))
        return DataSample(np.zeros(shape + (0,)), np.zeros(shape + (0,)))

    return ProblemSpec(
        d=d, p=d, m=d,
        f=f, f_x=f_x, f_u=f_u, g=g, gu_dot_z=gu_dot_z,
        r=r, r_x=r_x, r_u=r_u, phi=phi, phi_x=phi_x,
        initial_state=initial_state, sample_data=sample_data,
        name="toy",
        meta={"kind": "toy", "T": 1.0, "deterministic": noise == 0.0},
    )
