"""Sample-wise gradients are unbiased.

Compares the Monte-Carlo mean of sample-wise adjoint gradients with a
common-random-numbers finite-difference oracle on a small LQ grid.

    python3 demos/gradient_check.py
"""

import numpy as np

from snnbp.core import ControlPath, make_grid
from snnbp.problems import make_lq_problem
from snnbp.solver import estimate_full_gradient, finite_difference_gradient


def main():
    spec = make_lq_problem()
    grid = make_grid(1.0, 4)
    u = ControlPath(grid, np.full((grid.N, spec.p), 0.5))
    est = estimate_full_gradient(spec, u, 20_000, seed=0)
    fd = finite_difference_gradient(spec, u, 20_000, 1e-4, seed=0)
    se = np.sqrt(est.stderr**2 + fd.stderr**2)
    z = np.abs(est.values - fd.values) / se
    print("row 0 adjoint :", np.round(est.values[0], 4))
    print("row 0 oracle  :", np.round(fd.values[0], 4))
    print(f"largest gap {z.max():.2f} combined standard errors over {z.size} entries")


if __name__ == "__main__":
    main()
