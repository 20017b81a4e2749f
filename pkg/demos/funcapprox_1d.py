"""1-D regression with an uncertainty band.

Trains the 8 layer x 4 neuron network on noisy samples of sin(2 pi x) and
prints the mean curve and 95% band at a few points.  The default K is far
below the acceptance run, so expect a rough fit; pass K as an argument.

    python3 demos/funcapprox_1d.py [K]
"""

import sys

from snnbp.experiments import FuncApproxConfig, run_funcapprox_1d
from snnbp.problems import SnnArch


def main(K=100_000):
    cfg = FuncApproxConfig(grid_points=11, band_M=400)
    band = run_funcapprox_1d(SnnArch(L=4, N_layers=8), K, cfg).band
    print(f"{'x':>5} {'mean':>8} {'band':>7} {'truth':>8}")
    for x, m, hw, t in zip(band.points[:, 0], band.mean[:, 0], band.half_width[:, 0], band.truth_mean[:, 0]):
        print(f"{x:5.2f} {m:8.3f} {hw:7.3f} {t:8.3f}")
    print(f"RMSE {band.rmse:.3f}, interior half-width {band.interior_half_width:.3f} (truth 0.098)")


if __name__ == "__main__":
    main(int(float(sys.argv[1])) if len(sys.argv) > 1 else 100_000)
