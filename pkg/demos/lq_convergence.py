"""LQ benchmark: projected SGD against the closed-form optimal control.

Trains from zero on a short N sweep with K = 0.2 N^2 and prints the RMSE
against u*_N and the fitted log-log slope (about -0.5 at full scale).

    python3 demos/lq_convergence.py
"""

from snnbp.experiments import LqStudyConfig, run_lq_convergence_in_N


def main():
    cfg = LqStudyConfig(N_list=(20, 40, 60), repeats=8, seed=1)
    rep = run_lq_convergence_in_N(cfg)
    print(f"{'N':>4} {'K':>6} {'RMSE':>8} {'SE':>8}")
    for row in rep.rows:
        print(f"{row.N:>4} {row.K:>6} {row.rmse:8.4f} {row.stderr:8.4f}")
    print(f"fitted slope {rep.slope:.3f}")


if __name__ == "__main__":
    main()
