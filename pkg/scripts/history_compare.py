"""Sequential run with and without previous periods' observations.

Prints per-period MSE reduction for both settings and the cumulative
reduction against all observations.
"""
import argparse

import numpy as np

from _case import synthetic_case
from rapidupdate.pipeline import UpdateConfig, cumulative_mse, sequential_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--periods", type=int, default=5)
    ap.add_argument("--n-obs", type=int, default=60)
    ap.add_argument("--assimilations", type=int, default=10)
    args = ap.parse_args()

    model, _, periods = synthetic_case(args.seed, n_periods=args.periods, n_obs=args.n_obs)
    for include in (False, True):
        cfg = UpdateConfig(n_assimilations=args.assimilations, seed=args.seed,
                           include_previous_observations=include)
        final, reports = sequential_run(model, periods, cfg)
        print(f"include_previous_observations={include}")
        for r in reports:
            red = ",".join(f"{v:.2f}" for v in r.mse_reduction_pct)
            print(f"  period {r.period}: merged={r.n_history_merged} reduction%={red}")
        cum = cumulative_mse(model, final, periods)
        print("  cumulative reduction%=" + ",".join(f"{v:.2f}" for v in cum["mse_reduction_pct"]))
        print(f"  mean var_after={np.mean([np.mean(r.var_after) for r in reports]):.4g}")


if __name__ == "__main__":
    main()
