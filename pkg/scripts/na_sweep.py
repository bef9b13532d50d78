"""MSE reduction in period 1 as a function of the number of assimilations.

Prints one row per assimilation count with the median reduction over seeds
for every variable, plus the mean wall time per update.
"""
import argparse
import time

import numpy as np

from _case import synthetic_case
from rapidupdate.pipeline import UpdateConfig, update_period


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--counts", default="1,2,3,4,5,6,7,8,9,10")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--n-vars", type=int, default=3)
    ap.add_argument("--n-obs", type=int, default=100)
    ap.add_argument("--relative-error", type=float, default=0.1)
    args = ap.parse_args()
    counts = [int(c) for c in args.counts.split(",")]

    red = {n: [] for n in counts}
    secs = {n: [] for n in counts}
    names = None
    for seed in range(args.seeds):
        model, _, periods = synthetic_case(seed, n_obs=args.n_obs, n_vars=args.n_vars,
                                           rel_err=args.relative_error)
        names = model.variable_names
        for n in counts:
            t0 = time.perf_counter()
            _, rep = update_period(model, periods[0], [], UpdateConfig(n_assimilations=n, seed=seed))
            secs[n].append(time.perf_counter() - t0)
            red[n].append(rep.mse_reduction_pct)

    print("n_assimilations," + ",".join(names) + ",seconds")
    for n in counts:
        med = np.median(red[n], axis=0)
        print(f"{n}," + ",".join(f"{v:.3f}" for v in med) + f",{np.mean(secs[n]):.2f}")


if __name__ == "__main__":
    main()
