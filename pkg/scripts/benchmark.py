"""Wall time of one assimilation at production size and of an RBIG fit."""
import argparse
import time

import numpy as np

from rapidupdate.enkf import AssimilationState, LocalizationSpec, assimilate_once, localization_weights
from rapidupdate.grid import GridSpec
from rapidupdate.rbig import rbig_fit_forward


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-real", type=int, default=100)
    ap.add_argument("--side", type=int, default=125, help="grid is side x side x 1")
    ap.add_argument("--n-obs", type=int, default=900)
    ap.add_argument("--rbig-rows", type=int, default=200_000)
    ap.add_argument("--rbig-vars", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    grid = GridSpec(args.side, args.side, 1, 10.0, 10.0, 4.0)
    pos = np.sort(rng.choice(grid.n_blocks, args.n_obs, replace=False))
    state = AssimilationState(rng.standard_normal((args.n_real, grid.n_blocks)),
                              rng.standard_normal(args.n_obs), pos, 0.01, grid.centres())
    t0 = time.perf_counter()
    w = localization_weights(state.block_xyz, state.obs_xyz, LocalizationSpec(30.0))
    assimilate_once(state, 10.0, *w, seed=(args.seed, 1, 0))
    print(f"assimilation {args.n_real} x {grid.n_blocks} blocks x {args.n_obs} obs: "
          f"{time.perf_counter() - t0:.2f}s")

    mix = rng.normal(size=(args.rbig_vars, args.rbig_vars))
    x = np.exp(rng.standard_normal((args.rbig_rows, args.rbig_vars)) @ mix * 0.5)
    t0 = time.perf_counter()
    rbig_fit_forward(x, 10)
    print(f"RBIG fit {args.rbig_rows} x {args.rbig_vars}, 10 iterations: "
          f"{time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
