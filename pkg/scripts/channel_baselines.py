#!/usr/bin/env python3
"""Print LS and LMMSE channel-estimation MSE against SNR.

Monte-Carlo over fresh channel draws at each SNR point. The LS column at
pilot positions should track the noise variance; the interpolated full-grid
column and the LMMSE column show what time interpolation and second-order
statistics buy on top.
"""

import argparse

import numpy as np

from wavesfm.channel import (OfdmConfig, estimate_covariances, gen_mimo_ofdm,
                             interpolate_pilots, lmmse_estimate, ls_estimate)
from wavesfm.metrics import grid_mse
from wavesfm.rng import RngState


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--draws", type=int, default=1000,
                    help="channel realizations per SNR point")
    ap.add_argument("--cov-draws", type=int, default=2000,
                    help="realizations for covariance estimation")
    ap.add_argument("--snrs", type=float, nargs="+",
                    default=[-10, -5, 0, 5, 10, 15, 20])
    ap.add_argument("--subcarriers", type=int, default=64)
    ap.add_argument("--antennas", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = OfdmConfig(n_subcarriers=args.subcarriers,
                     n_rx_antennas=args.antennas)
    rng = RngState(args.seed)
    rf, rt = estimate_covariances(cfg, rng.split("cov"),
                                  n_draws=args.cov_draws)

    print(f"{'snr_db':>7} {'sigma2':>9} {'ls_pilot':>9} {'ls_full':>9} "
          f"{'lmmse':>9}")
    for snr in args.snrs:
        sigma2 = 10.0 ** (-snr / 10.0)
        pilot_mse, full_mse, lmmse_mse = [], [], []
        srng = rng.split("snr", int(round(snr * 10)))
        for i in range(args.draws):
            tx, rx, chan = gen_mimo_ofdm(cfg, srng.split(i), snr_db=snr)
            pilots, est = ls_estimate(tx, rx)
            pilot_mse.append(np.mean(np.abs(est - chan.h[:, pilots, :]) ** 2))
            full = interpolate_pilots(est, pilots, cfg.n_symbols)
            full_mse.append(grid_mse(full, chan.h))
            lmmse_mse.append(grid_mse(
                lmmse_estimate(est, pilots, rf, rt, sigma2), chan.h))
        print(f"{snr:>7.1f} {sigma2:>9.4f} {np.mean(pilot_mse):>9.4f} "
              f"{np.mean(full_mse):>9.4f} {np.mean(lmmse_mse):>9.4f}")


if __name__ == "__main__":
    main()
