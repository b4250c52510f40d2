#!/usr/bin/env python3
"""Ideal-binary-mask ceiling on synthetic mixtures, swept over input SNR."""

import argparse

import numpy as np

from avse import dsp
from avse.separator import oracle_ibm, reconstruct
from avse.training import SynthSpec, synth_item


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=20, help="mixtures per SNR")
    ap.add_argument("--snr", type=float, nargs="+", default=[-10.0, -5.0, 0.0, 5.0])
    ap.add_argument("--noise", default="white", choices=["white", "babble"])
    ap.add_argument("--seed", type=int, default=60)
    args = ap.parse_args()
    p = dsp.StftParams()
    print(f"{'snr_db':>7} {'noisy':>8} {'oracle':>8} {'gain':>7}")
    for snr in args.snr:
        spec = SynthSpec(seed=args.seed, snr_range=(snr, snr), utt_s=2.0, noise=args.noise)
        noisy, enh = [], []
        for i in range(args.n):
            it = synth_item(spec, i)
            out = reconstruct(it["noisy"], oracle_ibm(it["clean"], it["noise"], p), p)
            noisy.append(dsp.si_sdr(it["clean"], it["noisy"]))
            enh.append(dsp.si_sdr(it["clean"], out))
        print(f"{snr:7.1f} {np.mean(noisy):8.2f} {np.mean(enh):8.2f} {np.mean(enh) - np.mean(noisy):7.2f}")


if __name__ == "__main__":
    main()
