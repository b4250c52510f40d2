#!/usr/bin/env python3
"""Parameter count, weight memory and real-time factor for each preset."""

import argparse
import json

import numpy as np

from avse import AVSEModel, preset
from avse.harness import REFERENCE_MEMORY_MB, REFERENCE_PARAMS, bench_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--presets", nargs="+", default=["tiny", "paper-128", "paper"])
    ap.add_argument("--duration", type=float, default=1.0)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--chunk", type=float, default=None)
    ap.add_argument("--json", help="also dump all reports to this file")
    args = ap.parse_args()
    reports = {}
    print(f"reference: {REFERENCE_PARAMS / 1e6:.2f}M params, {REFERENCE_MEMORY_MB} MB")
    for name in args.presets:
        rep = bench_model(AVSEModel(preset(name)[0], dtype=np.float32), args.duration, args.reps, 1, args.chunk)
        reports[name] = rep.as_dict()
        line = (f"{name:10s} {rep.param_count:>9d} params ({100 * rep.param_deviation():+6.1f}%)  "
                f"{rep.memory_mb:6.2f} MB  RTF {rep.rtf:.3f}")
        if rep.latency_ms_mean is not None:
            line += f"  chunk {rep.latency_ms_mean:.1f} ms (p95 {rep.latency_ms_p95:.1f})"
        print(line, flush=True)
    if args.json:
        with open(args.json, "w") as f:
            json.dump(reports, f, indent=2)


if __name__ == "__main__":
    main()
