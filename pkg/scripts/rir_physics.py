"""Sanity statistics of the image-source simulator: arrival timing, RT60 and DRR.

    python3 scripts/rir_physics.py --draws 100
"""
import argparse
import math

import numpy as np
from scipy.stats import spearmanr

from roomtse import room as R


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--draws", type=int, default=100)
    p.add_argument("--drr-rirs", type=int, default=200)
    args = p.parse_args()

    timing, rel = [], []
    for seed in range(args.draws):
        room = R.sample_sim2_room(seed)
        src = R.sample_source_in_band(room, R.distance_bands()[seed % 10], seed)
        if src is None:
            src = R.sample_source_in_band(room, R.DistanceBand(0.2, 2.0), seed)
        h = R.simulate_rir(room, src, seed=seed)
        first = int(np.flatnonzero(np.abs(h.taps) > 1e-9 * np.abs(h.taps).max())[0])
        timing.append(first - math.dist(src, room.mic_pos) / R.SPEED_OF_SOUND * h.rate)
        rel.append(R.estimate_rt60(h) / room.rt60 - 1)
    timing, rel = np.abs(timing), np.array(rel)
    print(f"arrival error: max {timing.max():.2f}, mean {timing.mean():.2f} samples")
    print(f"RT60 error: mean {rel.mean():+.1%}, min {rel.min():+.1%}, max {rel.max():+.1%}")

    room, _ = R.sample_sim1(0)
    d, v = [], []
    for seed in range(args.drr_rirs):
        h = R.simulate_rir(room, R.sample_sim1(seed)[1], seed=seed)
        d.append(h.distance)
        v.append(R.drr(h))
    print(f"Spearman(distance, DRR) over {args.drr_rirs} RIRs: {spearmanr(d, v).statistic:.3f}")
    for lo in np.arange(0.0, 5.0, 1.0):
        sel = [x for dd, x in zip(d, v) if lo < dd <= lo + 1]
        if sel:
            print(f"  {lo:.0f}-{lo + 1:.0f} m: mean DRR {np.mean(sel):6.1f} dB (n={len(sel)})")


if __name__ == "__main__":
    main()
