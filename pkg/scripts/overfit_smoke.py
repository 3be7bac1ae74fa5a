"""Overfit a tiny extractor on 8 fixed mixtures (6 with a speaker at the query, 2 without).

    python3 scripts/overfit_smoke.py --steps 500 --out runs/smoke
"""
import argparse
import math
import time

import torch

from roomtse import room as R
from roomtse.dataset import MixtureGenerator, SyntheticCorpus, fixed_samples
from roomtse.losses import loss_active
from roomtse.training import TrainConfig, build_model, collate, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--duration", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    args = p.parse_args()

    rirs = [R.simulate_rir(*R.sample_sim1(s), seed=s) for s in range(12)]
    gen = MixtureGenerator(rirs, SyntheticCorpus(8, seed=args.seed), n_speakers=2, duration=args.duration,
                           seed=args.seed)
    data = fixed_samples(gen, 6, 2)
    d = args.dim
    model = build_model(dict(embed_dim=d, rnn_hidden=d, qeg_hidden=(24, d, d), clue_embed_dim=8,
                             n_query_blocks=1, n_basic_blocks=1, standardize_clues=True), seed=args.seed)
    cfg = TrainConfig(lr=args.lr, batch_size=8, epochs=args.steps, max_steps=args.steps, seed=args.seed)
    t0 = time.perf_counter()
    result = train(model, cfg, data, out_dir=args.out, verbose=True)

    batch = collate(model, data)
    with torch.no_grad():
        model.eval()
        est = model(batch["mixture"], batch["clue"])
    active = loss_active(batch["target"][:6], est[:6])
    print(f"{result.steps} steps in {time.perf_counter() - t0:.0f}s")
    print("active loss per sample (dB):", " ".join(f"{v:.2f}" for v in active.tolist()))
    print(f"mean active loss {active.mean().item():.2f} dB (target >= 10)")
    for i, e in enumerate(est[6:]):
        print(f"inactive sample {i}: output RMS {20 * math.log10(e.pow(2).mean().sqrt().item() + 1e-12):.1f} dBFS"
              " (target <= -40)")


if __name__ == "__main__":
    main()
