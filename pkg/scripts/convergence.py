"""Loss trajectories of synthetic batch generation on a toy model.

    python3 scripts/convergence.py [--iters 250] [--batches 20]
"""

import argparse

import numpy as np

from asrq.experiments import trained_toy
from asrq.model import ToyConfig
from asrq.zeroshot import GenConfig, generate


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--iters", type=int, default=250)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    model = trained_toy(ToyConfig(), a.seed)
    batches = generate(model, GenConfig(iters=a.iters, num_batches=a.batches, seed=a.seed))
    hist = np.array([b.loss_history for b in batches if b.ok])
    steps = sorted({0, 10, 25, 50, 100, 150, 200, a.iters} & set(range(a.iters + 1)))
    print(f"{'step':>5} {'median':>12} {'max':>12}")
    for s in steps:
        print(f"{s:5d} {np.median(hist[:, s]):12.4e} {hist[:, s].max():12.4e}")
    ratio = np.array([b.final_loss / b.initial_loss for b in batches if b.ok])
    print(f"final/initial: median {np.median(ratio):.4f}, worst {ratio.max():.4f}; failed {sum(not b.ok for b in batches)}")


if __name__ == "__main__":
    main()
