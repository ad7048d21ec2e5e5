"""Synthetic vs random calibration over several seeds, printed as a table.

    python3 scripts/run_ablation.py [--seeds 0,1,2,3] [--residual --attention] [--out result.json]
"""

import argparse
import json

from asrq.experiments import AblationConfig, ablation, synthetic_wins
from asrq.model import ToyConfig


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", default="0,1,2,3")
    p.add_argument("--residual", action="store_true")
    p.add_argument("--attention", action="store_true")
    p.add_argument("--out")
    a = p.parse_args()
    toy = ToyConfig(residual=a.residual, attention=a.attention)
    cfg = AblationConfig(seeds=tuple(int(s) for s in a.seeds.split(",")), toy=toy)
    res = ablation(cfg)
    print(f"{'bits':6} {'calibration':11} {'mse':>22} {'token error':>18}")
    for r in sorted(res["summary"], key=lambda r: (-r["bits_w"], r["calibration"])):
        print(f"W{r['bits_w']}A{r['bits_a']:<3} {r['calibration']:11} "
              f"{r['mse_mean']:10.3e} ± {r['mse_std']:9.2e} {r['token_error_mean']:8.3f} ± {r['token_error_std']:.3f}")
    print("synthetic wins on every seed:", synthetic_wins(res))
    if a.out:
        with open(a.out, "w") as f:
            json.dump(res, f, indent=2)


if __name__ == "__main__":
    main()
