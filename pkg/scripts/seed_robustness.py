"""Full model vs CE-only on many world seeds: how stable is the OOD margin?

The acceptance run averages seeds 0-2. This script widens the seed list to
show the spread of the systematic-OOD margin.
"""

import argparse

import numpy as np

from cdelab.harness.config import read_config
from cdelab.harness.runner import AblationGrid, run_ablation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/acceptance.ini")
    parser.add_argument("--seeds", type=int, default=8)
    parser.add_argument("--out", default="runs/seed_robustness")
    args = parser.parse_args()
    cfg = read_config(args.config, {"experiment": {"seeds": ", ".join(str(s) for s in range(args.seeds))}})
    res = run_ablation(cfg, AblationGrid("components", ("full", "ce_only")), args.out)
    full, ce = (res.results[p].reports for p in ("full", "ce_only"))
    margins = []
    for seed in cfg.seeds:
        f = full[seed]["metrics"]["accuracy"]["ood_systematic"]
        c = ce[seed]["metrics"]["accuracy"]["ood_systematic"]
        margins.append(f - c)
        print(f"seed {seed}: full {f:.3f}  ce_only {c:.3f}  margin {f - c:+.3f}")
    print(f"mean margin {np.mean(margins):+.3f}  std {np.std(margins, ddof=1):.3f}")


if __name__ == "__main__":
    main()
