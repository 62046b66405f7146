"""Top-K sweep on the multi-object patch world: OOD accuracy and top-1 locality per k."""

import argparse

from cdelab.harness.config import read_config
from cdelab.harness.runner import AblationGrid, run_ablation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/patch.ini")
    parser.add_argument("--out", default="runs/topk")
    args = parser.parse_args()
    cfg = read_config(args.config)
    res = run_ablation(cfg, AblationGrid("top_k"), args.out)
    print(f"{'k':>4} {'iid':>7} {'ood_comp':>9} {'ood_syst':>9} {'top1_on_target':>15}")
    for row in res.rows:
        reports = res.results[row["point"]].reports.values()
        local = min(min(r["patch_top1_on_target"].values()) for r in reports)
        print(f"{row['point']:>4} {row['iid_mean']:7.3f} {row['ood_comp_mean']:9.3f} {row['ood_syst_mean']:9.3f} {local:15.3f}")


if __name__ == "__main__":
    main()
