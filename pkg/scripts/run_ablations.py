"""Run an ablation grid (components, alpha or top_k) from a config file and print the table."""

import argparse

from cdelab.harness.config import parse_override, read_config
from cdelab.harness.runner import AblationGrid, run_ablation


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/acceptance.ini")
    parser.add_argument("--axis", choices=("components", "alpha", "top_k"), default="components")
    parser.add_argument("--out", default="runs/ablations")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = parser.parse_args()
    overrides: dict = {}
    for text in args.set:
        section, key, value = parse_override(text)
        overrides.setdefault(section, {})[key] = value
    cfg = read_config(args.config, overrides)
    res = run_ablation(cfg, AblationGrid(args.axis), args.out)
    print(res.table_path.read_text(), end="")
    print(res.table_path)


if __name__ == "__main__":
    main()
