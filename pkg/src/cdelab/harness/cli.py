"""Command line entry point: ``cdelab {generate,train,eval,run,ablate,report}``.

Every config key can be overridden with ``--set section.key=value`` (repeatable).
The output root defaults to $CDELAB_OUTPUT, else ``runs``.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from ..evalsuite import EvalError, evaluate
from ..losses import LossError
from ..model import ModelError, init_model, train
from ..world import ConfigError, SplitError, load_dataset, make_splits, save_dataset
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, default_config, parse_override, read_config, write_config
from .heatmap import emit_heatmap
from .runner import AblationGrid, StageError, aggregate_rows, run_ablation, run_experiment

OUTPUT_ENV = "CDELAB_OUTPUT"
CONFIG_ERRORS = (ConfigError, ModelError, LossError, SplitError, CheckpointError)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def load_experiment(args) -> ExperimentConfig:
    overrides: dict[str, dict[str, str]] = {}
    for text in args.set or []:
        section, key, value = parse_override(text)
        overrides.setdefault(section, {})[key] = value
    if args.config:
        cfg = read_config(args.config, overrides)
    else:
        cfg = default_config().with_overrides(overrides)
    if args.out:
        cfg = replace(cfg, output_dir=str(args.out))
    elif not Path(cfg.output_dir).is_absolute():
        cfg = replace(cfg, output_dir=str(output_root() / cfg.name))
    return cfg


def cmd_generate(args) -> int:
    cfg = load_experiment(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    out = Path(cfg.output_dir) / "data" / f"seed_{seed}"
    save_dataset(make_splits(cfg.seed_world(seed)), out)
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = load_experiment(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    data = load_dataset(args.data) if args.data else make_splits(cfg.seed_world(seed))
    hyper = replace(cfg.train, seed=seed)
    result = train(init_model(cfg.encoder, seed), data, hyper)
    path = save_checkpoint(result.model, Path(cfg.output_dir) / f"seed_{seed}" / "model.ckpt", seed, hyper.epochs, result.loss_trace)
    print(path)
    return 0


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    report = evaluate(model, data)
    text = json.dumps({"seed": header["seed"], "metrics": report.to_dict()}, indent=1, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return 0


def cmd_run(args) -> int:
    cfg = load_experiment(args)
    res = run_experiment(cfg)
    acc = res.aggregate["metrics"]["accuracy"]
    for split in ("iid_test", "ood_compositional", "ood_systematic"):
        print(f"{split:18s} {acc[split]['mean']:.3f} +- {acc[split]['std']:.3f}")
    print(res.output_dir)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_experiment(args)
    values: tuple = ()
    if args.values:
        if args.axis == "alpha":
            values = tuple(tuple(float(x) for x in v.split(":")) for v in args.values)
        elif args.axis == "top_k":
            values = tuple(int(v) for v in args.values)
        else:
            values = tuple(args.values)
    res = run_ablation(cfg, AblationGrid(args.axis, values))
    print(res.table_path.read_text(), end="")
    return 0 if all(r["status"] == "ok" for r in res.rows) else 2


def cmd_report(args) -> int:
    run = Path(args.run)
    reports = sorted(run.glob("seed_*/report.json"))
    if not reports:
        raise StageError("report", None, FileNotFoundError(f"no seed reports under {run}"))
    rows = []
    for path in reports:
        rep = json.loads(path.read_text())
        m = rep["metrics"]
        for split, v in m["accuracy"].items():
            rows.append(("accuracy", split, rep["seed"], v))
        for split, v in m["transfer_similarity"].items():
            rows.append(("transfer_similarity", split, rep["seed"], v))
        for split, v in m["knn_accuracy"].items():
            rows.append(("knn_accuracy", split, rep["seed"], v))
        names = rep["config"]["world"]["action_names"]
        sim = [[float("nan") if x is None else x for x in row] for row in m["prototype_similarity"]]
        emit_heatmap(sim, path.parent / "prototype_similarity.ppm", names)
    agg = aggregate_rows(rows)
    (run / "summary.json").write_text(json.dumps(agg, indent=1, sort_keys=True) + "\n")
    print(json.dumps(agg["metrics"].get("accuracy", {}), indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdelab", description="Causal delta embedding laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/<name>)")
        if seed:
            p.add_argument("--seed", type=int, help="run seed (default: first configured seed)")

    p = sub.add_parser("generate", help="generate and save a dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one seed and save a checkpoint")
    common(p)
    p.add_argument("--data", help="dataset directory (default: generate in memory)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a saved dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="multi-seed experiment with aggregate report")
    common(p, seed=False)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="ablation grid sharing datasets across points")
    common(p, seed=False)
    p.add_argument("--axis", choices=("components", "alpha", "top_k"), default="components")
    p.add_argument("--values", nargs="*", help="grid values (alpha as contrast:sparsity)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate seed reports and redraw heatmaps")
    p.add_argument("run", help="experiment output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dump-config", help="print the effective config as INI")
    common(p, seed=False)
    p.set_defaults(func=lambda a: print(write_config(load_experiment(a)), end="") or 0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except CONFIG_ERRORS as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except StageError as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2
    except (EvalError, OSError, RuntimeError, ValueError) as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
