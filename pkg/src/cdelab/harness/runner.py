"""Multi-seed experiments and ablation grids.

Layout under an experiment's output directory::

    config.ini
    seed_<s>/report.json     metrics, loss trace, dataset hash (no timings)
    seed_<s>/metrics.csv     metric,split,seed,value
    seed_<s>/model.ckpt
    seed_<s>/prototype_similarity.ppm (+ .json legend)
    metrics.csv              all seeds
    aggregate.json / aggregate.csv   mean and unbiased std per metric
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..evalsuite import evaluate, patch_selection_precision
from ..model import init_model, predict, train
from ..world import DatasetSplit, dataset_digest, make_splits, stack_pairs
from .checkpoint import save_checkpoint
from .config import ConfigFileError, ExperimentConfig, write_config
from .heatmap import emit_heatmap

COMPONENTS = {
    "full": (None, None),
    "no_contrast": (0.0, None),
    "no_sparsity": (None, 0.0),
    "ce_only": (0.0, 0.0),
}
# alpha rows of the reference ablation
ALPHA_GRID = ((0.0, 0.0), (0.1, 1.0), (1.0, 0.1), (0.5, 0.5), (1.0, 2.0), (2.0, 1.0))


class StageError(RuntimeError):
    def __init__(self, stage: str, seed: int | None, cause: BaseException):
        where = f" (seed {seed})" if seed is not None else ""
        super().__init__(f"stage '{stage}' failed{where}: {cause}")
        self.stage, self.seed, self.cause = stage, seed, cause


@dataclass
class ExperimentResult:
    output_dir: Path
    reports: dict[int, dict]
    aggregate: dict


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _clean(value):
    """Replace non-finite floats by None so reports stay strict JSON."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def generate_datasets(config: ExperimentConfig) -> dict[int, DatasetSplit]:
    return {seed: make_splits(config.seed_world(seed)) for seed in config.seeds}


def run_seed(config: ExperimentConfig, seed: int, data: DatasetSplit, out: Path | None) -> dict:
    """Train and evaluate one seed; writes the seed directory when ``out`` is given."""
    stage = "train"
    try:
        hyper = replace(config.train, seed=seed)
        result = train(init_model(config.encoder, seed), data, hyper)
        stage = "evaluate"
        metrics = evaluate(result.model, data)
        extras = {}
        if config.encoder.patch:
            for name in ("iid_test", "ood_compositional", "ood_systematic"):
                pairs = data.split(name)
                sel = predict(result.model, pairs).selected
                extras[name] = patch_selection_precision(
                    sel[:, 0], stack_pairs(pairs)[3], config.world.patch_grid, config.world.num_objects
                )
        report = {
            "name": config.name,
            "seed": seed,
            "world_seed": data.config.seed,
            "manifest_hash": dataset_digest(data),
            "config": config.to_dict(),
            "loss_trace": result.loss_trace,
            "loss_components": result.component_trace[-1],
            "metrics": metrics.to_dict(),
            "patch_top1_on_target": extras,
        }
        report = _clean(report)
        if out is not None:
            stage = "write"
            d = out / f"seed_{seed}"
            d.mkdir(parents=True, exist_ok=True)
            _dump_json(report, d / "report.json")
            rows = [(m, s, seed, v) for m, s, v in metrics.scalar_rows()]
            (d / "metrics.csv").write_text(_csv_text(("metric", "split", "seed", "value"), rows))
            save_checkpoint(result.model, d / "model.ckpt", seed, hyper.epochs, result.loss_trace)
            emit_heatmap(metrics.prototype_similarity, d / "prototype_similarity.ppm", config.world.action_names)
        report["_rows"] = [(m, s, seed, v) for m, s, v in metrics.scalar_rows()]
        return report
    except StageError:
        raise
    except Exception as err:
        raise StageError(stage, seed, err) from err


def aggregate_rows(rows: Sequence[tuple[str, str, int, float]]) -> dict:
    """mean / unbiased std per (metric, split); a single seed reports std 0 with a flag."""
    grouped: dict[tuple[str, str], list[float]] = {}
    for metric, split, _, value in rows:
        grouped.setdefault((metric, split), []).append(value)
    out: dict = {"metrics": {}, "flags": []}
    for (metric, split), values in sorted(grouped.items()):
        vals = np.array([np.nan if v is None else v for v in values], dtype=float)
        n = len(vals)
        mean = float(vals.mean())
        std = float(vals.std(ddof=1)) if n > 1 else 0.0
        out["metrics"].setdefault(metric, {})[split] = {
            "mean": mean,
            "std": std,
            "n": n,
            "values": [float(v) for v in vals],
        }
    if rows and len({r[2] for r in rows}) == 1:
        out["flags"].append("single seed: std reported as 0")
    return _clean(out)


def write_aggregate(rows, out: Path) -> dict:
    agg = aggregate_rows(rows)
    _dump_json(agg, out / "aggregate.json")
    flat = [
        (metric, split, entry["mean"], entry["std"], entry["n"])
        for metric, splits in agg["metrics"].items()
        for split, entry in splits.items()
    ]
    (out / "aggregate.csv").write_text(_csv_text(("metric", "split", "mean", "std", "n"), flat))
    (out / "metrics.csv").write_text(_csv_text(("metric", "split", "seed", "value"), rows))
    return agg


def run_experiment(
    config: ExperimentConfig,
    datasets: dict[int, DatasetSplit] | None = None,
    output_dir: str | Path | None = None,
) -> ExperimentResult:
    out = Path(output_dir if output_dir is not None else config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_config(config, out / "config.ini")
    except OSError as err:
        raise StageError("setup", None, err) from err
    reports, rows = {}, []
    for seed in config.seeds:
        if datasets is not None and seed in datasets:
            data = datasets[seed]
        else:
            try:
                data = make_splits(config.seed_world(seed))
            except Exception as err:
                raise StageError("generate", seed, err) from err
        report = run_seed(config, seed, data, out)
        rows += report.pop("_rows")
        reports[seed] = report
    agg = write_aggregate(rows, out)
    return ExperimentResult(out, reports, agg)


# ---------------------------------------------------------------- ablations


@dataclass(frozen=True)
class AblationGrid:
    axis: str  # components | alpha | top_k
    values: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.axis not in ("components", "alpha", "top_k"):
            raise ConfigFileError(f"unknown ablation axis {self.axis!r}")
        values = tuple(self.values) or {"components": tuple(COMPONENTS), "alpha": ALPHA_GRID, "top_k": (1, 2, 3, 4)}[
            self.axis
        ]
        if self.axis == "components":
            bad = [v for v in values if v not in COMPONENTS]
            if bad:
                raise ConfigFileError(f"unknown component settings {bad}")
        elif self.axis == "alpha":
            values = tuple((float(a), float(b)) for a, b in values)
            if any(a < 0 or b < 0 for a, b in values):
                raise ConfigFileError("alpha values must be >= 0")
        else:
            values = tuple(int(k) for k in values)
            if any(k < 1 for k in values):
                raise ConfigFileError("top_k values must be >= 1")
        object.__setattr__(self, "values", values)

    def label(self, value) -> str:
        if self.axis == "components":
            return value
        if self.axis == "alpha":
            return f"contrast={value[0]:g},sparsity={value[1]:g}"
        return f"k={value}"

    def apply(self, base: ExperimentConfig, value) -> ExperimentConfig:
        if self.axis == "components":
            ac, asp = COMPONENTS[value]
            hyper = replace(
                base.train,
                alpha_contrast=base.train.alpha_contrast if ac is None else ac,
                alpha_sparsity=base.train.alpha_sparsity if asp is None else asp,
            )
            return replace(base, train=hyper)
        if self.axis == "alpha":
            return replace(base, train=replace(base.train, alpha_contrast=value[0], alpha_sparsity=value[1]))
        if not base.encoder.patch:
            raise ConfigFileError("top_k ablation needs a patch world (patch_grid > 0)")
        if value > base.encoder.num_patches:
            raise ConfigFileError(f"top_k={value} exceeds the patch count {base.encoder.num_patches}")
        return replace(base, encoder=replace(base.encoder, top_k=value))


@dataclass
class AblationResult:
    table_path: Path
    rows: list[dict]
    results: dict[str, ExperimentResult]


ABLATION_HEADER = (
    "point",
    "status",
    "iid_mean",
    "iid_std",
    "ood_comp_mean",
    "ood_comp_std",
    "ood_syst_mean",
    "ood_syst_std",
    "manifest_hash",
)


def run_ablation(
    base: ExperimentConfig, grid: AblationGrid, output_dir: str | Path | None = None
) -> AblationResult:
    """One experiment per grid point; every point reuses the same datasets."""
    out = Path(output_dir if output_dir is not None else base.output_dir) / f"ablation_{grid.axis}"
    out.mkdir(parents=True, exist_ok=True)
    points = [(grid.label(v), grid.apply(base, v)) for v in grid.values]
    try:
        datasets = generate_datasets(base)
    except Exception as err:
        raise StageError("generate", None, err) from err
    rows, results = [], {}
    for label, cfg in points:
        safe = label.replace("=", "").replace(",", "_")
        try:
            res = run_experiment(cfg, datasets, out / safe)
        except StageError as err:
            rows.append({"point": label, "status": f"failed: {err}"})
            continue
        results[label] = res
        acc = res.aggregate["metrics"]["accuracy"]
        hashes = sorted({r["manifest_hash"] for r in res.reports.values()})
        rows.append(
            {
                "point": label,
                "status": "ok",
                "iid_mean": acc["iid_test"]["mean"],
                "iid_std": acc["iid_test"]["std"],
                "ood_comp_mean": acc["ood_compositional"]["mean"],
                "ood_comp_std": acc["ood_compositional"]["std"],
                "ood_syst_mean": acc["ood_systematic"]["mean"],
                "ood_syst_std": acc["ood_systematic"]["std"],
                "manifest_hash": ";".join(hashes),
            }
        )
    table = out / "ablation.csv"
    table.write_text(_csv_text(ABLATION_HEADER, [[r.get(k, "") for k in ABLATION_HEADER] for r in rows]))
    return AblationResult(table, rows, results)
