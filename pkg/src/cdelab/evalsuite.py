"""Accuracy, prototype geometry, prototype transfer, k-NN and invariance metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import CdeModel, ForwardOut, predict
from .world import DatasetSplit, InterventionPair, stack_pairs


class EvalError(ValueError):
    pass


@dataclass
class PrototypeTable:
    """Per-action mean delta; rows of absent actions are NaN and listed in ``missing``."""

    means: np.ndarray  # (A, l)
    counts: np.ndarray  # (A,)
    missing: list[int] = field(default_factory=list)

    @property
    def num_actions(self) -> int:
        return self.means.shape[0]


@dataclass
class MetricsReport:
    iid_accuracy: float
    ood_comp_accuracy: float
    ood_syst_accuracy: float
    gap_comp: float
    gap_syst: float
    prototype_similarity: np.ndarray
    transfer_similarity: dict[str, float]
    knn_accuracy: dict[str, float]
    delta_variance: np.ndarray
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": {
                "iid_test": self.iid_accuracy,
                "ood_compositional": self.ood_comp_accuracy,
                "ood_systematic": self.ood_syst_accuracy,
            },
            "gap": {"ood_compositional": self.gap_comp, "ood_systematic": self.gap_syst},
            "prototype_similarity": _nan_to_none(self.prototype_similarity),
            "transfer_similarity": dict(self.transfer_similarity),
            "knn_accuracy": dict(self.knn_accuracy),
            "delta_variance": _nan_to_none(self.delta_variance),
            "flags": list(self.flags),
        }

    def scalar_rows(self) -> list[tuple[str, str, float]]:
        """(metric, split, value) rows for the flat CSV."""
        rows = [
            ("accuracy", "iid_test", self.iid_accuracy),
            ("accuracy", "ood_compositional", self.ood_comp_accuracy),
            ("accuracy", "ood_systematic", self.ood_syst_accuracy),
            ("gap", "ood_compositional", self.gap_comp),
            ("gap", "ood_systematic", self.gap_syst),
        ]
        rows += [("transfer_similarity", k, v) for k, v in self.transfer_similarity.items()]
        rows += [("knn_accuracy", k, v) for k, v in self.knn_accuracy.items()]
        rows += [(f"delta_variance[{a}]", "iid_test", float(v)) for a, v in enumerate(self.delta_variance)]
        return rows


def _nan_to_none(arr: np.ndarray):
    return np.where(np.isnan(arr), None, arr).tolist()


# ---------------------------------------------------------------- accuracy


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    logits, labels = np.asarray(logits), np.asarray(labels)
    if labels.size == 0:
        raise EvalError("accuracy of an empty split")
    # np.argmax returns the first maximum, i.e. the lowest action index on ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def accuracy(model: CdeModel, pairs: Sequence[InterventionPair]) -> float:
    if not pairs:
        raise EvalError("accuracy of an empty split")
    out = predict(model, pairs)
    return accuracy_from_logits(out.logits.data, stack_pairs(pairs)[2])


def generalization_gap(iid: float, ood: float) -> float:
    for v in (iid, ood):
        if not 0.0 <= v <= 1.0:
            raise EvalError(f"accuracy {v} outside [0, 1]")
    return iid - ood


# ---------------------------------------------------------------- prototypes


def compute_prototypes(deltas: np.ndarray, labels: np.ndarray, num_actions: int) -> PrototypeTable:
    deltas, labels = np.asarray(deltas, dtype=np.float64), np.asarray(labels, dtype=int)
    if deltas.ndim != 2 or labels.shape != (deltas.shape[0],):
        raise EvalError(f"deltas {deltas.shape} and labels {labels.shape} disagree")
    means = np.full((num_actions, deltas.shape[1]), np.nan)
    counts = np.bincount(labels, minlength=num_actions)[:num_actions]
    for a in range(num_actions):
        if counts[a]:
            means[a] = deltas[labels == a].mean(axis=0)
    missing = [a for a in range(num_actions) if counts[a] == 0]
    return PrototypeTable(means, counts, missing)


def prototype_similarity_matrix(table: PrototypeTable) -> np.ndarray:
    """Exact pairwise cosine; NaN where a prototype is missing or has zero norm."""
    norms = np.linalg.norm(table.means, axis=1)
    ok = np.isfinite(norms) & (norms > 0)
    if not ok.any():
        raise EvalError("no usable prototype")
    unit = np.where(ok[:, None], table.means / np.where(ok, norms, 1.0)[:, None], np.nan)
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2.0
    idx = np.flatnonzero(ok)
    sim[idx, idx] = 1.0
    return sim


def _cos_rows(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return (a * b).sum(axis=1) / ((np.linalg.norm(a, axis=1) + eps) * (np.linalg.norm(b, axis=1) + eps))


def transfer_similarity_from(z: np.ndarray, z_tilde: np.ndarray, labels: np.ndarray, table: PrototypeTable) -> float:
    """Mean of cos(z + mu_a, z_tilde) over pairs (epsilon-guarded)."""
    labels = np.asarray(labels, dtype=int)
    absent = sorted({int(a) for a in labels if a in table.missing})
    if absent:
        raise EvalError(f"no prototype for actions {absent}")
    pred = np.asarray(z) + table.means[labels]
    sims = _cos_rows(pred, np.asarray(z_tilde))
    # identical vectors (including two zero vectors) count as a perfect transfer
    sims[np.all(pred == z_tilde, axis=1)] = 1.0
    return float(sims.mean())


def selected_encodings(out: ForwardOut) -> tuple[np.ndarray, np.ndarray]:
    """Global encodings, or the mean encoding of the selected patches for the patch model."""
    if out.selected is None:
        return out.z.data, out.z_tilde.data
    rows = np.arange(out.selected.shape[0])[:, None]
    return out.z.data[rows, out.selected].mean(axis=1), out.z_tilde.data[rows, out.selected].mean(axis=1)


def transfer_similarity(model: CdeModel, pairs: Sequence[InterventionPair], table: PrototypeTable) -> float:
    out = predict(model, pairs)
    z, zt = selected_encodings(out)
    return transfer_similarity_from(z, zt, stack_pairs(pairs)[2], table)


def patch_selection_precision(top1: np.ndarray, objects: np.ndarray, num_patches: int, num_objects: int) -> float:
    """Fraction of pairs whose top-1 patch belongs to the intervened object.

    Patches are assigned to objects in contiguous equal blocks.
    """
    top1, objects = np.asarray(top1, dtype=int), np.asarray(objects, dtype=int)
    if top1.size == 0:
        raise EvalError("no pairs")
    owner = top1 // (num_patches // num_objects)
    return float(np.mean(owner == objects))


# ---------------------------------------------------------------- k-NN and variance


def knn_classify(
    train_deltas: np.ndarray,
    train_labels: np.ndarray,
    query_deltas: np.ndarray,
    k: int = 5,
    query_labels: np.ndarray | None = None,
    metric: str = "euclidean",
    chunk: int = 128,
) -> tuple[np.ndarray, float | None]:
    """Brute-force k-NN vote. Distance ties go to the lower training index,
    vote ties to the lower action index. Returns predictions and accuracy
    (None without query labels)."""
    train = np.asarray(train_deltas, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=int)
    query = np.asarray(query_deltas, dtype=np.float64)
    if train.shape[0] == 0:
        raise EvalError("k-NN needs a non-empty training set")
    if not 1 <= k <= train.shape[0]:
        raise EvalError(f"k={k} outside [1, {train.shape[0]}]")
    if metric == "cosine":
        train = train / (np.linalg.norm(train, axis=1, keepdims=True) + 1e-12)
        query = query / (np.linalg.norm(query, axis=1, keepdims=True) + 1e-12)
    elif metric != "euclidean":
        raise EvalError(f"unknown metric {metric!r}")
    A = int(labels.max()) + 1
    preds = np.empty(query.shape[0], dtype=int)
    for start in range(0, query.shape[0], chunk):
        q = query[start : start + chunk]
        dist = ((q[:, None, :] - train[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        for i, row in enumerate(nearest):
            preds[start + i] = int(np.argmax(np.bincount(labels[row], minlength=A)))
    acc = None
    if query_labels is not None:
        acc = float(np.mean(preds == np.asarray(query_labels, dtype=int)))
    return preds, acc


def delta_variance(deltas: np.ndarray, labels: np.ndarray, num_actions: int) -> tuple[np.ndarray, list[int]]:
    """Per action: mean over coordinates of the unbiased per-coordinate variance.

    Actions with fewer than two samples are NaN and returned in the flag list.
    """
    deltas, labels = np.asarray(deltas, dtype=np.float64), np.asarray(labels, dtype=int)
    out = np.full(num_actions, np.nan)
    flagged = []
    for a in range(num_actions):
        rows = deltas[labels == a]
        if rows.shape[0] < 2:
            flagged.append(a)
            continue
        out[a] = float(rows.var(axis=0, ddof=1).mean())
    return out, flagged


# ---------------------------------------------------------------- full report


def evaluate(model: CdeModel, data: DatasetSplit, knn_k: int = 5) -> MetricsReport:
    A = model.config.num_actions
    outs = {name: predict(model, pairs) for name, pairs in data.items()}
    labels = {name: stack_pairs(pairs)[2] for name, pairs in data.items()}
    acc = {name: accuracy_from_logits(outs[name].logits.data, labels[name]) for name in outs}
    train_d = outs["train"].deltas.data
    table = compute_prototypes(train_d, labels["train"], A)
    flags = [f"no training prototype for action {a}" for a in table.missing]
    transfer, knn = {}, {}
    for name in ("iid_test", "ood_compositional", "ood_systematic"):
        z, zt = selected_encodings(outs[name])
        try:
            transfer[name] = transfer_similarity_from(z, zt, labels[name], table)
        except EvalError as err:
            transfer[name] = float("nan")
            flags.append(f"transfer_similarity[{name}]: {err}")
        knn[name] = knn_classify(train_d, labels["train"], outs[name].deltas.data, knn_k, labels[name])[1]
    var, few = delta_variance(outs["iid_test"].deltas.data, labels["iid_test"], A)
    flags += [f"fewer than two iid_test samples for action {a}" for a in few]
    return MetricsReport(
        iid_accuracy=acc["iid_test"],
        ood_comp_accuracy=acc["ood_compositional"],
        ood_syst_accuracy=acc["ood_systematic"],
        gap_comp=generalization_gap(acc["iid_test"], acc["ood_compositional"]),
        gap_syst=generalization_gap(acc["iid_test"], acc["ood_systematic"]),
        prototype_similarity=prototype_similarity_matrix(table),
        transfer_similarity=transfer,
        knn_accuracy=knn,
        delta_variance=var,
        flags=flags,
    )
