"""Cross-entropy, supervised contrastive and L1 sparsity losses on delta embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Tensor,
    abs_,
    add,
    as_tensor,
    logsumexp,
    log_softmax,
    matmul,
    mean,
    mul,
    normalize_rows,
    pick,
    sub,
    sum_,
    transpose,
)


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha_contrast: float = 2.0
    alpha_sparsity: float = 1.0
    tau: float = 0.07

    def __post_init__(self):
        if self.tau <= 0:
            raise LossError("tau must be > 0")
        if self.alpha_contrast < 0 or self.alpha_sparsity < 0:
            raise LossError("loss weights must be >= 0")


@dataclass
class DeltaBatch:
    """B delta vectors (rows) with their action labels."""

    deltas: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.deltas = as_tensor(self.deltas)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.deltas.ndim != 2:
            raise LossError(f"deltas must be a B x l matrix, got shape {self.deltas.shape}")
        if self.labels.shape != (self.deltas.shape[0],):
            raise LossError(f"{self.deltas.shape[0]} deltas but {self.labels.shape} labels")
        if self.B < 1:
            raise LossError("empty delta batch")

    @property
    def B(self) -> int:
        return self.deltas.shape[0]


def ce_loss(logits, labels) -> Tensor:
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise LossError(f"ce_loss: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LossError(f"ce_loss: label ids must lie in [0, {logits.shape[1]})")
    return mul(mean(pick(log_softmax(logits, axis=1), labels)), -1.0)


def positive_mask(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return same


def supcon_loss(batch: DeltaBatch, tau: float) -> Tensor:
    """Supervised contrastive loss summed over anchors; anchors without positives add 0."""
    if batch.B < 2:
        raise LossError("supcon_loss needs at least two deltas")
    if tau <= 0:
        raise LossError("tau must be > 0")
    unit = normalize_rows(batch.deltas, eps=1e-12)
    logits = mul(matmul(unit, transpose(unit)), 1.0 / tau)
    others = ~np.eye(batch.B, dtype=bool)
    lse = logsumexp(logits, axis=1, mask=others)
    pos = positive_mask(batch.labels)
    counts = pos.sum(axis=1)
    has_pos = (counts > 0).astype(float)
    weights = np.where(pos, 1.0 / np.maximum(counts, 1)[:, None], 0.0)
    # sum_i [ lse_i - mean_{p in P(i)} logits_ip ] over anchors with positives
    return sub(sum_(mul(lse, has_pos)), sum_(mul(logits, weights)))


def l1_loss(batch: DeltaBatch) -> Tensor:
    return mul(sum_(abs_(batch.deltas)), 1.0 / batch.B)


def total_loss(logits, batch: DeltaBatch, config: LossConfig) -> tuple[Tensor, dict[str, float | None]]:
    """CE + alpha_contrast * SupCon + alpha_sparsity * L1, with the component values.

    A component whose weight is zero is not evaluated (reported as None), so the
    total is then bit-identical to plain cross-entropy. SupCon is skipped for a
    single-sample batch, where no anchor can have a positive.
    """
    logits = as_tensor(logits)
    if logits.shape[0] != batch.B:
        raise LossError(f"total_loss: {logits.shape[0]} logit rows for a batch of {batch.B}")
    ce = ce_loss(logits, batch.labels)
    parts: dict[str, float | None] = {"ce": ce.item(), "contrast": None, "sparsity": None}
    total = ce
    if config.alpha_contrast > 0 and batch.B >= 2:
        con = supcon_loss(batch, config.tau)
        parts["contrast"] = con.item()
        total = add(total, mul(con, config.alpha_contrast))
    if config.alpha_sparsity > 0:
        sp = l1_loss(batch)
        parts["sparsity"] = sp.item()
        total = add(total, mul(sp, config.alpha_sparsity))
    parts["total"] = total.item()
    return total, parts
