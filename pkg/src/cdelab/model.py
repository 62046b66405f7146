"""Global and patch-wise Causal Delta Embedding models and their training loop.

An observation goes through a featurizer (identity or a fixed random linear
map) and a tanh MLP projector. The delta embedding is the difference of the
projected encodings of the post- and pre-intervention observations, and a small
classifier reads nothing but that delta. The patch variant projects every patch
with the shared projector and averages the k patch deltas of largest L2 norm.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .losses import DeltaBatch, LossConfig, total_loss
from .numerics import (
    AdamWState,
    NonFiniteError,
    Tensor,
    adamw_step,
    affine,
    as_tensor,
    cosine_lr,
    grad,
    matmul,
    mean,
    reshape,
    sub,
    take_rows,
    tanh,
)
from .numerics import add as t_add
from .numerics import mul as t_mul
from .world import DatasetSplit, InterventionPair, stack_pairs


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    num_actions: int
    embedding_dim: int = 256
    featurizer: str = "random"  # identity | random
    featurizer_dim: int = 0  # 0 = same as input_dim
    featurizer_trainable: bool = False
    projector: str = "mlp"  # mlp | identity
    projector_hidden: tuple[int, ...] = ()  # empty = (4l, 4l)
    classifier_hidden: int = 0  # 0 = l
    head_init_gain: float = 1.0
    patch: bool = False
    num_patches: int = 0
    top_k: int = 4
    straight_through: bool = False

    def __post_init__(self):
        object.__setattr__(self, "projector_hidden", tuple(int(h) for h in self.projector_hidden))
        if self.input_dim < 1 or self.num_actions < 1 or self.embedding_dim < 1:
            raise ModelError("input_dim, num_actions and embedding_dim must be >= 1")
        if self.featurizer not in ("identity", "random"):
            raise ModelError(f"unknown featurizer {self.featurizer!r}")
        if self.projector not in ("mlp", "identity"):
            raise ModelError(f"unknown projector {self.projector!r}")
        if self.projector == "identity" and self.feature_width != self.embedding_dim:
            raise ModelError("identity projector needs embedding_dim equal to the featurizer width")
        if self.featurizer == "identity" and self.featurizer_dim not in (0, self.input_dim):
            raise ModelError("identity featurizer cannot change the width")
        if self.head_init_gain <= 0:
            raise ModelError("head_init_gain must be > 0")
        if self.patch:
            if self.num_patches < 1:
                raise ModelError("patch variant needs num_patches >= 1")
            if not 1 <= self.top_k <= self.num_patches:
                raise ModelError(f"top_k must lie in [1, {self.num_patches}]")
        elif self.top_k < 1:
            raise ModelError("top_k must be >= 1")

    @property
    def feature_width(self) -> int:
        return self.featurizer_dim or self.input_dim

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return self.projector_hidden or (4 * self.embedding_dim, 4 * self.embedding_dim)

    @property
    def head_width(self) -> int:
        return self.classifier_hidden or self.embedding_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["projector_hidden"] = list(self.projector_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["projector_hidden"] = tuple(d.get("projector_hidden", ()))
        return cls(**d)


@dataclass(frozen=True)
class TrainHyper:
    base_lr: float = 1e-4
    featurizer_lr_scale: float = 0.10
    batch_size: int = 128
    epochs: int = 50
    weight_decay: float = 0.05
    alpha_contrast: float = 2.0
    alpha_sparsity: float = 1.0
    tau: float = 0.07
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.featurizer_lr_scale <= 0 or self.tau <= 0:
            raise ModelError("learning rates and tau must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ModelError("batch_size and epochs must be >= 1")
        if self.weight_decay < 0 or self.alpha_contrast < 0 or self.alpha_sparsity < 0:
            raise ModelError("weight_decay and loss weights must be >= 0")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha_contrast, self.alpha_sparsity, self.tau)


@dataclass
class CdeModel:
    config: EncoderConfig
    params: dict[str, np.ndarray]

    def param_names(self) -> list[str]:
        return list(self.params)

    def group(self, name: str) -> str:
        return name.split(".")[0]

    def copy(self) -> "CdeModel":
        return CdeModel(self.config, {k: v.copy() for k, v in self.params.items()})


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(config: EncoderConfig, seed: int) -> CdeModel:
    """Parameters in declaration order: featurizer, projector, classifier."""
    rng = np.random.default_rng([seed, 101])
    params: dict[str, np.ndarray] = {}
    width = config.feature_width
    if config.featurizer == "random":
        params["featurizer.W"] = _glorot(rng, config.input_dim, width)
    if config.projector == "mlp":
        sizes = (width, *config.hidden_sizes, config.embedding_dim)
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"projector.W{i}"] = _glorot(rng, a, b)
            params[f"projector.b{i}"] = np.zeros(b)
    l, h, A = config.embedding_dim, config.head_width, config.num_actions
    params["classifier.W0"] = _glorot(rng, l, h, config.head_init_gain)
    params["classifier.b0"] = np.zeros(h)
    params["classifier.W1"] = _glorot(rng, h, A, config.head_init_gain)
    params["classifier.b1"] = np.zeros(A)
    return CdeModel(config, params)


# ---------------------------------------------------------------- graph pieces


def _leaves(model: CdeModel, train: bool = False) -> dict[str, Tensor]:
    trainable = {"projector", "classifier"}
    if model.config.featurizer_trainable:
        trainable.add("featurizer")
    return {k: Tensor(v, requires_grad=train and model.group(k) in trainable, name=k) for k, v in model.params.items()}


def _encode_t(x: Tensor, model: CdeModel, p: dict[str, Tensor]) -> Tensor:
    c = model.config
    if x.ndim != 2 or x.shape[1] != c.input_dim:
        raise ModelError(f"encode: expected observations of width {c.input_dim}, got {x.shape}")
    h = matmul(x, p["featurizer.W"]) if c.featurizer == "random" else x
    if c.projector == "identity":
        return h
    n = len(c.hidden_sizes)
    for i in range(n):
        h = tanh(affine(h, p[f"projector.W{i}"], p[f"projector.b{i}"]))
    return affine(h, p[f"projector.W{n}"], p[f"projector.b{n}"])


def _classify_t(d: Tensor, model: CdeModel, p: dict[str, Tensor]) -> Tensor:
    if d.ndim != 2 or d.shape[1] != model.config.embedding_dim:
        raise ModelError(f"classify: expected deltas of width {model.config.embedding_dim}, got {d.shape}")
    h = tanh(affine(d, p["classifier.W0"], p["classifier.b0"]))
    return affine(h, p["classifier.W1"], p["classifier.b1"])


def topk_indices(norms: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest norms per row; ties go to the lower index."""
    norms = np.atleast_2d(norms)
    if not 1 <= k <= norms.shape[1]:
        raise ModelError(f"top_k={k} outside [1, {norms.shape[1]}]")
    return np.argsort(-norms, axis=1, kind="stable")[:, :k]


@dataclass
class ForwardOut:
    z: Tensor  # (B, l) global; (B, P, l) patch
    z_tilde: Tensor
    deltas: Tensor  # (B, l) aggregated
    logits: Tensor
    selected: np.ndarray | None = None  # (B, k) patch indices


def forward_batch(model: CdeModel, x, x_tilde, params: dict[str, Tensor] | None = None) -> ForwardOut:
    """Vectorised forward pass over B pairs (global: (B, d); patch: (B, P, d))."""
    c = model.config
    p = params if params is not None else _leaves(model)
    x, x_tilde = np.asarray(x, dtype=np.float64), np.asarray(x_tilde, dtype=np.float64)
    if x.shape != x_tilde.shape:
        raise ModelError(f"pair shapes differ: {x.shape} vs {x_tilde.shape}")
    if not c.patch:
        if x.ndim != 2:
            raise ModelError(f"global model expects (B, d) observations, got {x.shape}")
        both = _encode_t(Tensor(np.concatenate([x, x_tilde])), model, p)
        B = x.shape[0]
        z = take_rows(both, np.arange(B))
        zt = take_rows(both, np.arange(B, 2 * B))
        d = sub(zt, z)
        return ForwardOut(z, zt, d, _classify_t(d, model, p))
    if x.ndim != 3 or x.shape[1] != c.num_patches:
        raise ModelError(f"patch model expects (B, {c.num_patches}, d) observations, got {x.shape}")
    B, P, dim = x.shape
    flat = np.concatenate([x.reshape(B * P, dim), x_tilde.reshape(B * P, dim)])
    enc = _encode_t(Tensor(flat), model, p)
    z = take_rows(enc, np.arange(B * P))
    zt = take_rows(enc, np.arange(B * P, 2 * B * P))
    pd = sub(zt, z)  # (B*P, l)
    norms = np.linalg.norm(pd.data.reshape(B, P, -1), axis=2)
    sel = topk_indices(norms, c.top_k)
    rows = (np.arange(B)[:, None] * P + sel).reshape(-1)
    l = c.embedding_dim
    top = mean(reshape(take_rows(pd, rows), (B, c.top_k, l)), axis=1)
    if c.straight_through:
        # forward value of the top-k mean, gradient of the mean over all patches
        every = mean(reshape(pd, (B, P, l)), axis=1)
        top = t_add(every, Tensor(top.data - every.data))
    return ForwardOut(reshape(z, (B, P, l)), reshape(zt, (B, P, l)), top, _classify_t(top, model, p), sel)


# ---------------------------------------------------------------- single-pair API


def encode(x, model: CdeModel) -> np.ndarray:
    """Encoding of one observation (global) or of each patch (patch variant)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = _encode_t(Tensor(np.atleast_2d(x)), model, _leaves(model)).data
    return out[0] if single else out


def delta(z, z_tilde) -> np.ndarray:
    z, z_tilde = np.asarray(z, dtype=np.float64), np.asarray(z_tilde, dtype=np.float64)
    if z.shape != z_tilde.shape:
        raise ModelError(f"delta: lengths differ {z.shape} vs {z_tilde.shape}")
    return z_tilde - z


def patch_deltas(patches, patches_tilde, model: CdeModel) -> np.ndarray:
    patches, patches_tilde = np.asarray(patches, dtype=np.float64), np.asarray(patches_tilde, dtype=np.float64)
    if patches.shape != patches_tilde.shape or patches.ndim != 2:
        raise ModelError(f"patch_deltas: patch arrays differ or are not (P, d): {patches.shape} vs {patches_tilde.shape}")
    return delta(encode(patches, model), encode(patches_tilde, model))


def topk_aggregate(deltas, k: int) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64)
    sel = topk_indices(np.linalg.norm(deltas, axis=1), k)[0]
    return deltas[sel].mean(axis=0)


def classify(d, model: CdeModel) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    return _classify_t(Tensor(np.atleast_2d(d)), model, _leaves(model)).data.reshape(*d.shape[:-1], -1)


def forward_pair(pair: InterventionPair, model: CdeModel) -> tuple[np.ndarray, np.ndarray]:
    out = forward_batch(model, pair.x[None], pair.x_tilde[None])
    return out.deltas.data[0], out.logits.data[0]


def predict(model: CdeModel, pairs: Sequence[InterventionPair], chunk: int = 512) -> ForwardOut:
    """Forward pass over a list of pairs in chunks, results as constant tensors."""
    x, xt, _, _ = stack_pairs(pairs)
    outs = [forward_batch(model, x[i : i + chunk], xt[i : i + chunk]) for i in range(0, len(x), chunk)]

    def cat(attr):
        return Tensor(np.concatenate([getattr(o, attr).data for o in outs]))

    sel = None if outs[0].selected is None else np.concatenate([o.selected for o in outs])
    return ForwardOut(cat("z"), cat("z_tilde"), cat("deltas"), cat("logits"), sel)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: CdeModel
    loss_trace: list[float]
    component_trace: list[dict[str, float | None]] = field(default_factory=list)


def train(model: CdeModel, data: DatasetSplit | Sequence[InterventionPair], hyper: TrainHyper) -> TrainResult:
    """Minibatch AdamW with cosine annealing on the weighted CE + SupCon + L1 loss.

    The input model is not modified. The last incomplete minibatch is kept.
    Returns the per-epoch mean total loss (and per-component means).
    """
    pairs = data.train if isinstance(data, DatasetSplit) else list(data)
    if not pairs:
        raise TrainingError("empty training split")
    model = model.copy()
    x, xt, labels, _ = stack_pairs(pairs)
    if labels.max() >= model.config.num_actions:
        raise TrainingError("training labels exceed the classifier's action count")
    loss_cfg = hyper.loss_config
    M, B = len(pairs), hyper.batch_size
    steps_per_epoch = math.ceil(M / B)
    total_steps = hyper.epochs * steps_per_epoch
    rng = np.random.default_rng([hyper.seed, 202])
    state = AdamWState(lr=hyper.base_lr, weight_decay=hyper.weight_decay)
    probe = _leaves(model, train=True)
    names = [k for k, t in probe.items() if t.requires_grad]
    scales = [hyper.featurizer_lr_scale if model.group(k) == "featurizer" else 1.0 for k in names]
    trace: list[float] = []
    comps: list[dict[str, float | None]] = []
    step = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(M)
        losses, parts_acc = [], []
        for s in range(steps_per_epoch):
            idx = order[s * B : (s + 1) * B]
            try:
                leaves = _leaves(model, train=True)
                out = forward_batch(model, x[idx], xt[idx], leaves)
                loss, parts = total_loss(out.logits, DeltaBatch(out.deltas, labels[idx]), loss_cfg)
                grads = grad(loss, [leaves[k] for k in names])
                if not all(np.isfinite(g).all() for g in grads):
                    raise NonFiniteError("non-finite gradient")
            except NonFiniteError as err:
                raise TrainingError(
                    f"non-finite value at epoch {epoch}, step {step} ({err}); batch indices {idx.tolist()}"
                ) from err
            lr = cosine_lr(step, total_steps, hyper.base_lr)
            adamw_step([model.params[k] for k in names], grads, state, lr=lr, lr_scales=scales)
            losses.append(loss.item() * len(idx))
            parts_acc.append((len(idx), parts))
            step += 1
        trace.append(float(sum(losses) / M))
        comps.append(_mean_parts(parts_acc, M))
    return TrainResult(model, trace, comps)


def _mean_parts(acc: list[tuple[int, dict]], total: int) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for key in ("ce", "contrast", "sparsity"):
        vals = [(n, p[key]) for n, p in acc if p[key] is not None]
        out[key] = float(sum(n * v for n, v in vals) / sum(n for n, _ in vals)) if vals else None
    return out
