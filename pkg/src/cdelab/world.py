"""Synthetic interventional world: latents, interventions, rendering and splits.

The scene holds ``scene_dims`` global variables and a ``num_objects`` x
``props_per_object`` matrix of object properties, all i.i.d. uniform on
[-1, 1]. An action shifts exactly one property of the object it is applied to
by ``direction * delta_magnitude`` (plus small Gaussian noise); inverse actions
share the property and flip the direction. A hidden confounder correlates
object and action in the training table only.

Latents live on a 2**-24 grid and shifts are snapped to the same grid, so
``z_tilde - z`` is exact in float64 when the noise is zero.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

GRID = 2.0**-24

# rng stream tags
_RENDER, _CALIB = 11, 12
SPLIT_CODES = {"train": 1, "iid_test": 2, "ood_compositional": 3, "ood_systematic": 4}
SPLIT_NAMES = tuple(SPLIT_CODES)


class ConfigError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    num_objects: int = 6
    props_per_object: int = 3
    scene_dims: int = 2
    action_names: tuple[str, ...] = ("open", "close", "turn_on", "turn_off", "dirty", "clean")
    inverse_pairs: tuple[tuple[str, str], ...] = (("open", "close"), ("turn_on", "turn_off"), ("dirty", "clean"))
    delta_magnitude: float = 1.0
    intervention_noise: float = 0.01
    # noise every property of the intervened object instead of only the shifted one
    noise_object_block: bool = False
    confounding_strength: float = 0.9
    pairs_per_split: int = 512
    observation_dim: int = 48
    # 0 = global rendering; otherwise number of patches, split evenly across objects
    patch_grid: int = 0
    seed: int = 0
    # renderer shape
    hidden_dim: int = 64
    render_gain: float = 2.0
    object_signature: float = 2.0
    style_rank: int = 2
    object_specificity: float = 0.5
    property_style: float = 0.0
    # objects held out for the systematic split; 0 picks max(1, N // 3)
    systematic_holdout: int = 0

    def __post_init__(self):
        object.__setattr__(self, "action_names", tuple(self.action_names))
        object.__setattr__(self, "inverse_pairs", tuple(tuple(p) for p in self.inverse_pairs))
        self.validate()

    def validate(self) -> None:
        N, K, S = self.num_objects, self.props_per_object, self.scene_dims
        if N < 1 or K < 1 or S < 0:
            raise ConfigError("need num_objects >= 1, props_per_object >= 1, scene_dims >= 0")
        if not self.action_names or len(set(self.action_names)) != len(self.action_names):
            raise ConfigError("action_names must be non-empty and unique")
        partner: dict[str, str] = {}
        for pair in self.inverse_pairs:
            if len(pair) != 2:
                raise ConfigError(f"inverse pair {pair!r} must have two actions")
            a, b = pair
            if a not in self.action_names or b not in self.action_names:
                raise ConfigError(f"inverse pair {pair!r} names an unknown action")
            if a == b or a in partner or b in partner:
                raise ConfigError(f"action in {pair!r} already has an inverse")
            partner[a], partner[b] = b, a
        if len(self.action_blocks()) > K:
            raise ConfigError(f"{len(self.action_blocks())} action groups need props_per_object >= that, got {K}")
        if self.delta_magnitude <= 0:
            raise ConfigError("delta_magnitude must be > 0")
        if self.intervention_noise < 0:
            raise ConfigError("intervention_noise must be >= 0")
        if not 0.0 <= self.confounding_strength <= 1.0:
            raise ConfigError("confounding_strength must lie in [0, 1]")
        if self.pairs_per_split < 1:
            raise ConfigError("pairs_per_split must be >= 1")
        need = S + K if self.patch_grid else S + N * K
        if self.observation_dim < need:
            raise ConfigError(f"observation_dim must be >= {need} for an injective renderer")
        if self.patch_grid < 0 or (self.patch_grid and self.patch_grid % N):
            raise ConfigError("patch_grid must be 0 or a positive multiple of num_objects")
        if self.hidden_dim < need:
            raise ConfigError(f"hidden_dim must be >= {need}")
        if self.style_rank < 1:
            raise ConfigError("style_rank must be >= 1")
        if not 0 <= self.systematic_holdout < N:
            raise ConfigError("systematic_holdout must be in [0, num_objects)")

    @property
    def num_actions(self) -> int:
        return len(self.action_names)

    @property
    def latent_dim(self) -> int:
        return self.scene_dims + self.num_objects * self.props_per_object

    def action_index(self, action: str | int) -> int:
        if isinstance(action, (int, np.integer)):
            if not 0 <= action < self.num_actions:
                raise ConfigError(f"unknown action id {action}")
            return int(action)
        try:
            return self.action_names.index(action)
        except ValueError:
            raise ConfigError(f"unknown action {action!r}") from None

    def inverse_of(self, action: str | int) -> int | None:
        name = self.action_names[self.action_index(action)]
        for a, b in self.inverse_pairs:
            if name == a:
                return self.action_names.index(b)
            if name == b:
                return self.action_names.index(a)
        return None

    def action_blocks(self) -> list[list[int]]:
        """Actions grouped by the property they move: inverse pairs share a block."""
        blocks: list[list[int]] = []
        placed: set[int] = set()
        for i, name in enumerate(self.action_names):
            if i in placed:
                continue
            block = [i]
            for a, b in self.inverse_pairs:
                if name in (a, b):
                    block = [self.action_names.index(a), self.action_names.index(b)]
            placed.update(block)
            blocks.append(block)
        return blocks

    def action_effect(self, action: str | int) -> tuple[int, int]:
        """(property index, direction) moved by an action."""
        idx = self.action_index(action)
        for prop, block in enumerate(self.action_blocks()):
            if idx in block:
                return prop, (1 if block.index(idx) == 0 else -1)
        raise AssertionError("unreachable")

    @property
    def snapped_magnitude(self) -> float:
        return max(GRID, round(self.delta_magnitude / GRID) * GRID)

    def systematic_objects(self) -> tuple[list[int], list[int]]:
        held = self.systematic_holdout or max(1, self.num_objects // 3)
        split = self.num_objects - held
        return list(range(split)), list(range(split, self.num_objects))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["action_names"] = list(self.action_names)
        d["inverse_pairs"] = [list(p) for p in self.inverse_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "inverse_pairs" in d:
            d["inverse_pairs"] = tuple(tuple(p) for p in d["inverse_pairs"])
        if "action_names" in d:
            d["action_names"] = tuple(d["action_names"])
        return cls(**d)


@dataclass(frozen=True)
class LatentState:
    z_s: np.ndarray
    z_o: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.z_s, self.z_o.reshape(-1)])


@dataclass(frozen=True)
class GroundTruthDelta:
    action: int
    target_coord: tuple[int, int]
    direction: int
    magnitude: float

    def __neg__(self) -> "GroundTruthDelta":
        return replace(self, direction=-self.direction)

    def as_object_vector(self, config: WorldConfig) -> np.ndarray:
        v = np.zeros(config.scene_dims + config.props_per_object)
        v[config.scene_dims + self.target_coord[1]] = self.direction * self.magnitude
        return v


def ground_truth_delta(action: str | int, obj: int, config: WorldConfig) -> GroundTruthDelta:
    if not 0 <= obj < config.num_objects:
        raise ConfigError(f"unknown object {obj}")
    idx = config.action_index(action)
    prop, direction = config.action_effect(idx)
    return GroundTruthDelta(idx, (int(obj), prop), direction, config.snapped_magnitude)


def sample_latents(config: WorldConfig, rng: np.random.Generator) -> LatentState:
    u = rng.uniform(-1.0, 1.0, size=config.latent_dim)
    z = np.round(u / GRID) * GRID
    S = config.scene_dims
    return LatentState(z[:S].copy(), z[S:].reshape(config.num_objects, config.props_per_object).copy())


def apply_intervention(
    z: LatentState, action: str | int, obj: int, config: WorldConfig, rng: np.random.Generator
) -> LatentState:
    gt = ground_truth_delta(action, obj, config)
    z_o = z.z_o.copy()
    n, k = gt.target_coord
    z_o[n, k] += gt.direction * gt.magnitude
    noise = rng.normal(0.0, 1.0, size=config.props_per_object) * config.intervention_noise
    if config.intervention_noise > 0:
        if config.noise_object_block:
            z_o[n] += noise
        else:
            z_o[n, k] += noise[k]
    return LatentState(z.z_s.copy(), z_o)


# ---------------------------------------------------------------- rendering


@dataclass
class Renderer:
    """Fixed random two-layer tanh map plus a quadratic object-appearance term.

    Each object's property weights are a shared per-property template plus a
    low-rank object style and an object-specific part. The appearance term adds
    ``sum_k z[n, k]**2`` times a low-rank per-object signature, so a change to
    object ``n`` leaves an object-identifying trace that does not depend on the
    sign of the change. Outputs are standardised to zero mean and unit variance
    using a fixed calibration sample.
    """

    config: WorldConfig
    w_scene: np.ndarray  # (S, H)
    w_object: np.ndarray  # (N, K, H)
    bias: np.ndarray  # (H,)
    position: np.ndarray  # (P, H) per-patch offsets, (0, H) when global
    w_out: np.ndarray  # (H, d)
    signature: np.ndarray  # (N, d)
    out_mean: np.ndarray = field(default=None)
    out_std: np.ndarray = field(default=None)

    @classmethod
    def from_config(cls, config: WorldConfig) -> "Renderer":
        c = config
        N, K, S, H, d, q = c.num_objects, c.props_per_object, c.scene_dims, c.hidden_dim, c.observation_dim, c.style_rank
        rng = np.random.default_rng([c.seed, _RENDER])
        templates = rng.normal(size=(K, H))
        style_basis = rng.normal(size=(q, K, H))
        style_codes = rng.normal(size=(N, q))
        unique = rng.normal(size=(N, K, H))
        w_scene = rng.normal(size=(S, H))
        bias = rng.normal(size=H) * 0.3
        position = rng.normal(size=(c.patch_grid, H)) * 0.3
        w_out = rng.normal(size=(H, d)) / np.sqrt(H)
        sig_basis = rng.normal(size=(q, d)) / np.sqrt(q)
        w_object = (
            templates[None]
            + c.property_style * np.einsum("nq,qkh->nkh", style_codes, style_basis)
            + c.object_specificity * unique
        )
        fan = S + K if c.patch_grid else S + N * K
        scale = c.render_gain / np.sqrt(fan)
        r = cls(
            config=c,
            w_scene=w_scene * scale,
            w_object=w_object * scale,
            bias=bias,
            position=position,
            w_out=w_out,
            signature=c.object_signature * style_codes @ sig_basis,
        )
        calib = np.random.default_rng([c.seed, _CALIB])
        zs = np.round(calib.uniform(-1, 1, size=(4096, c.latent_dim)) / GRID) * GRID
        raw = r._raw(zs)
        axes = (0, 1) if c.patch_grid else 0
        r.out_mean = raw.mean(axis=axes)
        r.out_std = raw.std(axis=axes) + 1e-12
        return r

    @property
    def patch_owner(self) -> np.ndarray:
        c = self.config
        per = c.patch_grid // c.num_objects
        return np.arange(c.patch_grid) // per

    def _raw(self, z: np.ndarray) -> np.ndarray:
        """Unnormalised render of a batch of flat latents (B, S+N*K)."""
        c = self.config
        S, N, K = c.scene_dims, c.num_objects, c.props_per_object
        zs, zo = z[:, :S], z[:, S:].reshape(-1, N, K)
        energy = (zo * zo).sum(axis=2)  # (B, N)
        if not c.patch_grid:
            pre = zs @ self.w_scene + np.einsum("bnk,nkh->bh", zo, self.w_object) + self.bias
            return np.tanh(pre) @ self.w_out + energy @ self.signature
        owner = self.patch_owner
        scene = zs @ self.w_scene  # (B, H)
        obj = np.einsum("bnk,nkh->bnh", zo, self.w_object)  # (B, N, H)
        pre = scene[:, None, :] + obj[:, owner, :] + self.bias + self.position[None]
        appearance = energy[:, owner, None] * self.signature[owner][None]
        return np.tanh(pre) @ self.w_out + appearance

    def render_batch(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ConfigError(f"render: expected latents of width {self.config.latent_dim}, got {z.shape}")
        return (self._raw(z) - self.out_mean) / self.out_std


def render(z: LatentState, renderer: Renderer) -> np.ndarray:
    c = renderer.config
    if z.z_s.shape != (c.scene_dims,) or z.z_o.shape != (c.num_objects, c.props_per_object):
        raise ConfigError(f"render: latent shapes {z.z_s.shape}, {z.z_o.shape} do not match the renderer")
    return renderer.render_batch(z.flat()[None])[0]


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class InterventionPair:
    x: np.ndarray
    x_tilde: np.ndarray
    action: int
    object: int
    oracle_latents: tuple[LatentState, LatentState] | None = None

    def __post_init__(self):
        if self.x.shape != self.x_tilde.shape:
            raise ValueError(f"pair observations differ in shape: {self.x.shape} vs {self.x_tilde.shape}")


@dataclass
class DatasetSplit:
    config: WorldConfig
    train: list[InterventionPair]
    iid_test: list[InterventionPair]
    ood_compositional: list[InterventionPair]
    ood_systematic: list[InterventionPair]
    split_manifest: dict

    def split(self, name: str) -> list[InterventionPair]:
        if name not in SPLIT_CODES:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def items(self):
        return [(name, self.split(name)) for name in SPLIT_NAMES]


def split_tables(config: WorldConfig) -> dict:
    """Object/action sampling tables for every split.

    Object ``n`` prefers the action block ``n mod B`` and never sees block
    ``(n + 1) mod B`` during training (that block forms its compositional test
    pairs). With confounding_strength rho the train table mixes rho of the preferred
    block with 1 - rho of the object's allowed actions.
    """
    blocks = config.action_blocks()
    A = config.num_actions
    if config.num_objects < 2:
        raise SplitError("disjoint splits need num_objects >= 2")
    if len(blocks) < 2:
        raise SplitError("compositional holdout needs at least two action groups")
    train_objs, test_objs = config.systematic_objects()
    rho = config.confounding_strength
    train = np.zeros((config.num_objects, A))
    comp = np.zeros((config.num_objects, A))
    for n in train_objs:
        preferred = blocks[n % len(blocks)]
        held = blocks[(n + 1) % len(blocks)]
        allowed = [a for a in range(A) if a not in held]
        row = np.zeros(A)
        row[allowed] += (1.0 - rho) / len(allowed)
        row[preferred] += rho / len(preferred)
        train[n] = row / len(train_objs)
        comp[n, held] = 1.0
    comp /= comp.sum()
    seen = train.sum(axis=0) > 0
    if not seen.all():
        missing = [config.action_names[a] for a in np.flatnonzero(~seen)]
        raise SplitError(f"actions {missing} never occur in the training table; add objects or lower confounding_strength")
    syst = np.zeros((config.num_objects, A))
    syst[test_objs] = 1.0
    syst /= syst.sum()
    train_pairs = {(n, a) for n, a in zip(*np.nonzero(train))}
    comp_pairs = {(n, a) for n, a in zip(*np.nonzero(comp))}
    if train_pairs & comp_pairs:
        raise SplitError("compositional test pairs overlap the training pairs")
    return {
        "train": train,
        "iid_test": train,
        "ood_compositional": comp,
        "ood_systematic": syst,
        "train_objects": train_objs,
        "systematic_objects": test_objs,
    }


def _sample_split(config: WorldConfig, renderer: Renderer, table: np.ndarray, code: int, seed: int):
    M = config.pairs_per_split
    flat_p = table.reshape(-1)
    cdf = np.cumsum(flat_p)
    cdf /= cdf[-1]
    z0 = np.empty((M, config.latent_dim))
    z1 = np.empty((M, config.latent_dim))
    objs = np.empty(M, dtype=int)
    acts = np.empty(M, dtype=int)
    states = []
    for i in range(M):
        rng = np.random.default_rng([seed, code, i])
        cell = int(np.searchsorted(cdf, rng.uniform(), side="right"))
        cell = min(cell, flat_p.size - 1)
        n, a = divmod(cell, config.num_actions)
        z = sample_latents(config, rng)
        zt = apply_intervention(z, a, n, config, rng)
        z0[i], z1[i] = z.flat(), zt.flat()
        objs[i], acts[i] = n, a
        states.append((z, zt))
    x = renderer.render_batch(z0).astype(np.float32)
    xt = renderer.render_batch(z1).astype(np.float32)
    return [InterventionPair(x[i], xt[i], int(acts[i]), int(objs[i]), states[i]) for i in range(M)]


def make_splits(config: WorldConfig, rng: np.random.Generator | None = None) -> DatasetSplit:
    """Generate all four splits. Each pair draws from its own (seed, split, index) stream.

    ``rng`` only supplies an alternative base seed; by default ``config.seed`` is used.
    """
    seed = config.seed if rng is None else int(rng.integers(0, 2**63 - 1))
    renderer = Renderer.from_config(config)
    tables = split_tables(config)
    splits = {
        name: _sample_split(config, renderer, tables[name], code, seed) for name, code in SPLIT_CODES.items()
    }
    manifest = {
        "world": config.to_dict(),
        "data_seed": seed,
        "train_objects": tables["train_objects"],
        "systematic_objects": tables["systematic_objects"],
        "tables": {name: tables[name].round(12).tolist() for name in SPLIT_NAMES},
        "pair_sets": {name: sorted([int(n), int(a)] for n, a in zip(*np.nonzero(tables[name]))) for name in SPLIT_NAMES},
    }
    return DatasetSplit(config, split_manifest=manifest, **splits)


def stack_pairs(pairs: Sequence[InterventionPair]):
    """(x, x_tilde, actions, objects) as float64 / int arrays."""
    if not pairs:
        raise ValueError("empty pair list")
    x = np.stack([p.x for p in pairs]).astype(np.float64)
    xt = np.stack([p.x_tilde for p in pairs]).astype(np.float64)
    actions = np.array([p.action for p in pairs], dtype=int)
    objects = np.array([p.object for p in pairs], dtype=int)
    return x, xt, actions, objects


def oracle_delta(pair: InterventionPair, config: WorldConfig) -> np.ndarray:
    """Ground-truth latent delta in the intervened object's frame: [dz_s, dz_o[n]]."""
    if pair.oracle_latents is None:
        raise ValueError("pair carries no oracle latents")
    z, zt = pair.oracle_latents
    return np.concatenate([zt.z_s - z.z_s, zt.z_o[pair.object] - z.z_o[pair.object]])


# ---------------------------------------------------------------- serialisation


def _b64(arr: np.ndarray, dtype: str) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode("ascii")


def _unb64(text: str, dtype: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype=dtype).reshape(shape).copy()


def _record(pair: InterventionPair) -> dict:
    rec = {
        "shape": list(pair.x.shape),
        "x": _b64(pair.x, "<f4"),
        "x_tilde": _b64(pair.x_tilde, "<f4"),
        "action": pair.action,
        "object": pair.object,
    }
    if pair.oracle_latents is not None:
        z, zt = pair.oracle_latents
        rec["oracle"] = {"z": _b64(z.flat(), "<f8"), "z_tilde": _b64(zt.flat(), "<f8")}
    return rec


def _unrecord(rec: dict, config: WorldConfig) -> InterventionPair:
    shape = tuple(rec["shape"])
    oracle = None
    if "oracle" in rec:
        S, N, K = config.scene_dims, config.num_objects, config.props_per_object

        def state(text):
            flat = _unb64(text, "<f8", (config.latent_dim,))
            return LatentState(flat[:S], flat[S:].reshape(N, K))

        oracle = (state(rec["oracle"]["z"]), state(rec["oracle"]["z_tilde"]))
    return InterventionPair(
        _unb64(rec["x"], "<f4", shape), _unb64(rec["x_tilde"], "<f4", shape), int(rec["action"]), int(rec["object"]), oracle
    )


def save_dataset(data: DatasetSplit, directory: str | Path) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, pairs in data.items():
        with open(out / f"{name}.jsonl", "w") as fh:
            for pair in pairs:
                fh.write(json.dumps(_record(pair), sort_keys=True) + "\n")
    (out / "manifest.json").write_text(json.dumps(data.split_manifest, sort_keys=True, indent=1) + "\n")
    return out


def load_dataset(directory: str | Path) -> DatasetSplit:
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    config = WorldConfig.from_dict(manifest["world"])
    splits = {}
    for name in SPLIT_NAMES:
        with open(src / f"{name}.jsonl") as fh:
            splits[name] = [_unrecord(json.loads(line), config) for line in fh if line.strip()]
    return DatasetSplit(config, split_manifest=manifest, **splits)


def dataset_digest(data: DatasetSplit) -> str:
    """sha256 over the manifest and every serialised record."""
    h = hashlib.sha256(json.dumps(data.split_manifest, sort_keys=True).encode())
    for _, pairs in data.items():
        for pair in pairs:
            h.update(json.dumps(_record(pair), sort_keys=True).encode())
    return h.hexdigest()
