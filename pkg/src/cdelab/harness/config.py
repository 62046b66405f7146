"""Experiment configuration: dataclasses plus a flat INI reader/writer.

Sections are ``[world]``, ``[encoder]``, ``[train]`` and ``[experiment]``; keys
are the dataclass field names. Missing keys keep the dataclass defaults, which
follow the reference recipe (l=256, k=4, lr=1e-4, B=128, 50 epochs, wd=0.05,
alpha_contrast=2, alpha_sparsity=1, tau=0.07). Sequences are comma separated;
inverse pairs are written ``open:close, turn_on:turn_off``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..model import EncoderConfig, ModelError, TrainHyper
from ..world import ConfigError, WorldConfig

SECTIONS = ("world", "encoder", "train", "experiment")
# encoder fields derived from the world, never read from the file
_DERIVED = {"input_dim", "num_actions", "num_patches", "patch"}


class ConfigFileError(ConfigError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig
    encoder: EncoderConfig
    train: TrainHyper
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs/default"
    name: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigFileError("seeds must be non-empty and distinct")
        w, e = self.world, self.encoder
        if e.input_dim != w.observation_dim or e.num_actions != w.num_actions:
            raise ConfigFileError("encoder input_dim/num_actions disagree with the world")
        if e.patch != bool(w.patch_grid) or (e.patch and e.num_patches != w.patch_grid):
            raise ConfigFileError("encoder patch settings disagree with the world's patch_grid")

    @property
    def loss(self):
        return self.train.loss_config

    def seed_world(self, seed: int) -> WorldConfig:
        """World for one run seed: the base world seed offset by the run seed."""
        return replace(self.world, seed=self.world.seed + seed)

    def with_overrides(self, overrides: dict[str, dict[str, str]]) -> "ExperimentConfig":
        return config_from_sections(_merge(config_to_sections(self), overrides))

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "encoder": self.encoder.to_dict(),
            "train": dataclasses.asdict(self.train),
            "seeds": list(self.seeds),
            "name": self.name,
        }


def build_encoder(world: WorldConfig, **kwargs) -> EncoderConfig:
    kwargs = {k: v for k, v in kwargs.items() if k not in _DERIVED}
    return EncoderConfig(
        input_dim=world.observation_dim,
        num_actions=world.num_actions,
        patch=bool(world.patch_grid),
        num_patches=world.patch_grid,
        **kwargs,
    )


# ---------------------------------------------------------------- value codecs


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ", ".join(":".join(p) for p in value)
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, hint, key: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
        if origin is tuple:
            args = typing.get_args(hint)
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if args and typing.get_origin(args[0]) is tuple:
                return tuple(tuple(x.strip() for x in item.split(":")) for item in items)
            inner = args[0] if args else str
            return tuple(_parse(i, inner, key) for i in items)
    except ValueError:
        raise ConfigFileError(f"key '{key}': cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigFileError(f"key '{key}': unsupported type {hint}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


_EXPERIMENT_HINTS = {"seeds": tuple[int, ...], "output_dir": str, "name": str}


def section_hints(section: str) -> dict:
    if section == "world":
        return _hints(WorldConfig)
    if section == "encoder":
        return {k: v for k, v in _hints(EncoderConfig).items() if k not in _DERIVED}
    if section == "train":
        return _hints(TrainHyper)
    if section == "experiment":
        return dict(_EXPERIMENT_HINTS)
    raise ConfigFileError(f"unknown section [{section}]")


# ---------------------------------------------------------------- sections <-> config


def config_to_sections(cfg: ExperimentConfig) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for section, obj in (("world", cfg.world), ("encoder", cfg.encoder), ("train", cfg.train)):
        out[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj) if f.name not in _DERIVED}
    out["experiment"] = {"seeds": _format(cfg.seeds), "output_dir": cfg.output_dir, "name": cfg.name}
    return out


def config_from_sections(sections: dict[str, dict[str, str]]) -> ExperimentConfig:
    for section in sections:
        if section not in SECTIONS:
            raise ConfigFileError(f"unknown section [{section}]")
    parsed: dict[str, dict] = {}
    for section in SECTIONS:
        hints = section_hints(section)
        values = {}
        for key, raw in sections.get(section, {}).items():
            if key not in hints:
                raise ConfigFileError(f"unknown key '{key}' in [{section}]")
            values[key] = _parse(raw, hints[key], f"{section}.{key}")
        parsed[section] = values
    try:
        world = WorldConfig(**parsed["world"])
        encoder = build_encoder(world, **parsed["encoder"])
        hyper = TrainHyper(**parsed["train"])
    except ModelError as err:
        raise ConfigFileError(str(err)) from err
    return ExperimentConfig(world, encoder, hyper, **parsed["experiment"])


def _merge(base: dict[str, dict[str, str]], extra: dict[str, dict[str, str]]) -> dict[str, dict[str, str]]:
    out = {k: dict(v) for k, v in base.items()}
    for section, values in extra.items():
        out.setdefault(section, {}).update(values)
    return out


def read_config(path: str | Path, overrides: dict[str, dict[str, str]] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as err:
        raise ConfigFileError(f"cannot read config {path}: {err}") from err
    except configparser.Error as err:
        raise ConfigFileError(f"malformed config {path}: {err}") from err
    sections = {s: dict(parser[s]) for s in parser.sections()}
    return config_from_sections(_merge(sections, overrides or {}))


def write_config(cfg: ExperimentConfig, path: str | Path | None = None) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in config_to_sections(cfg).items():
        parser[section] = values
    buf = io.StringIO()
    parser.write(buf)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def default_config(**world_kwargs) -> ExperimentConfig:
    world = WorldConfig(**world_kwargs)
    return ExperimentConfig(world, build_encoder(world), TrainHyper())


def parse_override(text: str) -> tuple[str, str, str]:
    """``section.key=value`` -> (section, key, value)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigFileError(f"override {text!r} is not of the form section.key=value")
    lhs, value = text.split("=", 1)
    section, key = lhs.split(".", 1)
    if section not in SECTIONS:
        raise ConfigFileError(f"unknown section in override {text!r}")
    return section.strip(), key.strip(), value


__all__ = [
    "ConfigFileError",
    "ExperimentConfig",
    "build_encoder",
    "config_from_sections",
    "config_to_sections",
    "default_config",
    "parse_override",
    "read_config",
    "section_hints",
    "write_config",
]
