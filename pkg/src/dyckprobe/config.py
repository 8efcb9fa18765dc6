"""Run configuration: named scale presets and the JSON config file format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dyck_gen import GrammarConfig
from .probe_lab import ProbeConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    count: int = 100_000
    train: TrainConfig = field(default_factory=TrainConfig)
    units: tuple[int, ...] = (2, 10, 20)
    seeds: tuple[int, ...] = (0, 1, 2)
    repeats: int = 10
    tolerance: float = 0.05
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    scalar_units: tuple[int, ...] = (2, 8, 50)
    sequence_units: tuple[int, ...] = (20,)

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "profile": self.profile,
            "seed": self.seed,
            "grammar": asdict(self.grammar),
            "count": self.count,
            "train": self.train.to_dict(),
            "units": list(self.units),
            "seeds": list(self.seeds),
            "repeats": self.repeats,
            "tolerance": self.tolerance,
            "probe": asdict(self.probe),
            "scalar_units": list(self.scalar_units),
            "sequence_units": list(self.sequence_units),
        }
        d["grammar"]["r_range"] = list(self.grammar.r_range)
        return d


def desk_profile() -> RunConfig:
    """Acceptance-suite scale: 100k sentences, a handful of models."""
    return RunConfig(
        profile="desk",
        grammar=GrammarConfig(n=100, seed=7),
        count=100_000,
        train=TrainConfig(lr=5e-3, epochs=5),
        units=(2, 10, 20),
        seeds=(0, 1, 2),
        repeats=10,
        probe=ProbeConfig(epochs=10, lr=3e-3),
    )


def full_profile() -> RunConfig:
    """Paper scale: 1M sentences, H = 2..50, 100 generalization repeats."""
    return RunConfig(
        profile="full",
        grammar=GrammarConfig(n=100, seed=7),
        count=1_000_000,
        train=TrainConfig(lr=1e-3, epochs=50, plateau_patience=2),
        units=tuple(range(2, 51, 2)),
        seeds=(0,),
        repeats=100,
    )


PROFILES = {"desk": desk_profile, "full": full_profile}


def profile(name: str) -> RunConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def _update(obj, values: dict, where: str):
    known = {f.name for f in fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {where} field(s): {sorted(unknown)}")
    return replace(obj, **values)


def from_dict(d: dict) -> RunConfig:
    """Overlay ``d`` on the preset it names; every key must be known."""
    d = dict(d)
    version = d.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version must be {SCHEMA_VERSION}, got {version!r}")
    cfg = profile(d.pop("profile", "desk"))
    try:
        if "grammar" in d:
            g = dict(d.pop("grammar"))
            if "r_range" in g:
                g["r_range"] = tuple(g["r_range"])
            cfg.grammar = _update(cfg.grammar, g, "grammar")
        if "train" in d:
            cfg.train = _update(cfg.train, d.pop("train"), "train")
        if "probe" in d:
            cfg.probe = _update(cfg.probe, d.pop("probe"), "probe")
        for key in ("units", "seeds", "scalar_units", "sequence_units"):
            if key in d:
                d[key] = tuple(int(x) for x in d[key])
        cfg = _update(cfg, d, "run")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg


def load(path: str | Path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def dump(cfg: RunConfig, path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
