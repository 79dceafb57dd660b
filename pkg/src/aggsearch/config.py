"""Run configuration: one JSON document fully specifies a run.

Sections mirror the pipeline: task (synthetic data), grid (network
geometry), search structural toggles, search_hyper (bi-level optimizer),
retrain, prune, paths, seed. Every command writes its resolved config next
to its outputs, and artifacts carry the config hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .data import SyntheticTaskSpec
from .errors import ConfigError
from .grid import PruneConfig
from .train import BiLevelConfig, RetrainConfig


@dataclass(frozen=True)
class GridConfig:
    levels: int = 4
    base_channels: int = 4
    decoder_mode: str = "normal"

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"grid.levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError(f"grid.base_channels must be >= 1, got {self.base_channels}")
        if self.decoder_mode not in ("normal", "expansion"):
            raise ConfigError(f"grid.decoder_mode must be 'normal' or 'expansion', "
                              f"got {self.decoder_mode!r}")


@dataclass(frozen=True)
class PathsConfig:
    data: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    graph: str | None = None
    model: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    val_fraction: float = 0.25
    sbb: bool = True
    mssa: bool = True
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    grid: GridConfig = field(default_factory=GridConfig)
    search: BiLevelConfig = field(default_factory=BiLevelConfig)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")

    def to_doc(self) -> dict:
        return {
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "task": asdict(self.task),
            "grid": asdict(self.grid),
            "search": {"sbb": self.sbb, "mssa": self.mssa},
            "search_hyper": asdict(self.search),
            "retrain": asdict(self.retrain),
            "prune": asdict(self.prune),
            "paths": asdict(self.paths),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "RunConfig":
        known = {"seed", "val_fraction", "task", "grid", "search", "search_hyper",
                 "retrain", "prune", "paths", "config_hash"}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown config field {key!r}")
        try:
            task = dict(doc.get("task", {}))
            for key in ("small_radius", "large_radius"):
                if key in task:
                    task[key] = tuple(task[key])
            hyper = dict(doc.get("search_hyper", {}))
            for key in ("w_betas", "arch_betas"):
                if key in hyper:
                    hyper[key] = tuple(hyper[key])
            retrain = dict(doc.get("retrain", {}))
            if "betas" in retrain:
                retrain["betas"] = tuple(retrain["betas"])
            toggles = doc.get("search", {})
            return cls(
                seed=int(doc.get("seed", 0)),
                val_fraction=float(doc.get("val_fraction", 0.25)),
                sbb=bool(toggles.get("sbb", True)),
                mssa=bool(toggles.get("mssa", True)),
                task=SyntheticTaskSpec(**task),
                grid=GridConfig(**dict(doc.get("grid", {}))),
                search=BiLevelConfig(**hyper),
                retrain=RetrainConfig(**retrain),
                prune=PruneConfig(**dict(doc.get("prune", {}))),
                paths=PathsConfig(**dict(doc.get("paths", {}))),
            )
        except TypeError as e:
            raise ConfigError(f"invalid config field: {e}") from None

    def hash(self) -> str:
        doc = self.to_doc()
        doc.pop("paths")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_paths(self, **kwargs) -> "RunConfig":
        return replace(self, paths=replace(self.paths, **kwargs))


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
    return RunConfig.from_doc(doc)


def save_config(path, cfg: RunConfig) -> None:
    doc = cfg.to_doc()
    doc["config_hash"] = cfg.hash()
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


_LEAF_PATHS: dict[str, str] = {}


def _register_leaves():
    base = RunConfig().to_doc()

    def walk(prefix, value):
        if isinstance(value, dict):
            for k, v in value.items():
                walk(f"{prefix}.{k}" if prefix else k, v)
        else:
            _LEAF_PATHS[prefix] = type(value).__name__
    walk("", base)


_register_leaves()


def leaf_fields() -> list[str]:
    """Dotted names of every overridable config field."""
    return sorted(_LEAF_PATHS)


def apply_override(doc: dict, dotted: str, raw: str) -> None:
    """Set one field in a config document from its CLI string form."""
    if dotted not in _LEAF_PATHS:
        raise ConfigError(f"unknown config field {dotted!r}")
    parts = dotted.split(".")
    target = doc
    for part in parts[:-1]:
        target = target.setdefault(part, {})
    leaf = parts[-1]
    reference = RunConfig().to_doc()
    for part in parts[:-1]:
        reference = reference[part]
    ref_val = reference[leaf]
    try:
        if isinstance(ref_val, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            value = raw.lower() in ("true", "1")
        elif isinstance(ref_val, int):
            value = int(raw)
        elif isinstance(ref_val, float):
            value = float(raw)
        elif isinstance(ref_val, (list, tuple)):
            value = [float(x) for x in raw.split(",")]
        elif ref_val is None or isinstance(ref_val, str):
            value = raw
        else:
            raise ValueError(f"unsupported type for {dotted}")
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} for config field {dotted!r}") from None
    target[leaf] = value


def ablation_preset() -> RunConfig:
    """Desk-scale defaults for the ablation matrix: small dataset, short
    schedules, learning rates scaled for the tiny regime."""
    return RunConfig(
        task=SyntheticTaskSpec(rank=2, extent=64, samples=32, noise_std=0.1),
        grid=GridConfig(levels=4, base_channels=4),
        search=BiLevelConfig(epochs=8, batch_size=2, w_lr=3e-3, arch_lr=3e-2),
        retrain=RetrainConfig(epochs=10, batch_size=2, lr=3e-3),
    )
