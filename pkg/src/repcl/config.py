"""Run configuration: versioned JSON schema with strict validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .backbone import ViTConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PoolConfig:
    size: int = 10          # pool size M
    prompt_len: int = 5     # tokens per prompt L_p


@dataclass(frozen=True)
class LossConfig:
    eps1: float = 1.0
    eps2: float = 0.0


@dataclass(frozen=True)
class AtomConfig:
    enabled: bool = True
    n: int = 2              # desk-scale merge intensity; r_max defaults to 2n
    r_max: int | None = None

    def effective_r_max(self) -> int:
        return 2 * self.n if self.r_max is None else self.r_max


@dataclass(frozen=True)
class AldConfig:
    enabled: bool = True
    theta_bar: float = 0.5
    gamma: float | None = None  # None -> 5 / iters_per_task (floor by midpoint)
    alpha: float = 0.9
    tau: int = 4

    def effective_gamma(self, iters_per_task: int) -> float:
        return 5.0 / iters_per_task if self.gamma is None else self.gamma


@dataclass(frozen=True)
class SurrogateSelection:
    enabled: bool = True


@dataclass(frozen=True)
class StreamConfig:
    n_tasks: int = 5
    classes_per_task: int = 2
    samples_per_class: int = 64
    test_samples_per_class: int = 32
    noise: float = 0.08


@dataclass(frozen=True)
class BudgetConfig:
    iters_per_task: int = 300
    batch_size: int = 16
    lr: float = 1.875e-3


@dataclass(frozen=True)
class PretrainConfig:
    classes: int = 64
    samples_per_class: int = 32
    iters: int = 1500
    lr: float = 1e-3
    noise: float = 0.08


_BACKBONE_KEYS = {"image_side", "patch_side", "depth", "width", "heads", "mlp_ratio"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    backbone: ViTConfig = field(default_factory=ViTConfig)
    surrogate: ViTConfig = field(default_factory=lambda: ViTConfig(
        depth=3, width=32, heads=2))
    pool: PoolConfig = field(default_factory=PoolConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    atom: AtomConfig = field(default_factory=AtomConfig)
    ald: AldConfig = field(default_factory=AldConfig)
    surrogate_selection: SurrogateSelection = field(default_factory=SurrogateSelection)
    stream: StreamConfig = field(default_factory=StreamConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    @property
    def n_classes(self) -> int:
        return self.stream.n_tasks * self.stream.classes_per_task

    def with_rep(self, atom: bool | None = None, ald: bool | None = None,
                 surrogate: bool | None = None) -> "RunConfig":
        from dataclasses import replace
        out = self
        if atom is not None:
            out = replace(out, atom=replace(out.atom, enabled=atom))
        if ald is not None:
            out = replace(out, ald=replace(out.ald, enabled=ald))
        if surrogate is not None:
            out = replace(out, surrogate_selection=SurrogateSelection(enabled=surrogate))
        return out


def _check_keys(d: dict, allowed, where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _vit_from(d: dict, where: str, n_classes: int, require_depth: bool) -> ViTConfig:
    _check_keys(d, _BACKBONE_KEYS, where)
    cfg = ViTConfig(n_classes=n_classes, **d)
    if require_depth and cfg.depth < 1:
        raise ConfigError(f"{where}.depth must be >= 1")
    return cfg


def _section(d: dict, name: str, cls, where_extra=None):
    sub = d.get(name, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"section {name!r} must be an object")
    fields = {f for f in cls.__dataclass_fields__}
    _check_keys(sub, fields, name)
    try:
        return cls(**sub)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid section {name!r}: {e}") from e


def parse_config(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a JSON object")
    top = {"schema_version", "seed", "backbone", "surrogate", "pool", "loss",
           "atom", "ald", "surrogate_selection", "stream", "budget", "pretrain"}
    _check_keys(d, top, "config")
    version = d.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    stream = _section(d, "stream", StreamConfig)
    n_classes = stream.n_tasks * stream.classes_per_task
    try:
        backbone = _vit_from(d.get("backbone", {}), "backbone", n_classes,
                             require_depth=True)
        surrogate_defaults = {"depth": 3, "width": 32, "heads": 2}
        surrogate = _vit_from({**surrogate_defaults, **d.get("surrogate", {})},
                              "surrogate", n_classes, require_depth=True)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    if surrogate.width > backbone.width:
        raise ConfigError("surrogate width must not exceed backbone width")
    cfg = RunConfig(
        seed=int(d.get("seed", 1)),
        backbone=backbone,
        surrogate=surrogate,
        pool=_section(d, "pool", PoolConfig),
        loss=_section(d, "loss", LossConfig),
        atom=_section(d, "atom", AtomConfig),
        ald=_section(d, "ald", AldConfig),
        surrogate_selection=_section(d, "surrogate_selection", SurrogateSelection),
        stream=stream,
        budget=_section(d, "budget", BudgetConfig),
        pretrain=_section(d, "pretrain", PretrainConfig),
    )
    if cfg.pool.size < 1 or cfg.pool.prompt_len < 0:
        raise ConfigError("pool.size must be >= 1 and pool.prompt_len >= 0")
    if cfg.atom.n < 0 or cfg.atom.effective_r_max() < 0:
        raise ConfigError("atom.n and atom.r_max must be nonnegative")
    if not 0 < cfg.ald.theta_bar <= 1 or not 0 < cfg.ald.alpha <= 1:
        raise ConfigError("ald.theta_bar and ald.alpha must be in (0, 1]")
    if (cfg.ald.gamma is not None and cfg.ald.gamma < 0) or cfg.ald.tau < 0:
        raise ConfigError("ald.gamma and ald.tau must be nonnegative")
    if cfg.budget.iters_per_task < 0 or cfg.budget.batch_size < 1:
        raise ConfigError("budget.iters_per_task >= 0 and batch_size >= 1 required")
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config(json.load(f))
