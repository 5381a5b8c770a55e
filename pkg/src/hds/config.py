"""Experiment configuration: one YAML file fully determines a run."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from . import data as data_mod
from .dynamics import BlackBoxConfig
from .models import ModelConfig, build_layout
from .posterior import EncoderConfig, LatentSpec
from .objective import ESTIMATORS


class ConfigError(ValueError):
    """Invalid configuration; reported before any computation starts."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 36
    K_train: int = 100
    K_eval: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    estimator: str = "dreg"
    n_folds: int = 4
    grad_abort: float = 1e6
    eval_chunk: int = 20000   # importance samples per evaluation pass

    def __post_init__(self):
        for name in ("epochs", "batch_size", "K_train", "K_eval", "n_folds", "eval_chunk"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"training.{name} must be positive")
        if self.n_folds < 2:
            raise ConfigError("training.n_folds must be >= 2")
        if not self.lr > 0:
            raise ConfigError("training.lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("training.beta1 and training.beta2 must lie in [0, 1)")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"training.estimator must be one of {ESTIMATORS}")


@dataclass(frozen=True)
class SynthConfig:
    devices: tuple = data_mod.DEFAULT_DEVICES
    C6: tuple = data_mod.DEFAULT_C6
    C12: tuple = data_mod.DEFAULT_C12
    T: int = 50
    t_end: float = 24.0
    noise: Any = 0.05         # fraction of each signal's maximum, or {signal: std}
    substeps: int = 8
    seed: int | None = None   # defaults to training.seed
    truth: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    catalog: Mapping = field(default_factory=lambda: data_mod.CassetteCatalog().to_dict())
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    prior: Mapping[str, LatentSpec] = field(default_factory=dict)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: str = "runs/default"

    # -- derived -----------------------------------------------------------
    @property
    def catalog(self) -> data_mod.CassetteCatalog:
        return data_mod.CassetteCatalog.from_dict(self.data.catalog)

    def layout(self):
        return build_layout(self.model, self.prior)

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    def with_training(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, training=dataclasses.replace(self.training, **changes))

    def to_dict(self) -> dict:
        d = _plain(dataclasses.asdict(self))
        d["prior"] = {n: {"block": s.block, "kind": s.kind, "mean": s.mean, "std": s.std}
                      for n, s in self.prior.items()}
        return d

    def hash(self) -> str:
        """Digest of everything that shapes the training trajectory.

        The output directory and the epoch count are excluded so a run can be
        resumed with a larger epoch budget.
        """
        d = self.to_dict()
        d.pop("output")
        d["training"].pop("epochs")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def load_data(self) -> data_mod.Dataset:
        """Read the configured CSV, or run the synthetic generator."""
        if self.data.path is not None:
            return data_mod.load_dataset(self.data.path, self.catalog)
        return synthesise(self)


def synthesise(cfg: ExperimentConfig) -> data_mod.Dataset:
    s = cfg.data.synth
    seed = cfg.training.seed if s.seed is None else s.seed
    return data_mod.synth_generate(
        cfg.catalog, list(s.devices), data_mod.treatment_grid(s.C6, s.C12),
        data_mod.SyntheticTruth.from_dict(s.truth), s.noise, s.T, seed, s.t_end, s.substeps,
    )


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# parsing


def _section(cls, raw, where: str, nested: Mapping[str, type] | None = None):
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed: {sorted(names)}")
    kwargs = dict(raw)
    for key, sub in (nested or {}).items():
        if key in kwargs:
            kwargs[key] = _section(sub, kwargs[key], f"{where}.{key}")
    for key in ("devices", "C6", "C12"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def _priors(raw, model: ModelConfig) -> dict[str, LatentSpec]:
    from .models import default_priors, required_latents

    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigError("prior: expected a mapping of latent name to spec")
    required = required_latents(model)
    defaults = default_priors(model)
    out = {}
    for name, spec in raw.items():
        if name not in required:
            raise ConfigError(f"prior: unknown latent {name!r} for model kind {model.kind}; "
                              f"expected one of {sorted(required)}")
        if not isinstance(spec, Mapping):
            raise ConfigError(f"prior.{name}: expected a mapping")
        unknown = sorted(set(spec) - {"block", "kind", "mean", "std"})
        if unknown:
            raise ConfigError(f"prior.{name}: unknown keys {unknown}")
        base = defaults[name]
        try:
            out[name] = LatentSpec(name, spec.get("block", base.block), spec.get("kind", base.kind),
                                   float(spec.get("mean", base.mean)), float(spec.get("std", base.std)))
        except ValueError as err:
            raise ConfigError(f"prior.{name}: {err}") from None
    return out


SECTIONS = ("model", "prior", "encoder", "training", "data", "output")


def config_from_dict(raw: Mapping | None) -> ExperimentConfig:
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}; allowed: {list(SECTIONS)}")
    model = _section(ModelConfig, raw.get("model"), "model", {"blackbox": BlackBoxConfig})
    cfg = ExperimentConfig(
        model=model,
        prior=_priors(raw.get("prior"), model),
        encoder=_section(EncoderConfig, raw.get("encoder"), "encoder"),
        training=_section(TrainConfig, raw.get("training"), "training"),
        data=_section(DataConfig, raw.get("data"), "data", {"synth": SynthConfig}),
        output=str(raw.get("output", "runs/default")),
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    try:
        catalog = cfg.catalog
    except (TypeError, ValueError) as err:
        raise ConfigError(f"data.catalog: {err}") from None
    for dev in cfg.data.synth.devices:
        try:
            data_mod.encode_device(dev, catalog)
        except ValueError as err:
            raise ConfigError(f"data.synth.devices: {err}") from None
    try:
        cfg.layout()
    except (KeyError, ValueError) as err:
        raise ConfigError(f"prior: {err}") from None
    noise = cfg.data.synth.noise
    if isinstance(noise, Mapping):
        missing = [s for s in data_mod.SIGNALS if s not in noise]
        if missing:
            raise ConfigError(f"data.synth.noise: missing signals {missing}")
    elif not isinstance(noise, (int, float)) or noise < 0:
        raise ConfigError("data.synth.noise must be a non-negative fraction or a mapping of signal to std")
    try:
        data_mod.SyntheticTruth.from_dict(cfg.data.synth.truth)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"data.synth.truth: {err}") from None


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: invalid YAML: {err}") from None
    if raw is not None and not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)
