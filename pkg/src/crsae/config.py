"""Experiment configuration: one JSON document with a section per stage.

Unknown keys anywhere are rejected so that typos fail loudly instead of
silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .simulator import SimConfig
from .trainer import TrainConfig

__all__ = [
    "ConfigError",
    "EncoderSettings",
    "EvalSettings",
    "ExperimentConfig",
    "GradcheckSettings",
    "InitSettings",
    "SweepSettings",
    "load_config",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSettings:
    """FISTA depth plus the policy for ``lam`` and ``L``.

    ``lam`` fixes the sparsity weight; when ``None`` it comes from the noise
    heuristic applied to the residual of the initial dictionary. ``L=None``
    means power iteration on the initial dictionary.
    """

    T: int = 200
    lam: float | None = None
    lambda_scale: float = 1.0
    noise_mode: str = "rms"
    L: float | None = None

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("encoder.T must be >= 1")
        if self.lam is not None and not (self.lam > 0 and math.isfinite(self.lam)):
            raise ConfigError("encoder.lam must be positive")
        if self.lambda_scale <= 0:
            raise ConfigError("encoder.lambda_scale must be positive")
        if self.noise_mode not in ("paper", "rms"):
            raise ConfigError("encoder.noise_mode must be 'paper' or 'rms'")
        if self.L is not None and not (self.L > 0 and math.isfinite(self.L)):
            raise ConfigError("encoder.L must be positive")


@dataclass(frozen=True)
class InitSettings:
    """Starting dictionary: ``perturbed`` (error drawn from ``err_range``), ``gaussian`` or ``true``."""

    kind: str = "perturbed"
    err_range: tuple[float, float] = (0.4, 0.5)

    def __post_init__(self):
        if self.kind not in ("perturbed", "gaussian", "true"):
            raise ConfigError("init.kind must be 'perturbed', 'gaussian' or 'true'")
        lo, hi = self.err_range
        if not 0 <= lo <= hi < 1:
            raise ConfigError("init.err_range must satisfy 0 <= lo <= hi < 1")


@dataclass(frozen=True)
class SweepSettings:
    snr_db: tuple[float, ...] = (4.0, 8.0, 12.0, 16.0, 20.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    max_epochs: int | None = None

    def __post_init__(self):
        if not self.snr_db or not self.seeds:
            raise ConfigError("sweep needs at least one SNR and one seed")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ConfigError("sweep.max_epochs must be >= 1")


@dataclass(frozen=True)
class GradcheckSettings:
    shapes: tuple[tuple[int, int, int, int], ...] = ((1, 3, 12, 1), (1, 3, 12, 3), (2, 8, 64, 5), (3, 8, 64, 10))
    lam: float = 0.1
    step: float = 1e-6
    tol: float = 1e-5
    # refuse checks that would need more than this many forward passes
    max_passes: int = 10_000

    def __post_init__(self):
        for shape in self.shapes:
            if len(shape) != 4 or min(shape) < 1:
                raise ConfigError(f"gradcheck shape {shape} must be four positive integers (C, K, W, T)")
            C, K, W, _ = shape
            if W < K:
                raise ConfigError(f"gradcheck shape {shape}: W < K")
            if 2 * C * K > self.max_passes:
                raise ConfigError(f"gradcheck shape {shape} needs {2 * C * K} forward passes")
        if self.step <= 0 or self.tol <= 0 or self.lam <= 0:
            raise ConfigError("gradcheck lam, step and tol must be positive")


@dataclass(frozen=True)
class EvalSettings:
    max_shift: int = 0

    def __post_init__(self):
        if self.max_shift < 0:
            raise ConfigError("eval.max_shift must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    simulation: SimConfig = field(default_factory=SimConfig)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    training: TrainConfig = field(default_factory=TrainConfig)
    init: InitSettings = field(default_factory=InitSettings)
    # explicit (train, val, test) window counts; None keeps the 630:70:20 proportions
    split: tuple[int, int, int] | None = None
    sweep: SweepSettings = field(default_factory=SweepSettings)
    gradcheck: GradcheckSettings = field(default_factory=GradcheckSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def __post_init__(self):
        if self.split is not None and (len(self.split) != 3 or min(self.split) < 0 or self.split[0] < 1):
            raise ConfigError("split must be three non-negative counts with at least one training window")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with fields replaced inside sections, e.g. ``training={"seed": 3}``."""
        data = self.to_dict()
        for name, values in sections.items():
            if name not in data:
                raise ConfigError(f"unknown section {name!r}")
            if isinstance(data[name], dict):
                data[name].update(values)
            else:
                data[name] = values
        return ExperimentConfig.from_dict(data)


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_json(Path(path).read_text(encoding="utf-8"))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        path = f"{where}.{name}" if where else name
        if sub is not None:
            kwargs[name] = _build(sub, value, path)
        else:
            kwargs[name] = _freeze(value)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


_SECTIONS = {
    (ExperimentConfig, "simulation"): SimConfig,
    (ExperimentConfig, "encoder"): EncoderSettings,
    (ExperimentConfig, "training"): TrainConfig,
    (ExperimentConfig, "init"): InitSettings,
    (ExperimentConfig, "sweep"): SweepSettings,
    (ExperimentConfig, "gradcheck"): GradcheckSettings,
    (ExperimentConfig, "eval"): EvalSettings,
}
