"""Run configuration: one YAML document with a section per stage.

Every key is optional. Unknown keys anywhere raise :class:`ConfigError`.
Precedence is CLI flag > config file > module default.
"""

from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path
from typing import Any, Optional, Tuple

import yaml

from .errors import ConfigError
from .losses import LossConfig
from .metrics import MetricConfig
from .phantom import PhantomConfig
from .preprocess import AugmentPolicy


@dataclasses.dataclass(frozen=True)
class PathsSection:
    out: str = "runs/default"
    data: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class PreprocessSection:
    crop: Optional[Tuple[int, int, int]] = None
    normalize_first: bool = False


@dataclasses.dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 5e-5
    weight_decay: float = 1e-3
    amsgrad: bool = True
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 1
    deterministic: bool = True
    augment_models: Tuple[str, ...] = ("ddunet",)
    aux_loss_weight: float = 0.0


@dataclasses.dataclass(frozen=True)
class ModelSection:
    init_filters: int = 16
    # None keeps each architecture's own default (0.2 for the 4-level nets, 0.1 for ddunet)
    dropout_p: Optional[float] = None
    gated_skips: bool = True
    gate_per_channel: bool = False
    aux_heads: bool = False
    max_norm_groups: int = 8
    se_reduction: int = 4


@dataclasses.dataclass(frozen=True)
class EnsembleSection:
    reference_index: int = 0
    mode: str = "vote"


@dataclasses.dataclass(frozen=True)
class PipelineSection:
    n_subjects: int = 20
    epochs: int = 5
    init_filters: int = 8
    models: Tuple[str, ...] = ("segresnet", "attn_resunet", "ddunet")
    # desk-scale rate for the short phantom runs; None keeps train.learning_rate
    learning_rate: Optional[float] = 1e-3


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    jobs: int = 1
    paths: PathsSection = PathsSection()
    phantom: PhantomConfig = PhantomConfig()
    preprocess: PreprocessSection = PreprocessSection()
    train: TrainSection = TrainSection()
    loss: LossConfig = LossConfig()
    augment: AugmentPolicy = AugmentPolicy()
    model: ModelSection = ModelSection()
    ensemble: EnsembleSection = EnsembleSection()
    metrics: MetricConfig = MetricConfig()
    pipeline: PipelineSection = PipelineSection()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key {where + '.' if where else ''}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}" if where else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: Optional[dict]) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read ``path`` (YAML) and apply dotted-key ``overrides`` on top."""
    data: dict = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping")
        data = loaded or {}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = list(value) if isinstance(value, tuple) else value
    return config_from_dict(data)


def derive_seed(seed: int, stage: str) -> int:
    """Stable per-stage seed fanned out from the top-level seed."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")
