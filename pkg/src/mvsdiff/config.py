"""Run configuration: model variants, ablation switches and every tunable of a run.

Configs are nested frozen dataclasses loaded from TOML (or JSON). Unknown
keys are rejected with the line they appear on; ``key.path=value`` overrides
are applied on top of the file.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .sampling import SamplingConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelVariant:
    name: str
    num_stages: int
    refine_stages: tuple[int, ...]
    iterations: dict
    sampling: dict
    sigma: dict

    @property
    def final_ratio(self) -> int:
        return 2 ** (4 - self.num_stages)

    def __post_init__(self):
        if self.name == "DiffMVS" and (self.num_stages != 2 or self.refine_stages != (2,)):
            raise ValueError("DiffMVS has two stages and refines stage 2")
        if self.name == "CasDiffMVS" and (self.num_stages != 3 or self.refine_stages != (2, 3)):
            raise ValueError("CasDiffMVS has three stages and refines stages 2 and 3")


def make_variant(name: str, iterations: int | None = None, sampling: dict | None = None,
                 sigma: dict | None = None) -> ModelVariant:
    """Preset stage plans with their default hyper-parameters."""
    if name == "DiffMVS":
        base = ModelVariant(
            "DiffMVS", 2, (2,), {2: 4},
            {2: SamplingConfig(3 / 192.0, 0.25, 4.0, 6)},
            {2: 0.5},
        )
    elif name == "CasDiffMVS":
        base = ModelVariant(
            "CasDiffMVS", 3, (2, 3), {2: 3, 3: 3},
            {2: SamplingConfig(1 / 96.0, 0.125, 8.0, 4), 3: SamplingConfig(1 / 192.0, 0.125, 8.0, 4)},
            {2: 0.5, 3: 0.1},
        )
    else:
        raise ValueError(f"unknown variant {name!r} (DiffMVS or CasDiffMVS)")
    its = dict(base.iterations)
    if iterations is not None:
        its = {m: iterations for m in its}
    samp = {**base.sampling, **(sampling or {})}
    sig = {**base.sigma, **(sigma or {})}
    return dataclasses.replace(base, iterations=its, sampling=samp, sigma=sig)


@dataclass(frozen=True)
class ModelConfig:
    num_init_hypotheses: int = 48
    groups: int = 4
    feature_channels: tuple[int, ...] = (32, 16, 8)
    context_dim: int = 16
    hidden_dim: int = 32
    unet_width: int = 32
    costreg_base: int = 8
    iterations: int | None = None           # overrides the variant's K for every stage


@dataclass(frozen=True)
class StageSampling:
    r_init: float | None = None
    lambda_min: float | None = None
    lambda_max: float | None = None
    num_samples: int | None = None


@dataclass(frozen=True)
class SamplingOverrides:
    stage2: StageSampling = field(default_factory=StageSampling)
    stage3: StageSampling = field(default_factory=StageSampling)


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma2: float | None = None
    sigma3: float | None = None
    ddim_steps: int = 1


@dataclass(frozen=True)
class LossSettings:
    lambda_c: float = 0.05
    beta: float = 0.9


@dataclass(frozen=True)
class AblationConfig:
    """Experiment axes; the defaults are the full method.

    diffusion: "diffusion" | "none" | "noise_train" | "noise_train_test"
    sampling: "confidence" | "fixed" | "single" | "conf_regularization"
    denoiser: "gru" | "stacked" | "single"
    """

    diffusion: str = "diffusion"
    use_cost_volume: bool = True
    use_depth_context: bool = True
    use_image_context: bool = True
    sampling: str = "confidence"
    denoiser: str = "gru"

    def __post_init__(self):
        for name, allowed in (("diffusion", ("diffusion", "none", "noise_train", "noise_train_test")),
                              ("sampling", ("confidence", "fixed", "single", "conf_regularization")),
                              ("denoiser", ("gru", "stacked", "single"))):
            if getattr(self, name) not in allowed:
                raise ValueError(f"ablation.{name} must be one of {allowed}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    max_lr: float = 1e-3
    max_steps: int | None = None
    finetune: bool = False
    val_fraction: float = 0.0
    log_every: int = 50


@dataclass(frozen=True)
class DataConfig:
    train_manifest: str | None = None
    val_manifest: str | None = None
    test_manifest: str | None = None
    output_dir: str = "runs/default"
    checkpoint: str | None = None


@dataclass(frozen=True)
class GenerateConfig:
    num_scenes: int = 8
    profile: str = "near"
    height: int = 96
    width: int = 128
    num_views: int = 3


@dataclass(frozen=True)
class FusionSettings:
    conf_min: float = 0.3
    reproj_max: float = 1.0
    rel_depth_max: float = 0.01
    min_views: int = 2


@dataclass(frozen=True)
class EvalConfig:
    dist_thresh: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    variant: str = "DiffMVS"
    model: ModelConfig = field(default_factory=ModelConfig)
    sampling: SamplingOverrides = field(default_factory=SamplingOverrides)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossSettings = field(default_factory=LossSettings)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def model_variant(self) -> ModelVariant:
        sampling = {}
        base = make_variant(self.variant)
        for m in base.refine_stages:
            over = getattr(self.sampling, f"stage{m}")
            cur = base.sampling[m]
            sampling[m] = SamplingConfig(
                over.r_init if over.r_init is not None else cur.r_init,
                over.lambda_min if over.lambda_min is not None else cur.lambda_min,
                over.lambda_max if over.lambda_max is not None else cur.lambda_max,
                over.num_samples if over.num_samples is not None else cur.num_samples,
            )
        sigma = {m: getattr(self.schedule, f"sigma{m}") for m in base.refine_stages
                 if getattr(self.schedule, f"sigma{m}") is not None}
        return make_variant(self.variant, self.model.iterations, sampling, sigma)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    leaf = key.split(".")[-1]
    for i, line in enumerate(text.splitlines(), 1):
        if re.match(rf'^\s*"?{re.escape(leaf)}"?\s*[=:]', line) or re.match(rf"^\s*\[.*\b{re.escape(leaf)}\]", line):
            return f" (line {i})"
    return ""


def _coerce(value, typ, path):
    origin = getattr(typ, "__origin__", None)
    args = getattr(typ, "__args__", ())
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{path}: value required")
    if type(None) in args:
        typ = next(a for a in args if a is not type(None))
        origin, args = getattr(typ, "__origin__", None), getattr(typ, "__args__", ())
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_coerce(v, args[0], path) for v in value)
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, path: str, text: str | None):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        full = f"{path}.{key}" if path else key
        if key not in hints:
            raise ConfigError(f"unknown config key '{full}'{_line_of(text, full)}")
        ftype = hints[key]
        if dataclasses.is_dataclass(ftype):
            kwargs[key] = _build(ftype, value, full, text)
        else:
            try:
                kwargs[key] = _coerce(value, ftype, full)
            except ConfigError as exc:
                raise ConfigError(f"{exc}{_line_of(text, full)}") from None
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data: dict, text: str | None = None) -> RunConfig:
    cfg = _build(RunConfig, data, "", text)
    try:
        cfg.model_variant()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse_override(item: str) -> tuple[list[str], Any]:
    """``a.b=value`` -> (["a", "b"], parsed value); values use TOML literal syntax, bare words are strings."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        keys, value = parse_override(item)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-table")
        node[keys[-1]] = value
    return data


def load_config(path=None, overrides=()) -> RunConfig:
    """Load TOML/JSON config (or defaults when ``path`` is None) and apply overrides."""
    text, data = None, {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if isinstance(data, dict) and set(data) == {"config", "config_hash"}:
            data = data["config"]   # written by save_config
    return config_from_dict(apply_overrides(data, overrides), text)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps({"config": cfg.to_dict(), "config_hash": cfg.hash()}, indent=2, default=str))
