"""Run configuration: YAML schema, validation, and model assembly.

A run file has three optional sections (data, model, train).  Unknown
keys anywhere are rejected so typos fail loudly instead of silently
training with defaults.
"""

import os
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from .errors import ConfigError
from .model import build_solar_model
from .train import TrainConfig
from .variational import MixturePosterior

SPARSITY_MODES = ("explicit", "implicit", "free")
POSTERIOR_TYPES = ("kronecker", "diagonal")


@dataclass
class DataConfig:
    train_csv: str = None
    horizon: int = 3
    lags: int = 2
    day_start: str = "07:00"
    day_end: str = "19:00"


@dataclass
class ModelConfig:
    sparsity_mode: str = "explicit"
    inducing_count: object = 32        # int, or "standardized"
    site_spacing: float = 1.0
    site_coords: list = None
    noise_variance: float = 0.25
    delta_variance: float = 0.01
    x_lengthscale: object = 1.0       # scalar, or one value per input column
    x_variance: float = 1.0
    h_lengthscale: float = 1.0
    h_bandwidth: float = None
    ricker_dilation: float = None
    posterior: str = "kronecker"
    components: int = 1
    init_var: float = 0.01
    init_mean_std: float = 0.01


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def resolved_dict(self) -> dict:
        return {"data": asdict(self.data), "model": asdict(self.model),
                "train": self.train.as_dict()}


def _section(raw: dict, name: str) -> dict:
    sec = raw.pop(name, None)
    if sec is None:
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping, got {type(sec).__name__}")
    return sec


def _build_section(cls, values: dict, name: str):
    known = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}; known: {sorted(known)}")
    return cls(**values)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as handle:
            raw = yaml.safe_load(handle)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: {err}") from err
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    data_raw = _section(raw, "data")
    model_raw = _section(raw, "model")
    train_raw = _section(raw, "train")
    if raw:
        raise ConfigError(f"{path}: unknown top-level sections {sorted(raw)}; "
                          "expected data, model, train")

    data = _build_section(DataConfig, data_raw, "data")
    model = _build_section(ModelConfig, model_raw, "model")
    train = TrainConfig.from_dict(train_raw)

    if data.train_csv is not None:
        resolved = data.train_csv
        if not os.path.isabs(resolved):
            resolved = os.path.join(os.path.dirname(os.path.abspath(path)), resolved)
        if not os.path.exists(resolved):
            raise ConfigError(f"{path}: train_csv {data.train_csv!r} not found "
                              f"(looked at {resolved})")
        data.train_csv = resolved
    if int(data.horizon) < 1 or int(data.lags) < 1:
        raise ConfigError(f"horizon and lags must be >= 1, got {data.horizon}, {data.lags}")
    data.horizon, data.lags = int(data.horizon), int(data.lags)

    if model.sparsity_mode not in SPARSITY_MODES:
        raise ConfigError(f"sparsity_mode must be one of {SPARSITY_MODES}, "
                          f"got {model.sparsity_mode!r}")
    if model.posterior not in POSTERIOR_TYPES:
        raise ConfigError(f"posterior must be one of {POSTERIOR_TYPES}, "
                          f"got {model.posterior!r}")
    model.components = int(model.components)
    if model.components < 1:
        raise ConfigError(f"components must be >= 1, got {model.components}")
    if model.posterior == "kronecker" and model.components > 1:
        raise ConfigError("mixture posteriors (components > 1) require "
                          "posterior: diagonal")
    if model.inducing_count != "standardized":
        try:
            model.inducing_count = int(model.inducing_count)
        except (TypeError, ValueError):
            raise ConfigError(f"inducing_count must be an integer or 'standardized', "
                              f"got {model.inducing_count!r}") from None
        if model.inducing_count < 1:
            raise ConfigError(f"inducing_count must be >= 1, got {model.inducing_count}")
    return RunConfig(data=data, model=model, train=train)


def run_config_from_dict(raw: dict) -> RunConfig:
    """Rebuild a config from the copy a checkpoint carries.

    No path-existence checks here: the training CSV the config pointed at
    need not exist where the checkpoint is later used.
    """
    raw = dict(raw or {})
    data = _build_section(DataConfig, dict(raw.pop("data", None) or {}), "data")
    model = _build_section(ModelConfig, dict(raw.pop("model", None) or {}), "model")
    train = TrainConfig.from_dict(dict(raw.pop("train", None) or {}))
    if raw:
        raise ConfigError(f"unknown sections in stored config: {sorted(raw)}")
    return RunConfig(data=data, model=model, train=train)


def standardized_inducing_count(n_groups: int, baseline_m: int = 200,
                                baseline_groups: int = 1) -> int:
    """Inducing count that keeps total factorization work roughly constant.

    Per-step cost scales with n_groups * m^3, so increasing the group count
    by a factor c shrinks m by c^(1/3) relative to the baseline layout.
    """
    if n_groups < 1 or baseline_m < 1 or baseline_groups < 1:
        raise ConfigError("group and inducing counts must be >= 1")
    return max(1, round(baseline_m * (baseline_groups / n_groups) ** (1.0 / 3.0)))


def build_from_config(run_cfg: RunConfig, dataset):
    """Assemble model and posterior for an ingested dataset."""
    mcfg = run_cfg.model
    p = dataset.p
    if mcfg.site_coords is not None:
        coords = np.asarray(mcfg.site_coords, dtype=float)
        if coords.shape[0] != p:
            raise ConfigError(f"site_coords lists {coords.shape[0]} sites but the "
                              f"data has {p}")
    else:
        coords = mcfg.site_spacing * np.arange(p, dtype=float)
    m = mcfg.inducing_count
    if m == "standardized":
        m = standardized_inducing_count(2 * p)
    model = build_solar_model(
        coords, dataset.X, m_inducing=m, sparsity_mode=mcfg.sparsity_mode,
        seed=run_cfg.train.seed, noise_variance=mcfg.noise_variance,
        delta_variance=mcfg.delta_variance, ricker_dilation=mcfg.ricker_dilation,
        h_lengthscale=mcfg.h_lengthscale, h_bandwidth=mcfg.h_bandwidth,
        x_lengthscale=mcfg.x_lengthscale, x_variance=mcfg.x_variance)
    post = MixturePosterior.build(
        model, n_components=mcfg.components, cov_type=mcfg.posterior,
        init_var=mcfg.init_var, init_mean_std=mcfg.init_mean_std,
        seed=run_cfg.train.seed)
    return model, post
