"""
Validated configuration objects for generation, model, training and evaluation.

Includes:
- GenConfig, ModelConfig, LossWeights, TrainConfig, EvalConfig, RunConfig
- load_run_config: Reads a JSON run file and applies flag overrides.
"""

import json
import os
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .constants import (
    ABLATION_PRESETS,
    DEFAULT_CC_MARGIN_RHO,
    DEFAULT_LAMBDA_F,
    DEFAULT_LAMBDA_M,
    DEFAULT_LAMBDA_O,
    DEFAULT_MARGIN_ALPHA,
    EMBED_MODES,
    GALLERY_KINDS,
    MODALITIES,
    ORTH_FORMS,
    SHOT_MODES,
)
from .errors import ConfigError

_FROZEN = ConfigDict(extra="forbid", frozen=True)


class GenConfig(BaseModel):
    model_config = _FROZEN

    num_ids: int = Field(50, ge=2)
    latent_shared: int = Field(8, ge=1)
    latent_specific: int = Field(4, ge=1)
    input_dim: int = Field(64, ge=1)
    cams_v: int = Field(3, ge=1)
    cams_i: int = Field(2, ge=1)
    samples_per_id_per_cam: int = Field(20, ge=1)
    noise_sigma: float = Field(0.1, ge=0.0)
    camera_bias_sigma: float = Field(0.05, ge=0.0)
    seed: int = Field(0, ge=0, lt=2**64)
    test_fraction: float = Field(0.5, gt=0.0, lt=1.0)


class ModelConfig(BaseModel):
    model_config = _FROZEN

    input_dim: int = Field(64, ge=1)
    hidden_dims: List[int] = Field(default_factory=lambda: [128, 128])
    d_e: int = Field(32, ge=1)
    d_r: int = Field(32, ge=1)
    num_ids: int = Field(50, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_hidden(self) -> "ModelConfig":
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be a non-empty list of positive widths")
        return self

    @property
    def shared_width(self) -> int:
        return self.hidden_dims[-1]


class LossWeights(BaseModel):
    model_config = _FROZEN

    lambda_m: float = Field(DEFAULT_LAMBDA_M, ge=0.0, allow_inf_nan=False)
    lambda_o: float = Field(DEFAULT_LAMBDA_O, ge=0.0, allow_inf_nan=False)
    lambda_f: float = Field(DEFAULT_LAMBDA_F, ge=0.0, allow_inf_nan=False)
    margin_alpha: float = Field(DEFAULT_MARGIN_ALPHA, ge=0.0, allow_inf_nan=False)
    cc_margin_rho: float = Field(DEFAULT_CC_MARGIN_RHO, ge=0.0, allow_inf_nan=False)
    orth_form: str = "squared"
    ymr_enabled: bool = True

    @model_validator(mode="after")
    def _check_orth_form(self) -> "LossWeights":
        if self.orth_form not in ORTH_FORMS:
            raise ValueError(f"orth_form must be one of {ORTH_FORMS}")
        return self


class TrainConfig(BaseModel):
    model_config = _FROZEN

    epochs: int = Field(60, ge=0)
    base_lr: float = Field(0.0004, gt=0.0)
    warmup_epochs: int = Field(10, ge=0)
    decay_epochs: List[Tuple[int, float]] = Field(default_factory=lambda: [(30, 0.1), (45, 0.01)])
    p_ids: int = Field(10, ge=2)
    k_per_modality: int = Field(8, ge=2)
    weights: LossWeights = Field(default_factory=LossWeights)
    grl_coeff: float = Field(1.0, ge=0.0)
    adam: Tuple[float, float, float] = (0.9, 0.999, 1e-8)
    seed: int = Field(0, ge=0, lt=2**64)


class EvalConfig(BaseModel):
    model_config = _FROZEN

    settings: List[str] = Field(default_factory=lambda: list(GALLERY_KINDS))
    embed_modes: List[str] = Field(default_factory=lambda: ["fused_rule"])
    query_modality: str = "I"
    shot_mode: str = "all"
    trials: int = Field(10, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_names(self) -> "EvalConfig":
        unknown = [s for s in self.settings if s not in GALLERY_KINDS]
        if unknown:
            raise ValueError(f"unknown setting(s) {unknown}; valid names: {', '.join(GALLERY_KINDS)}")
        unknown = [m for m in self.embed_modes if m not in EMBED_MODES]
        if unknown:
            raise ValueError(f"unknown embed mode(s) {unknown}; valid names: {', '.join(EMBED_MODES)}")
        if self.query_modality not in MODALITIES:
            raise ValueError(f"query_modality must be one of {MODALITIES}")
        if self.shot_mode not in SHOT_MODES:
            raise ValueError(f"shot_mode must be one of {SHOT_MODES}")
        return self


class RunConfig(BaseModel):
    model_config = _FROZEN

    gen: GenConfig = Field(default_factory=GenConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    out: str = "runs/default"


def apply_ablation(weights: LossWeights, preset: str) -> LossWeights:
    """
    Return a copy of `weights` with the named ablation preset applied.
    Unknown presets raise ConfigError listing the valid names.
    """
    if preset not in ABLATION_PRESETS:
        raise ConfigError(f"unknown ablation preset '{preset}'; valid names: {', '.join(ABLATION_PRESETS)}")
    return weights.model_copy(update=ABLATION_PRESETS[preset])


def _deep_update(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_update(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build a RunConfig from an optional UTF-8 JSON file, then apply nested
    `overrides` (flags win over file values). The default output directory
    comes from MIXER_OUT_DIR when set.
    Raises ConfigError for unreadable files or invalid values.
    """

    raw: Dict[str, Any] = {}
    env_out = os.getenv("MIXER_OUT_DIR")
    if env_out:
        raw["out"] = env_out

    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = _deep_update(raw, json.load(f))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e

    if overrides:
        raw = _deep_update(raw, overrides)

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def validate_gen_config(data: Dict[str, Any]) -> GenConfig:
    try:
        return GenConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e
