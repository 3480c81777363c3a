"""Pipeline configuration: one flat JSON document plus a few environment settings."""
import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from spikerep.utils.augment import AugmentSpec
from spikerep.utils.cluster import GmmOptions
from spikerep.utils.dsp import DetectionSpec, FilterSpec, Polarity
from spikerep.utils.errors import PipelineError
from spikerep.utils.repmodel import ModelConfig, TrainConfig
from spikerep.utils.synthgen import DriftModel, SynthSpec

load_dotenv()

logger = logging.getLogger(__name__)


class SortFeatures(str, Enum):
    LEARNED = "learned"
    PCA = "pca"


class GmmSelect(str, Enum):
    FIXED = "fixed"
    BIC = "bic"


class PipelineConfig(BaseModel):
    """Every tunable of every stage. Unknown keys are rejected."""

    model_config = {
        "extra": "forbid",
        "json_schema_extra": {"example": {"seed": 0, "synth_duration_s": 60.0, "epochs": 50, "gmm_components": 8}},
    }

    seed: int = Field(0, ge=0, description="Run seed expanded into per-stage substreams")

    synth_n_units: int = Field(8, ge=0)
    synth_rows: int = Field(16, ge=1)
    synth_cols: int = Field(4, ge=1)
    synth_pitch_um: float = Field(20.0, gt=0)
    synth_duration_s: float = Field(120.0, gt=0)
    synth_sample_rate_hz: float = Field(30000.0, gt=0)
    synth_firing_rate_hz: float = Field(4.0, gt=0)
    synth_amplitude_range: Tuple[float, float] = (60.0, 200.0)
    synth_noise_std: float = Field(10.0, ge=0)
    synth_noise_ar: float = Field(0.9, ge=0, lt=1)
    synth_spatial_decay_um: float = Field(25.0, gt=0)
    synth_template_samples: int = Field(121, ge=3)
    synth_drift_amplitude_um: float = Field(0.0, ge=0)
    synth_drift_cycles: float = Field(0.0, ge=0)

    preprocess_enabled: bool = True
    bad_channel_std_factor: float = Field(5.0, gt=1)
    filter_low_hz: float = Field(300.0, gt=0)
    filter_high_hz: float = Field(6000.0, gt=0)
    filter_order: int = Field(3, ge=1)

    detect_threshold_mads: float = Field(5.0, gt=0)
    detect_polarity: Polarity = Polarity.NEGATIVE
    detect_refractory_ms: float = Field(0.5, gt=0)
    detect_peak_window_ms: float = Field(0.7, gt=0)
    detect_merge_radius_um: float = Field(100.0, ge=0)
    detect_min_threshold_fraction: float = Field(0.1, ge=0, lt=1, description="Threshold floor as a fraction of the largest deflection")

    snippet_samples: int = Field(121, ge=1, description="Snippet length T (odd)")
    snippet_channels: int = Field(21, ge=1, description="Snippet channel count C (odd)")

    aug_voltage_jitter: Tuple[float, float] = (0.9, 1.1)
    aug_temporal_jitter_max: int = Field(4, ge=0)
    aug_crop_channels: int = Field(11, ge=1)
    aug_collision_prob: float = Field(0.5, ge=0, le=1)
    aug_collision_scale: Tuple[float, float] = (0.2, 1.0)
    aug_collision_offset_max: int = Field(30, ge=0)
    aug_noise_scale: Tuple[float, float] = (0.5, 2.0)
    aug_noise_ar_coeff: float = Field(0.9, ge=0, lt=1)

    conv_out_dim: int = Field(32, ge=1)
    conv_kernel: int = Field(5, ge=1)
    n_transformer_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    feedforward_dim: int = Field(64, ge=1)
    rep_dim: int = Field(32, ge=1)
    proj_dim: int = Field(64, ge=1)
    pred_hidden_dim: int = Field(64, ge=1)
    dae_hidden_dim: int = Field(64, ge=1)
    positional_encoding: bool = True
    input_scale_uv: float = Field(100.0, gt=0)
    temperature: float = Field(0.2, gt=0)
    momentum: float = Field(0.99, ge=0, le=1)
    alpha: float = Field(0.2, ge=0)

    epochs: int = Field(300, ge=1)
    batch_size: int = Field(256, ge=2)
    peak_lr: float = Field(1e-4, gt=0)
    warmup_epochs: int = Field(10, ge=0)
    weight_decay: float = Field(1e-2, ge=0)

    sort_features: SortFeatures = SortFeatures.LEARNED
    gmm_components: int = Field(8, ge=1)
    gmm_select: GmmSelect = GmmSelect.FIXED
    gmm_k_max: int = Field(16, ge=1)
    gmm_max_iter: int = Field(100, ge=1)
    gmm_tol: float = Field(1e-3, gt=0)
    gmm_reg: float = Field(1e-6, ge=0)
    gmm_n_init: int = Field(1, ge=1)

    match_delta_ms: float = Field(1.0, ge=0)
    snr_floor: float = Field(3.0, ge=0)
    train_spikes_per_unit: int = Field(1200, ge=1)
    eval_spikes_per_unit: int = Field(200, ge=1)
    protocol_units: int = Field(8, ge=1)
    protocol_seeds: int = Field(100, ge=1)
    protocol_gmm_runs: int = Field(50, ge=1)
    ablation_samples_per_unit: int = Field(500, ge=1)
    ablation_repeats: int = Field(20, ge=1)
    ablation_pca_dims: int = Field(2, ge=1)

    @model_validator(mode="after")
    def check_consistency(self) -> "PipelineConfig":
        if self.snippet_samples % 2 == 0 or self.snippet_channels % 2 == 0:
            raise ValueError("snippet_samples and snippet_channels must be odd")
        if self.aug_crop_channels > self.snippet_channels:
            raise ValueError("aug_crop_channels cannot exceed snippet_channels")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.filter_low_hz >= self.filter_high_hz:
            raise ValueError("filter_low_hz must be below filter_high_hz")
        return self

    def to_synth_spec(self) -> SynthSpec:
        return SynthSpec(
            n_units=self.synth_n_units,
            rows=self.synth_rows,
            cols=self.synth_cols,
            pitch_um=self.synth_pitch_um,
            duration_s=self.synth_duration_s,
            sample_rate_hz=self.synth_sample_rate_hz,
            firing_rate_hz=self.synth_firing_rate_hz,
            amplitude_range=tuple(self.synth_amplitude_range),
            noise_std=self.synth_noise_std,
            noise_ar=self.synth_noise_ar,
            drift=DriftModel(self.synth_drift_amplitude_um, self.synth_drift_cycles, self.synth_duration_s),
            seed=self.seed,
            spatial_decay_um=self.synth_spatial_decay_um,
            template_samples=self.synth_template_samples,
        )

    def to_filter_spec(self) -> FilterSpec:
        return FilterSpec(self.filter_low_hz, self.filter_high_hz, self.filter_order)

    def to_detection_spec(self, sample_rate_hz: float) -> DetectionSpec:
        to_samples = lambda ms: max(1, int(round(ms * 1e-3 * sample_rate_hz)))
        return DetectionSpec(
            threshold_mads=self.detect_threshold_mads,
            polarity=self.detect_polarity,
            refractory_samples=to_samples(self.detect_refractory_ms),
            peak_window_samples=to_samples(self.detect_peak_window_ms),
            merge_radius_um=self.detect_merge_radius_um,
            min_threshold_fraction=self.detect_min_threshold_fraction,
        )

    def match_delta_samples(self, sample_rate_hz: float) -> int:
        return int(round(self.match_delta_ms * 1e-3 * sample_rate_hz))

    def to_augment_spec(self) -> AugmentSpec:
        return AugmentSpec(
            voltage_jitter_range=tuple(self.aug_voltage_jitter),
            temporal_jitter_max=self.aug_temporal_jitter_max,
            crop_channels=self.aug_crop_channels,
            collision_prob=self.aug_collision_prob,
            collision_scale_range=tuple(self.aug_collision_scale),
            collision_offset_max=self.aug_collision_offset_max,
            noise_scale_range=tuple(self.aug_noise_scale),
            noise_ar_coeff=self.aug_noise_ar_coeff,
        )

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            conv_out_dim=self.conv_out_dim,
            conv_kernel=self.conv_kernel,
            n_transformer_layers=self.n_transformer_layers,
            n_heads=self.n_heads,
            feedforward_dim=self.feedforward_dim,
            rep_dim=self.rep_dim,
            proj_dim=self.proj_dim,
            pred_hidden_dim=self.pred_hidden_dim,
            dae_hidden_dim=self.dae_hidden_dim,
            temperature=self.temperature,
            momentum=self.momentum,
            alpha=self.alpha,
            snippet_samples=self.snippet_samples,
            snippet_channels=self.snippet_channels,
            positional_encoding=self.positional_encoding,
            input_scale_uv=self.input_scale_uv,
        )

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            peak_lr=self.peak_lr,
            warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )

    def to_gmm_options(self) -> GmmOptions:
        return GmmOptions(max_iter=self.gmm_max_iter, tol=self.gmm_tol, reg=self.gmm_reg, n_init=self.gmm_n_init)


def build_config(values: Optional[dict] = None) -> PipelineConfig:
    try:
        return PipelineConfig(**(values or {}))
    except ValidationError as e:
        errors = [{"loc": list(err["loc"]), "msg": err["msg"]} for err in e.errors()]
        raise PipelineError(f"Invalid configuration: {len(errors)} problem(s)", "config_invalid", {"errors": errors}) from e


def load_config(path: Optional[Union[str, Path]] = None, **overrides) -> PipelineConfig:
    """Read ``config.json``; no path or an empty document gives the defaults."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise PipelineError(f"Missing config file {path}", "missing_input", {"path": str(path)})
        text = path.read_text().strip()
        if text:
            try:
                values = json.loads(text)
            except json.JSONDecodeError as e:
                raise PipelineError(f"Malformed config {path}: {e}", "parse_error", {"path": str(path)}) from e
        if not isinstance(values, dict):
            raise PipelineError("Config must be a JSON object", "config_invalid", {"path": str(path)})
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(values)


def threads() -> Optional[int]:
    """SPIKEREP_THREADS as a positive int, or None for hardware concurrency."""
    raw = os.getenv("SPIKEREP_THREADS")
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError as e:
        raise PipelineError(f"SPIKEREP_THREADS={raw!r} is not an integer", "config_invalid", {}) from e
    if value < 1:
        raise PipelineError("SPIKEREP_THREADS must be ≥ 1", "config_invalid", {"value": value})
    return value


def log_level() -> str:
    return os.getenv("SPIKEREP_LOG_LEVEL", "INFO").upper()


def server_address() -> Tuple[str, int]:
    return os.getenv("SPIKEREP_HOST", "127.0.0.1"), int(os.getenv("SPIKEREP_PORT", "8000"))
