import json

import pytest

from spikerep.utils.augment import AugmentSpec
from spikerep.utils.cluster import GmmOptions
from spikerep.utils.config import SortFeatures, build_config, load_config, threads
from spikerep.utils.dsp import FilterSpec
from spikerep.utils.errors import PipelineError
from spikerep.utils.repmodel import ModelConfig, TrainConfig


def test_defaults_feed_every_stage():
    cfg = load_config()
    assert cfg.to_filter_spec() == FilterSpec(300.0, 6000.0, 3)
    detection = cfg.to_detection_spec(30000.0)
    assert (detection.refractory_samples, detection.peak_window_samples) == (15, 21)
    assert (detection.threshold_mads, detection.min_threshold_fraction) == (5.0, 0.1)
    assert cfg.match_delta_samples(30000.0) == 30
    assert cfg.to_augment_spec() == AugmentSpec()
    assert cfg.to_model_config() == ModelConfig()
    assert cfg.to_train_config() == TrainConfig()
    assert cfg.to_gmm_options() == GmmOptions()
    assert (cfg.snippet_samples, cfg.snippet_channels) == (121, 21)
    assert cfg.sort_features == SortFeatures.LEARNED


def test_synth_spec_carries_the_seed():
    spec = build_config({"seed": 9, "synth_duration_s": 10.0, "synth_drift_amplitude_um": 5.0}).to_synth_spec()
    assert spec.seed == 9
    assert spec.drift.duration_s == 10.0
    assert spec.drift.amplitude_um == 5.0


@pytest.mark.parametrize(
    "values",
    [
        {"no_such_key": 1},
        {"snippet_samples": 120},
        {"aug_crop_channels": 23},
        {"epochs": 5, "warmup_epochs": 5},
        {"filter_low_hz": 7000.0},
        {"temperature": 0.0},
        {"sort_features": "spectral"},
    ],
)
def test_invalid_configs(values):
    with pytest.raises(PipelineError) as exc:
        build_config(values)
    assert exc.value.error_type == "config_invalid"
    assert exc.value.details["errors"]


def test_load_config_from_file_with_overrides(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"epochs": 20, "warmup_epochs": 2, "sort_features": "pca"}))
    cfg = load_config(path, seed=4)
    assert cfg.epochs == 20
    assert cfg.sort_features == SortFeatures.PCA
    assert cfg.seed == 4


def test_empty_config_file_gives_defaults(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("")
    assert load_config(path) == load_config()


@pytest.mark.parametrize("body, error", [("{not json", "parse_error"), ("[1, 2]", "config_invalid")])
def test_unreadable_config_files(tmp_path, body, error):
    path = tmp_path / "config.json"
    path.write_text(body)
    with pytest.raises(PipelineError) as exc:
        load_config(path)
    assert exc.value.error_type == error


def test_missing_config_file(tmp_path):
    with pytest.raises(PipelineError) as exc:
        load_config(tmp_path / "absent.json")
    assert exc.value.error_type == "missing_input"


def test_thread_count_from_the_environment(monkeypatch):
    monkeypatch.delenv("SPIKEREP_THREADS", raising=False)
    assert threads() is None
    monkeypatch.setenv("SPIKEREP_THREADS", "4")
    assert threads() == 4
    monkeypatch.setenv("SPIKEREP_THREADS", "0")
    with pytest.raises(PipelineError):
        threads()
