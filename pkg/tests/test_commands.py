import json

import numpy as np
import pandas as pd
import pytest

from spikerep.cli import main
from spikerep.utils import recording_io as rio
from spikerep.utils.recording_io import GroundTruth, ProbeGeometry, Recording
from spikerep.utils.synthgen import biphasic_shape, spatial_attenuation

TINY_CONFIG = {
    "seed": 0,
    "synth_n_units": 3,
    "synth_rows": 8,
    "synth_cols": 2,
    "synth_duration_s": 3.0,
    "synth_firing_rate_hz": 10.0,
    "synth_noise_std": 5.0,
    "snippet_samples": 31,
    "snippet_channels": 5,
    "aug_crop_channels": 3,
    "aug_temporal_jitter_max": 2,
    "aug_collision_offset_max": 5,
    "conv_out_dim": 8,
    "n_heads": 2,
    "feedforward_dim": 16,
    "n_transformer_layers": 1,
    "rep_dim": 4,
    "proj_dim": 8,
    "pred_hidden_dim": 8,
    "dae_hidden_dim": 8,
    "epochs": 2,
    "warmup_epochs": 1,
    "batch_size": 16,
    "gmm_components": 3,
    "train_spikes_per_unit": 20,
    "eval_spikes_per_unit": 10,
    "protocol_units": 2,
    "protocol_seeds": 2,
    "protocol_gmm_runs": 1,
}


def _run_json(directory):
    return json.loads((directory / "run.json").read_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Runs synth → extract → train → sort → eval once for the whole module."""
    root = tmp_path_factory.mktemp("pipeline")
    config = root / "config.json"
    config.write_text(json.dumps(TINY_CONFIG))
    base = ["--config", str(config)]
    steps = [
        ["synth", "--out", str(root / "synth")],
        ["extract", "--recording", str(root / "synth/recording.bin"),
         "--ground-truth", str(root / "synth/ground_truth.csv"), "--out", str(root / "extract")],
        ["train", "--snippets", str(root / "extract/train_snippets.bin"), "--out", str(root / "train")],
        ["sort", "--recording", str(root / "synth/recording.bin"), "--model", str(root / "train/model.ckpt"),
         "--out", str(root / "sort")],
        ["eval", "--recording", str(root / "synth/recording.bin"), "--ground-truth", str(root / "synth/ground_truth.csv"),
         "--sorting", str(root / "sort/sorting.csv"), "--out", str(root / "eval")],
    ]
    codes = [main([step[0], *base, *step[1:]]) for step in steps]
    return root, config, codes


def test_every_stage_succeeds(pipeline):
    root, _, codes = pipeline
    assert codes == [0, 0, 0, 0, 0]
    for stage in ("synth", "extract", "train", "sort", "eval"):
        manifest = _run_json(root / stage)
        assert manifest["status"] == "success"
        assert manifest["seed"] == 0
        assert manifest["config"]["snippet_samples"] == 31


def test_synth_writes_a_recording_and_ground_truth(pipeline):
    root, _, _ = pipeline
    rec = rio.read_recording(root / "synth/recording.bin")
    gt = rio.read_ground_truth(root / "synth/ground_truth.csv")
    assert rec.n_channels == 16
    assert rec.n_frames == 90000
    assert gt.unit_ids == [0, 1, 2]


def test_extract_splits_labeled_snippets(pipeline):
    root, _, _ = pipeline
    train_set = rio.read_snippets(root / "extract/train_snippets.bin")
    eval_set = rio.read_snippets(root / "extract/eval_snippets.bin")
    assert train_set.values.shape[1:] == (31, 5)
    assert set(np.unique(eval_set.labels)) == {0, 1, 2}
    assert not set(train_set.event_frames.tolist()) & set(eval_set.event_frames.tolist())


def test_train_writes_checkpoint_and_log(pipeline):
    root, _, _ = pipeline
    assert (root / "train/model.ckpt").exists()
    assert (root / "train/model.manifest.json").exists()
    log = pd.read_csv(root / "train/train_log.csv")
    assert log["epoch"].tolist() == [0, 1]


def test_sort_and_eval_outputs(pipeline):
    root, _, _ = pipeline
    sorting = rio.read_sorting(root / "sort/sorting.csv")
    assert 1 <= sorting.n_units <= 3
    report = json.loads((root / "eval/evaluation.json").read_text())
    assert {u["gt_unit_id"] for u in report["units"]} <= {0, 1, 2}
    assert all(0.0 <= u["accuracy"] <= 1.0 for u in report["units"])
    assert (root / "eval/evaluation.txt").read_text().strip()


def test_protocol_reports_learned_and_pca_rows(pipeline):
    root, config, _ = pipeline
    out = root / "protocol"
    code = main(["protocol", "--config", str(config), "--snippets", str(root / "extract/eval_snippets.bin"),
                 "--model", str(root / "train/model.ckpt"), "--out", str(out)])
    assert code == 0
    rows = json.loads((out / "protocol.json").read_text())
    assert set(rows) == {"learned", "pca"}
    assert all(-1.0 <= r["mean"] <= 1.0 and len(r["per_seed"]) == 2 for r in rows.values())


def test_embed_with_the_denoiser(pipeline):
    root, config, _ = pipeline
    out = root / "embed"
    code = main(["embed", "--config", str(config), "--snippets", str(root / "extract/eval_snippets.bin"),
                 "--model", str(root / "train/model.ckpt"), "--use-dae", "--out", str(out)])
    assert code == 0
    reps, labels = rio.read_embeddings(out / "embeddings.bin")
    assert reps.shape[1] == 4
    assert labels is not None and len(labels) == len(reps)
    assert _run_json(out)["use_dae"] is True


def test_missing_input_fails_with_a_manifest(tmp_path, capsys):
    code = main(["preprocess", "--out", str(tmp_path)])
    assert code == 1
    error = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert error["error_type"] == "missing_input"
    manifest = _run_json(tmp_path)
    assert manifest["status"] == "failed"
    assert manifest["error"]["error_type"] == "missing_input"


def test_invalid_config_exits_with_code_one(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"not_a_setting": 1}))
    assert main(["synth", "--config", str(config), "--out", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["error_type"] == "config_invalid"


def test_denoiser_with_pca_features_conflicts(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"sort_features": "pca"}))
    code = main(["sort", "--config", str(config), "--recording", str(tmp_path / "missing.bin"), "--use-dae",
                 "--out", str(tmp_path)])
    assert code == 1
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["error_type"] == "config_conflict"


def test_compare_two_reports(tmp_path):
    accuracies = [0.5, 0.6, 0.7, 0.8, 0.9, 0.65]
    report_a = {"units": [{"gt_unit_id": i, "accuracy": a, "recall": a, "precision": a} for i, a in enumerate(accuracies)]}
    report_b = {
        "units": [{"gt_unit_id": i, "accuracy": a - 0.1 * (i + 1) / 6, "recall": a - 0.05, "precision": a + 0.02 * (i + 1)}
                  for i, a in enumerate(accuracies)]
    }
    (tmp_path / "a.json").write_text(json.dumps(report_a))
    (tmp_path / "b.json").write_text(json.dumps(report_b))
    code = main(["compare", "--a", str(tmp_path / "a.json"), "--b", str(tmp_path / "b.json"), "--out", str(tmp_path / "cmp")])
    assert code == 0
    comparison = json.loads((tmp_path / "cmp/comparison.json").read_text())
    assert comparison["tests"]["accuracy"]["p_value"] == pytest.approx(0.03125)
    assert comparison["tests"]["accuracy"]["n"] == 6
    assert "*" in (tmp_path / "cmp/comparison.txt").read_text()


def test_sort_is_byte_reproducible(pipeline):
    root, config, _ = pipeline
    again = root / "sort_again"
    code = main(["sort", "--config", str(config), "--recording", str(root / "synth/recording.bin"),
                 "--model", str(root / "train/model.ckpt"), "--out", str(again)])
    assert code == 0
    assert (again / "sorting.csv").read_bytes() == (root / "sort/sorting.csv").read_bytes()


def _noiseless_two_unit_recording(directory):
    geometry = ProbeGeometry.grid(rows=8, cols=2, pitch_um=20.0)
    samples = np.zeros((16000, geometry.n_channels))
    units = {}
    for unit_id, (channel, amplitude, first, shape) in enumerate([
        (0, 100.0, 1000, dict(trough_ms=0.2, peak_ms=0.4, peak_delay_ms=0.6, peak_ratio=0.3)),
        (15, 60.0, 1600, dict(trough_ms=0.12, peak_ms=0.3, peak_delay_ms=0.45, peak_ratio=0.5)),
    ]):
        waveform = amplitude * np.outer(biphasic_shape(121, 30000.0, **shape),
                                        spatial_attenuation(geometry.distances_from(channel), 25.0))
        frames = first + 1200 * np.arange(12)
        for frame in frames:
            samples[frame - 60:frame + 61] += waveform
        units[unit_id] = frames
    rio.write_recording(Recording(30000.0, samples.astype(np.float32), geometry), directory / "recording.bin")
    rio.write_ground_truth(GroundTruth(units), directory / "ground_truth.csv")


def test_noiseless_sort_scores_every_unit_perfectly(tmp_path):
    _noiseless_two_unit_recording(tmp_path)
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "sort_features": "pca",
        "gmm_components": 2,
        "snippet_samples": 61,
        "snippet_channels": 5,
        "aug_crop_channels": 3,
        "bad_channel_std_factor": 20.0,
    }))
    base = ["--config", str(config), "--recording", str(tmp_path / "recording.bin")]
    assert main(["sort", *base, "--out", str(tmp_path / "sort")]) == 0
    assert _run_json(tmp_path / "sort")["results"]["n_events"] == 24
    assert main(["eval", *base, "--ground-truth", str(tmp_path / "ground_truth.csv"),
                 "--sorting", str(tmp_path / "sort/sorting.csv"), "--out", str(tmp_path / "eval")]) == 0
    report = json.loads((tmp_path / "eval/evaluation.json").read_text())
    assert sorted(u["gt_unit_id"] for u in report["units"]) == [0, 1]
    assert all(u["accuracy"] == 1.0 for u in report["units"])
