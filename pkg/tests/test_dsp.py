import numpy as np
import pytest

from spikerep.utils.dsp import (
    DetectionSpec,
    FilterSpec,
    bandpass,
    detect,
    extract_snippets,
    ground_truth_events,
    preprocess,
    remove_bad_channels,
)
from spikerep.utils.errors import PipelineError
from spikerep.utils.evaluation import match_events
from spikerep.utils.recording_io import ProbeGeometry, Recording, SpikeEvent
from spikerep.utils.synthgen import DriftModel, SynthSpec, biphasic_shape, generate_recording, spatial_attenuation

DETECTION = DetectionSpec(threshold_mads=5.0, refractory_samples=15, peak_window_samples=21)


def _with_channel(rec, channel, values):
    samples = np.array(rec.samples)
    samples[:, channel] = values
    return rec.with_samples(samples)


def _template(geometry, channel, amplitude=100.0, n_samples=121):
    shape = biphasic_shape(n_samples, 30000.0, trough_ms=0.2, peak_ms=0.4, peak_delay_ms=0.6, peak_ratio=0.3)
    atten = spatial_attenuation(geometry.distances_from(channel), 25.0)
    return amplitude * np.outer(shape, atten)


def test_dead_channel_is_removed(noise_recording):
    rec, removed = remove_bad_channels(_with_channel(noise_recording, 4, 0.0))
    assert removed == [4]
    assert rec.n_channels == noise_recording.n_channels - 1
    assert rec.geometry.n_channels == rec.n_channels


def test_homogeneous_noise_keeps_every_channel(noise_recording):
    rec, removed = remove_bad_channels(noise_recording)
    assert removed == []
    assert rec.n_channels == noise_recording.n_channels


def test_loud_channel_is_removed(noise_recording):
    loud = noise_recording.samples[:, 9] * 10.0
    stds = _with_channel(noise_recording, 9, loud).samples.std(axis=0)
    assert stds[9] > 5 * np.median(stds)
    _, removed = remove_bad_channels(_with_channel(noise_recording, 9, loud))
    assert removed == [9]


def test_all_dead_channels_is_an_error(small_geometry):
    rec = Recording(30000.0, np.zeros((100, small_geometry.n_channels)), small_geometry)
    with pytest.raises(PipelineError) as exc:
        remove_bad_channels(rec)
    assert exc.value.error_type == "all_channels_removed"


def test_bandpass_removes_dc(small_geometry):
    rec = Recording(30000.0, np.full((30000, small_geometry.n_channels), 50.0), small_geometry)
    out = bandpass(rec, FilterSpec())
    assert np.abs(out.samples).max() < 1e-3


def test_bandpass_passes_the_band_centre_without_phase_shift(small_geometry):
    fs, f0 = 30000.0, np.sqrt(300.0 * 6000.0)
    t = np.arange(30000) / fs
    x = np.sin(2 * np.pi * f0 * t)
    rec = Recording(fs, np.tile(x[:, None], (1, small_geometry.n_channels)), small_geometry)
    y = bandpass(rec, FilterSpec()).samples[3000:-3000, 0]
    basis = np.stack([np.sin(2 * np.pi * f0 * t), np.cos(2 * np.pi * f0 * t), np.ones_like(t)], axis=1)[3000:-3000]
    (a, b, _), *_ = np.linalg.lstsq(basis, y, rcond=None)
    assert np.hypot(a, b) == pytest.approx(1.0, rel=0.05)
    assert abs(np.arctan2(b, a)) < 1e-3


def test_bandpass_attenuates_far_above_the_band(small_geometry):
    fs = 5000.0
    t = np.arange(20000) / fs
    x = np.sin(2 * np.pi * 1000.0 * t)
    rec = Recording(fs, np.tile(x[:, None], (1, small_geometry.n_channels)), small_geometry)
    y = bandpass(rec, FilterSpec(10.0, 100.0, 3)).samples[2000:-2000, 0]
    assert 20 * np.log10(y.std() / x.std()) <= -20.0


def test_bandpass_is_linear(noise_recording):
    rng = np.random.default_rng(1)
    other = noise_recording.with_samples(rng.normal(size=noise_recording.samples.shape))
    f = FilterSpec()
    combined = bandpass(noise_recording.with_samples(2.0 * noise_recording.samples - 3.0 * other.samples), f).samples
    separate = 2.0 * bandpass(noise_recording, f).samples - 3.0 * bandpass(other, f).samples
    np.testing.assert_allclose(combined, separate, rtol=1e-9, atol=1e-9 * np.abs(separate).max())


def test_invalid_band(noise_recording):
    with pytest.raises(PipelineError) as exc:
        bandpass(noise_recording, FilterSpec(300.0, 20000.0, 3))
    assert exc.value.error_type == "invalid_band"


def test_silence_has_no_events(small_geometry):
    rec = Recording(30000.0, np.zeros((2000, small_geometry.n_channels)), small_geometry)
    assert detect(rec, DETECTION) == []


def test_single_noiseless_spike_is_one_event(small_geometry):
    samples = np.zeros((3000, small_geometry.n_channels))
    samples[940:1061] += _template(small_geometry, channel=5)
    events = detect(Recording(30000.0, samples, small_geometry), DETECTION)
    assert len(events) == 1
    assert abs(events[0].frame - 1000) <= 2
    assert events[0].channel == 5
    assert events[0].amplitude < 0


def test_spikes_one_sample_apart_merge(small_geometry):
    samples = np.zeros((3000, small_geometry.n_channels))
    template = _template(small_geometry, channel=6)
    samples[940:1061] += template
    samples[941:1062] += template
    events = detect(Recording(30000.0, samples, small_geometry), DETECTION)
    assert len(events) == 1


def test_filtered_noiseless_spike_is_still_one_event(small_geometry):
    samples = np.zeros((6000, small_geometry.n_channels))
    samples[2940:3061] += _template(small_geometry, channel=5)
    rec = bandpass(Recording(30000.0, samples, small_geometry), FilterSpec())
    events = detect(rec, DETECTION)
    assert [e.channel for e in events] == [5]
    assert abs(events[0].frame - 3000) <= 3


def test_threshold_floor_ignores_faint_ripples(small_geometry):
    samples = np.zeros((3000, small_geometry.n_channels))
    samples[940:1061] += _template(small_geometry, channel=0)
    samples[2000, 15] = -0.05 * np.abs(samples).max()
    events = detect(Recording(30000.0, samples, small_geometry), DETECTION)
    assert [(e.frame, e.channel) for e in events] == [(1000, 0)]
    unfloored = DetectionSpec(threshold_mads=5.0, refractory_samples=15, peak_window_samples=21, min_threshold_fraction=0.0)
    assert (2000, 15) in [(e.frame, e.channel) for e in detect(Recording(30000.0, samples, small_geometry), unfloored)]


def test_event_frame_stays_on_its_own_spike(small_geometry):
    samples = np.zeros((3000, small_geometry.n_channels))
    samples[940:1061] += _template(small_geometry, channel=0, amplitude=60.0)
    samples[965:1086] += _template(small_geometry, channel=15, amplitude=150.0)
    events = detect(Recording(30000.0, samples, small_geometry), DETECTION)
    assert [(e.frame, e.channel) for e in events] == [(1000, 0), (1025, 15)]


@pytest.mark.parametrize("fraction", [-0.1, 1.0])
def test_threshold_floor_must_be_a_fraction(fraction):
    with pytest.raises(PipelineError) as exc:
        DetectionSpec(min_threshold_fraction=fraction)
    assert exc.value.error_type == "invalid_spec"


def test_noiseless_recording_detects_nearly_every_spike(spec_factory):
    spec = spec_factory(n_units=2, rows=4, cols=2, duration_s=30.0, firing_rate_hz=2.0)
    rec, gt = generate_recording(spec)
    events = detect(rec, DETECTION)
    found = np.array([e.frame for e in events])
    truth, _ = gt.as_labels()
    counts = match_events(truth, found, delta=5)
    assert counts.n2 / len(truth) >= 0.99


@pytest.mark.slow
def test_default_recording_without_noise_recalls_nearly_every_spike():
    spec = SynthSpec(duration_s=30.0, noise_std=0.0, drift=DriftModel(0.0, 0.0, 30.0), seed=0)
    rec, gt = generate_recording(spec)
    events = detect(rec, DetectionSpec())
    found = np.array([e.frame for e in events])
    truth, _ = gt.as_labels()
    assert len(truth) > 500
    assert match_events(truth, found, delta=5).n2 / len(truth) >= 0.99


def test_snippets_are_centred_on_the_peak_channel():
    geometry = ProbeGeometry.grid(rows=16, cols=4, pitch_um=20.0)
    rng = np.random.default_rng(2)
    rec = Recording(30000.0, rng.normal(size=(1000, 64)), geometry)
    snippets = extract_snippets(rec, [SpikeEvent(500, 10, -1.0)], T=121, C=21)
    assert snippets.values.shape == (1, 121, 21)
    assert snippets.channel_index[0, 0] == 10
    np.testing.assert_array_equal(snippets.channel_index[0], geometry.nearest_channels(10, 21))
    np.testing.assert_allclose(snippets.values[0], rec.samples[440:561][:, snippets.channel_index[0]].astype(np.float32))


def test_edge_events_are_dropped(noise_recording):
    events = [SpikeEvent(10, 0, -1.0), SpikeEvent(1500, 3, -1.0), SpikeEvent(2990, 1, -1.0)]
    snippets = extract_snippets(noise_recording, events, T=121, C=5)
    assert len(snippets) == 1
    assert snippets.dropped_frames == (10, 2990)


def test_single_channel_snippet_holds_the_peak_channel(noise_recording):
    snippets = extract_snippets(noise_recording, [SpikeEvent(1500, 7, -1.0)], T=61, C=1)
    np.testing.assert_array_equal(snippets.channel_index, [[7]])
    np.testing.assert_allclose(snippets.values[0, :, 0], noise_recording.samples[1470:1531, 7].astype(np.float32))


def test_extraction_ignores_event_order(noise_recording):
    events = [SpikeEvent(400, 2, -1.0), SpikeEvent(1200, 5, -1.0), SpikeEvent(800, 9, -1.0), SpikeEvent(800, 1, -1.0)]
    a = extract_snippets(noise_recording, events, T=61, C=5)
    b = extract_snippets(noise_recording, events[::-1], T=61, C=5)
    assert np.array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.event_frames, [400, 800, 800, 1200])
    np.testing.assert_array_equal(a.peak_channels, [2, 1, 9, 5])


@pytest.mark.parametrize("T, C, error", [(120, 5, "invalid_spec"), (61, 4, "invalid_spec"), (61, 99, "edge_bounds")])
def test_bad_snippet_shapes(noise_recording, T, C, error):
    with pytest.raises(PipelineError) as exc:
        extract_snippets(noise_recording, [SpikeEvent(1500, 0, -1.0)], T=T, C=C)
    assert exc.value.error_type == error


def test_ground_truth_events_use_the_unit_peak_channel(spec_factory):
    rec, gt = generate_recording(spec_factory(n_units=2))
    events, labels = ground_truth_events(rec, gt.units, 121)
    assert len(events) == gt.n_spikes
    for unit_id in gt.units:
        channels = {e.channel for e, label in zip(events, labels) if label == unit_id}
        assert len(channels) == 1
        ptps = np.ptp(gt.templates[unit_id], axis=0)
        assert ptps[channels.pop()] >= 0.95 * ptps.max()


def test_preprocess_removes_then_filters(noise_recording):
    rec, removed = preprocess(_with_channel(noise_recording, 2, 0.0), FilterSpec())
    assert removed == [2]
    assert np.abs(rec.samples.mean(axis=0)).max() < 1e-6
