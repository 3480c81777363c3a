"""Synthetic ground-truth recordings with drift and correlated noise."""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import signal
from scipy.stats import median_abs_deviation

from spikerep.utils.errors import PipelineError
from spikerep.utils.recording_io import GroundTruth, ProbeGeometry, Recording
from spikerep.utils.seeding import substream

logger = logging.getLogger(__name__)

REFRACTORY_S = 2e-3
SNR_CAP = 1e9


@dataclass(frozen=True)
class DriftModel:
    amplitude_um: float = 0.0
    n_cycles: float = 0.0
    duration_s: float = 1.0

    def __post_init__(self):
        if self.amplitude_um < 0 or self.n_cycles < 0 or not self.duration_s > 0:
            raise PipelineError(
                "Drift needs amplitude ≥ 0, cycles ≥ 0 and a positive duration",
                "invalid_spec",
                {"amplitude_um": self.amplitude_um, "n_cycles": self.n_cycles, "duration_s": self.duration_s},
            )


def drift_displacement(d: DriftModel, t: float) -> float:
    """Vertical probe displacement in micrometers at time ``t`` seconds."""
    if not 0.0 <= t <= d.duration_s:
        raise PipelineError(
            f"t={t} s outside the drift model's [0, {d.duration_s}] s range",
            "out_of_range",
            {"t": t, "duration_s": d.duration_s},
        )
    return d.amplitude_um * float(np.sin(2.0 * np.pi * d.n_cycles * t / d.duration_s))


@dataclass(frozen=True)
class SynthSpec:
    n_units: int = 8
    rows: int = 16
    cols: int = 4
    pitch_um: float = 20.0
    duration_s: float = 120.0
    sample_rate_hz: float = 30000.0
    firing_rate_hz: float = 4.0
    amplitude_range: Tuple[float, float] = (60.0, 200.0)
    noise_std: float = 10.0
    noise_ar: float = 0.9
    drift: DriftModel = field(default_factory=lambda: DriftModel(0.0, 0.0, 120.0))
    seed: int = 0
    spatial_decay_um: float = 25.0
    template_samples: int = 121

    def validate(self) -> None:
        problems = []
        if self.n_units < 0:
            problems.append("n_units must be ≥ 0")
        if self.rows < 1 or self.cols < 1 or not self.pitch_um > 0:
            problems.append("probe needs ≥1 row, ≥1 column and a positive pitch")
        if not (self.duration_s > 0 and self.sample_rate_hz > 0 and self.firing_rate_hz > 0):
            problems.append("rates and durations must be positive")
        lo, hi = self.amplitude_range
        if not 0 <= lo <= hi:
            problems.append("amplitude range must be ordered and nonnegative")
        if self.noise_std < 0:
            problems.append("noise_std must be ≥ 0")
        if not 0 <= self.noise_ar < 1:
            problems.append("noise AR coefficient must lie in [0, 1)")
        if not self.spatial_decay_um > 0:
            problems.append("spatial decay must be positive")
        if self.template_samples < 3 or self.template_samples % 2 == 0:
            problems.append("template_samples must be odd and ≥ 3")
        if problems:
            raise PipelineError("Invalid synthesis spec: " + "; ".join(problems), "invalid_spec", {"problems": problems})

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))

    def geometry(self) -> ProbeGeometry:
        return ProbeGeometry.grid(self.rows, self.cols, self.pitch_um)


def spatial_attenuation(distance_um: np.ndarray, decay_um: float) -> np.ndarray:
    return 1.0 / (1.0 + (np.asarray(distance_um) / decay_um) ** 2)


def biphasic_shape(n_samples: int, sample_rate_hz: float, trough_ms: float, peak_ms: float,
                   peak_delay_ms: float, peak_ratio: float) -> np.ndarray:
    """Difference of two Gaussians, trough at the center sample, peak-to-peak 1."""
    fine = np.linspace(-2.0, 2.0, 4001)
    g = lambda t: -np.exp(-0.5 * (t / trough_ms) ** 2) + peak_ratio * np.exp(-0.5 * ((t - peak_delay_ms) / peak_ms) ** 2)
    t_trough = fine[np.argmin(g(fine))]
    half = n_samples // 2
    t_ms = (np.arange(n_samples) - half) * 1e3 / sample_rate_hz + t_trough
    shape = g(t_ms)
    return shape / np.ptp(shape)


@dataclass(frozen=True)
class UnitTemplate:
    """Spatiotemporal footprint of one unit across every probe channel."""

    waveform: np.ndarray
    source_position: Tuple[float, float]
    amplitude: float
    shape: np.ndarray
    gain: float
    decay_um: float

    def at_displacement(self, geometry: ProbeGeometry, dy_um: float) -> np.ndarray:
        """Footprint re-sampled with the source moved vertically by ``dy_um``."""
        if dy_um == 0.0:
            return self.waveform
        src = np.array([self.source_position[0], self.source_position[1] + dy_um])
        dist = np.linalg.norm(geometry.channel_positions - src, axis=1)
        return self.gain * np.outer(self.shape, spatial_attenuation(dist, self.decay_um))

    @property
    def peak_channel(self) -> int:
        return int(np.argmax(np.ptp(self.waveform, axis=0)))


def make_templates(spec: SynthSpec, rng: np.random.Generator) -> List[UnitTemplate]:
    spec.validate()
    geometry = spec.geometry()
    pos = geometry.channel_positions
    x_max, y_max = pos[:, 0].max(), pos[:, 1].max()
    lo, hi = spec.amplitude_range
    templates = []
    for _ in range(spec.n_units):
        source = (float(rng.uniform(0.0, x_max)), float(rng.uniform(0.0, y_max)))
        amplitude = float(rng.uniform(lo, hi))
        shape = biphasic_shape(
            spec.template_samples,
            spec.sample_rate_hz,
            trough_ms=float(rng.uniform(0.12, 0.25)),
            peak_ms=float(rng.uniform(0.25, 0.5)),
            peak_delay_ms=float(rng.uniform(0.45, 0.8)),
            peak_ratio=float(rng.uniform(0.2, 0.5)),
        )
        atten = spatial_attenuation(np.linalg.norm(pos - np.array(source), axis=1), spec.spatial_decay_um)
        gain = amplitude / atten.max()
        waveform = gain * np.outer(shape, atten)
        templates.append(UnitTemplate(waveform, source, amplitude, shape, gain, spec.spatial_decay_um))
    logger.info(f"Built {len(templates)} unit templates on a {spec.rows}×{spec.cols} probe")
    return templates


def _spike_frames(rate_hz: float, n_frames: int, fs: float, margin: int, rng: np.random.Generator) -> np.ndarray:
    """Poisson train with an absolute refractory period, kept clear of the edges."""
    refractory = int(np.ceil(REFRACTORY_S * fs))
    expected = int(n_frames / fs * rate_hz * 1.5) + 20
    isi = refractory + np.floor(rng.exponential(fs / rate_hz, size=expected)).astype(np.int64)
    frames = margin + np.cumsum(isi)
    while frames[-1] < n_frames - margin:
        more = refractory + np.floor(rng.exponential(fs / rate_hz, size=expected)).astype(np.int64)
        frames = np.concatenate([frames, frames[-1] + np.cumsum(more)])
    return frames[frames < n_frames - margin]


def correlated_noise_field(n_frames: int, geometry: ProbeGeometry, noise_std: float, ar: float,
                           decay_um: float, rng: np.random.Generator) -> np.ndarray:
    """AR(1) noise per channel, mixed across channels with the spatial decay kernel."""
    c = geometry.n_channels
    innovations = rng.standard_normal((n_frames, c)) * np.sqrt(1.0 - ar**2)
    zi = (ar * rng.standard_normal(c))[None, :]
    temporal, _ = signal.lfilter([1.0], [1.0, -ar], innovations, axis=0, zi=zi)
    kernel = spatial_attenuation(geometry.pairwise_distances(), decay_um)
    kernel /= np.linalg.norm(kernel, axis=1, keepdims=True)
    return noise_std * temporal @ kernel.T


def generate_recording(spec: SynthSpec) -> Tuple[Recording, GroundTruth]:
    spec.validate()
    n_frames = spec.n_frames
    if n_frames < spec.template_samples:
        raise PipelineError(
            "Duration too short to hold a single snippet",
            "invalid_spec",
            {"n_frames": n_frames, "template_samples": spec.template_samples},
        )
    geometry = spec.geometry()
    fs = spec.sample_rate_hz
    half = spec.template_samples // 2
    templates = make_templates(spec, substream(spec.seed, "synth", "templates"))
    spike_rng = substream(spec.seed, "synth", "spikes")

    samples = np.zeros((n_frames, geometry.n_channels), dtype=np.float64)
    units = {}
    offsets = np.arange(-half, half + 1)
    for unit_id, template in enumerate(templates):
        frames = _spike_frames(spec.firing_rate_hz, n_frames, fs, half + 1, spike_rng)
        units[unit_id] = frames
        if spec.drift.amplitude_um == 0.0:
            np.add.at(samples, frames[:, None] + offsets[None, :], template.waveform[None, :, :])
            continue
        for frame in frames:
            t = min(frame / fs, spec.drift.duration_s)
            footprint = template.at_displacement(geometry, drift_displacement(spec.drift, t))
            samples[frame - half:frame + half + 1] += footprint
        logger.debug(f"Unit {unit_id}: {len(frames)} spikes inserted with drift")

    if spec.noise_std > 0:
        samples += correlated_noise_field(
            n_frames, geometry, spec.noise_std, spec.noise_ar, spec.spatial_decay_um,
            substream(spec.seed, "synth", "noise"),
        )

    gt = GroundTruth(units, templates={u: t.waveform for u, t in enumerate(templates)})
    logger.info(
        f"Generated {spec.duration_s:g} s recording: {geometry.n_channels} channels, "
        f"{len(templates)} units, {gt.n_spikes} spikes"
    )
    return Recording(fs, samples, geometry), gt


def _windows(frames: np.ndarray, half: int, n_frames: int) -> np.ndarray:
    frames = frames[(frames - half >= 0) & (frames + half < n_frames)]
    return frames[:, None] + np.arange(-half, half + 1)[None, :]


def snr_of_unit(rec: Recording, gt: GroundTruth, unit_id: int, snippet_samples: int = 121) -> float:
    """Peak-to-peak of the mean waveform on its peak channel over the MAD noise level."""
    if unit_id not in gt.units:
        raise PipelineError(f"Unknown unit {unit_id}", "unknown_unit", {"unit_id": unit_id})
    half = snippet_samples // 2
    idx = _windows(gt.units[unit_id], half, rec.n_frames)
    if len(idx) < 10:
        raise PipelineError(
            f"Unit {unit_id} has {len(idx)} usable spikes, SNR needs at least 10",
            "too_few_spikes",
            {"unit_id": unit_id, "n_spikes": int(len(idx))},
        )
    mean_wf = rec.samples[idx].astype(np.float64).mean(axis=0)
    ptps = np.ptp(mean_wf, axis=0)
    peak = int(np.argmax(ptps))

    keep = np.ones(rec.n_frames, dtype=bool)
    all_frames = np.concatenate(list(gt.units.values()))
    keep[_windows(all_frames, half, rec.n_frames).ravel()] = False
    trace = rec.samples[keep, peak].astype(np.float64)
    sigma = float(median_abs_deviation(trace, scale="normal")) if trace.size else 0.0
    if sigma == 0.0:
        return SNR_CAP
    return float(min(ptps[peak] / sigma, SNR_CAP))
