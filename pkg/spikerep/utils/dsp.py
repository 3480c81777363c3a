"""Preprocessing, threshold detection and snippet extraction."""
import bisect
import logging
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal
from scipy.stats import median_abs_deviation

from spikerep.utils.errors import PipelineError
from spikerep.utils.recording_io import Recording, SnippetSet, SpikeEvent

logger = logging.getLogger(__name__)


class Polarity(str, Enum):
    NEGATIVE = "negative"
    POSITIVE = "positive"
    BOTH = "both"


@dataclass(frozen=True)
class FilterSpec:
    low_hz: float = 300.0
    high_hz: float = 6000.0
    order: int = 3

    def validate(self, sample_rate_hz: float) -> None:
        if not (0 < self.low_hz < self.high_hz < sample_rate_hz / 2) or self.order < 1:
            raise PipelineError(
                f"Invalid band {self.low_hz}-{self.high_hz} Hz (order {self.order}) for {sample_rate_hz} Hz sampling",
                "invalid_band",
                {"low_hz": self.low_hz, "high_hz": self.high_hz, "order": self.order, "sample_rate_hz": sample_rate_hz},
            )

    def design(self, sample_rate_hz: float) -> np.ndarray:
        self.validate(sample_rate_hz)
        return signal.butter(self.order, [self.low_hz, self.high_hz], btype="band", fs=sample_rate_hz, output="sos")


@dataclass(frozen=True)
class DetectionSpec:
    threshold_mads: float = 5.0
    polarity: Polarity = Polarity.NEGATIVE
    refractory_samples: int = 15
    peak_window_samples: int = 21
    merge_radius_um: float = 100.0
    min_threshold_fraction: float = 0.1

    def __post_init__(self):
        if not self.threshold_mads > 0 or self.refractory_samples < 1 or self.peak_window_samples < 1:
            raise PipelineError(
                "Detection needs a positive threshold, refractory period and peak window",
                "invalid_spec",
                {"threshold_mads": self.threshold_mads},
            )
        if not 0 <= self.min_threshold_fraction < 1:
            raise PipelineError(
                "min_threshold_fraction must lie in [0, 1)",
                "invalid_spec",
                {"min_threshold_fraction": self.min_threshold_fraction},
            )
        object.__setattr__(self, "polarity", Polarity(self.polarity))


def remove_bad_channels(rec: Recording, std_factor: float = 5.0) -> Tuple[Recording, List[int]]:
    """Drop dead channels and channels whose spread is off the median by more than ``std_factor``."""
    stds = rec.samples.std(axis=0, dtype=np.float64)
    median_std = float(np.median(stds))
    bad = (stds == 0) | (stds > std_factor * median_std) | (stds * std_factor < median_std)
    removed = np.flatnonzero(bad).tolist()
    if len(removed) == rec.n_channels:
        raise PipelineError("Every channel was flagged as bad", "all_channels_removed", {"stds": stds.tolist()})
    if removed:
        logger.info(f"Removing {len(removed)} bad channels: {removed}")
    keep = np.flatnonzero(~bad)
    return rec.with_samples(rec.samples[:, keep], rec.geometry.subset(keep)), removed


def bandpass(rec: Recording, f: FilterSpec) -> Recording:
    """Zero-phase Butterworth band-pass per channel, output mean removed."""
    sos = f.design(rec.sample_rate_hz)
    x = np.asarray(rec.samples, dtype=np.float64)
    padlen = min(3 * (2 * len(sos) + 1), rec.n_frames - 1)
    y = signal.sosfiltfilt(sos, x, axis=0, padlen=padlen)
    y -= y.mean(axis=0, keepdims=True)
    return rec.with_samples(y)


def noise_levels(samples: np.ndarray) -> np.ndarray:
    """Robust per-channel σ: 1.4826 × median absolute deviation."""
    return median_abs_deviation(samples, axis=0, scale="normal")


def _oriented(samples: np.ndarray, polarity: Polarity) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if polarity == Polarity.NEGATIVE:
        return -x
    if polarity == Polarity.POSITIVE:
        return x
    return np.abs(x)


def _run_peaks(column: np.ndarray, above: np.ndarray, peak_window: int) -> np.ndarray:
    """One frame per supra-threshold run: its extremum within ``peak_window`` samples of the crossing."""
    edges = np.diff(above.astype(np.int8), prepend=0, append=0)
    starts = np.flatnonzero(edges == 1)
    stops = np.minimum(np.flatnonzero(edges == -1), starts + peak_window + 1)
    return np.array([s + int(np.argmax(column[s:e])) for s, e in zip(starts, stops)], dtype=np.int64)


def detect(rec: Recording, d: DetectionSpec) -> List[SpikeEvent]:
    """Threshold crossings reduced to one event per spike.

    Each channel's threshold is ``threshold_mads`` robust σ, floored at
    ``min_threshold_fraction`` of the recording's largest deflection so a
    noiseless trace still needs real signal to cross. Every supra-threshold
    run yields one candidate at its extremum. Candidates closer than the
    refractory period on channels within the merge radius are merged,
    keeping the largest |amplitude|.
    """
    y = _oriented(rec.samples, d.polarity)
    floor = d.min_threshold_fraction * float(y.max(initial=0.0))
    thresholds = np.maximum(d.threshold_mads * noise_levels(rec.samples), floor)
    frame_list, channel_list = [], []
    for c in range(rec.n_channels):
        above = y[:, c] > thresholds[c]
        if above.any():
            peaks = _run_peaks(y[:, c], above, d.peak_window_samples)
            frame_list.append(peaks)
            channel_list.append(np.full(peaks.size, c, dtype=np.int64))
    if not frame_list:
        logger.info("Detected 0 events")
        return []
    frames, channels = np.concatenate(frame_list), np.concatenate(channel_list)
    values = y[frames, channels]
    adjacency = rec.geometry.neighbors(d.merge_radius_um)

    # Largest |amplitude| first, ties toward earlier frame then lower channel.
    order = np.lexsort((channels, frames, -values))
    kept_by_channel: Dict[int, List[int]] = defaultdict(list)
    kept = []
    for i in order:
        f, c = int(frames[i]), int(channels[i])
        clash = False
        for n in np.flatnonzero(adjacency[c]):
            kept_frames = kept_by_channel[int(n)]
            pos = bisect.bisect_left(kept_frames, f - d.refractory_samples + 1)
            if pos < len(kept_frames) and kept_frames[pos] < f + d.refractory_samples:
                clash = True
                break
        if clash:
            continue
        bisect.insort(kept_by_channel[c], f)
        kept.append((f, c))

    kept.sort()
    events = [SpikeEvent(f, c, float(rec.samples[f, c])) for f, c in kept]
    logger.info(f"Detected {len(events)} events from {frames.size} candidates on {rec.n_channels} channels")
    return events


def extract_snippets(rec: Recording, events: Sequence[SpikeEvent], T: int = 121, C: int = 21,
                     labels: Optional[Sequence[int]] = None) -> SnippetSet:
    """T×C windows centred on each event's frame over the C channels nearest its peak channel.

    Events too close to either edge are dropped and listed in ``dropped_frames``.
    """
    if T < 1 or C < 1 or T % 2 == 0 or C % 2 == 0:
        raise PipelineError("Snippet T and C must be odd and positive", "invalid_spec", {"T": T, "C": C})
    if C > rec.n_channels or T > rec.n_frames:
        raise PipelineError(
            f"Snippet {T}×{C} exceeds the recording ({rec.n_frames}×{rec.n_channels})",
            "edge_bounds",
            {"T": T, "C": C, "n_frames": rec.n_frames, "n_channels": rec.n_channels},
        )
    half = T // 2
    frames = np.array([e.frame for e in events], dtype=np.int64)
    peaks = np.array([e.channel for e in events], dtype=np.int64)
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    order = np.lexsort((peaks, frames))
    frames, peaks = frames[order], peaks[order]
    if lab is not None:
        lab = lab[order]

    inside = (frames - half >= 0) & (frames + half < rec.n_frames)
    dropped = frames[~inside].tolist()
    if dropped:
        logger.info(f"Dropped {len(dropped)} events too close to the recording edge")
    frames, peaks = frames[inside], peaks[inside]
    if lab is not None:
        lab = lab[inside]

    nearest = np.stack([rec.geometry.nearest_channels(ch, C) for ch in range(rec.n_channels)])
    channel_index = nearest[peaks] if peaks.size else np.zeros((0, C), dtype=np.int64)
    rows = frames[:, None, None] + np.arange(-half, half + 1)[None, :, None]
    values = rec.samples[rows, channel_index[:, None, :]] if frames.size else np.zeros((0, T, C))
    return SnippetSet(
        values=values,
        event_frames=frames,
        peak_channels=peaks,
        channel_index=channel_index,
        channel_positions=rec.geometry.channel_positions,
        labels=lab,
        dropped_frames=tuple(dropped),
    )


def ground_truth_events(rec: Recording, units: Dict[int, np.ndarray], T: int = 121) -> Tuple[List[SpikeEvent], List[int]]:
    """Events at known spike frames, each on its unit's peak channel, with the unit id as label.

    A unit's peak channel is the channel with the largest peak-to-peak of its
    mean waveform.
    """
    half = T // 2
    offsets = np.arange(-half, half + 1)
    events, labels = [], []
    for unit_id, frames in units.items():
        frames = np.asarray(frames, dtype=np.int64)
        inside = frames[(frames - half >= 0) & (frames + half < rec.n_frames)]
        if inside.size == 0:
            logger.warning(f"Unit {unit_id} has no spike clear of the recording edges")
            continue
        mean_wf = rec.samples[inside[:, None] + offsets[None, :]].mean(axis=0)
        peak = int(np.argmax(np.ptp(mean_wf, axis=0)))
        events.extend(SpikeEvent(int(f), peak, float(rec.samples[f, peak])) for f in frames)
        labels.extend([int(unit_id)] * len(frames))
    return events, labels


def preprocess(rec: Recording, f: FilterSpec, std_factor: float = 5.0) -> Tuple[Recording, List[int]]:
    """Stage 1: bad-channel removal followed by band-pass filtering."""
    cleaned, removed = remove_bad_channels(rec, std_factor)
    return bandpass(cleaned, f), removed
