"""Core data model and file formats shared by every pipeline stage.

Formats
-------
- ``<name>.bin`` + ``<name>.json``: raw little-endian float32, time-major
  (one frame = all channels at one instant). The sidecar carries
  ``sample_rate_hz``, ``n_channels``, ``n_frames``, ``channel_positions``
  and ``dtype`` (always ``"f32le"``).
- ``ground_truth.csv`` (``unit_id,frame``), ``sorting.csv``
  (``frame,unit_label``) and ``events.csv`` (``frame,channel,amplitude``).
- Snippet and embedding dumps reuse the raw f32 layout with a sidecar that
  records the tensor shape plus per-row metadata.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from spikerep.utils.errors import PipelineError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
DTYPE_TAG = "f32le"


def _readonly(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True)
class ProbeGeometry:
    """Channel positions in micrometers, one (x, y) row per channel."""

    channel_positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.channel_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise PipelineError(
                "Probe geometry needs at least one (x, y) channel position",
                "invalid_geometry",
                {"shape": list(pos.shape)},
            )
        if not np.all(np.isfinite(pos)):
            raise PipelineError("Channel positions must be finite", "invalid_geometry", {})
        if len(np.unique(pos, axis=0)) != len(pos):
            raise PipelineError("Two channels share an identical position", "invalid_geometry", {})
        object.__setattr__(self, "channel_positions", _readonly(pos.copy()))

    @classmethod
    def grid(cls, rows: int, cols: int, pitch_um: float) -> "ProbeGeometry":
        """Rectangular probe: channel index runs along columns first, then rows (depth)."""
        ys, xs = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        pos = np.stack([xs.ravel(), ys.ravel()], axis=1) * float(pitch_um)
        return cls(pos)

    @property
    def n_channels(self) -> int:
        return self.channel_positions.shape[0]

    def distances_from(self, channel: int) -> np.ndarray:
        return np.linalg.norm(self.channel_positions - self.channel_positions[channel], axis=1)

    def pairwise_distances(self) -> np.ndarray:
        diff = self.channel_positions[:, None, :] - self.channel_positions[None, :, :]
        return np.linalg.norm(diff, axis=-1)

    def neighbors(self, radius_um: float) -> np.ndarray:
        """Boolean C×C adjacency, channel included in its own neighborhood."""
        return self.pairwise_distances() <= radius_um

    def nearest_channels(self, channel: int, count: int) -> np.ndarray:
        """The ``count`` channels nearest to ``channel``; ties go to the lower index."""
        dist = self.distances_from(channel)
        order = np.lexsort((np.arange(self.n_channels), dist))
        return order[:count]

    def subset(self, keep: Sequence[int]) -> "ProbeGeometry":
        return ProbeGeometry(self.channel_positions[np.asarray(keep, dtype=np.int64)])


@dataclass(frozen=True)
class Recording:
    """Time-major multichannel voltage trace in microvolts."""

    sample_rate_hz: float
    samples: np.ndarray
    geometry: ProbeGeometry

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise PipelineError(
                "Sample rate must be positive", "invalid_recording", {"sample_rate_hz": self.sample_rate_hz}
            )
        samples = np.asarray(self.samples)
        if samples.dtype not in (np.float32, np.float64):
            samples = samples.astype(np.float64)
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise PipelineError(
                "Samples must be a non-empty n_frames × n_channels matrix",
                "invalid_recording",
                {"shape": list(samples.shape)},
            )
        if samples.shape[1] != self.geometry.n_channels:
            raise PipelineError(
                "Geometry channel count does not match the samples",
                "invalid_recording",
                {"n_channels": samples.shape[1], "geometry_channels": self.geometry.n_channels},
            )
        if not np.all(np.isfinite(samples)):
            raise PipelineError("Recording contains non-finite samples", "non_finite", {})
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))
        object.__setattr__(self, "samples", _readonly(samples))

    @property
    def n_frames(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.sample_rate_hz

    def ms_to_samples(self, ms: float) -> int:
        return max(1, int(round(ms * 1e-3 * self.sample_rate_hz)))

    def with_samples(self, samples: np.ndarray, geometry: Optional[ProbeGeometry] = None) -> "Recording":
        return Recording(self.sample_rate_hz, samples, geometry or self.geometry)


@dataclass(frozen=True)
class SpikeEvent:
    frame: int
    channel: int
    amplitude: float


@dataclass(frozen=True)
class GroundTruth:
    """Per-unit spike frames, strictly increasing within each unit."""

    units: Dict[int, np.ndarray]
    templates: Optional[Dict[int, np.ndarray]] = None

    def __post_init__(self):
        units = {}
        for unit_id, frames in self.units.items():
            frames = np.asarray(frames, dtype=np.int64).ravel()
            if frames.size and frames[0] < 0:
                raise PipelineError(
                    f"Unit {unit_id} has negative frames", "invalid_ground_truth", {"unit_id": int(unit_id)}
                )
            if np.any(np.diff(frames) <= 0):
                raise PipelineError(
                    f"Frames of unit {unit_id} are not strictly increasing",
                    "invalid_ground_truth",
                    {"unit_id": int(unit_id)},
                )
            units[int(unit_id)] = _readonly(frames)
        object.__setattr__(self, "units", dict(sorted(units.items())))

    @property
    def unit_ids(self) -> List[int]:
        return list(self.units.keys())

    @property
    def n_spikes(self) -> int:
        return int(sum(len(f) for f in self.units.values()))

    def check_bounds(self, n_frames: int) -> None:
        for unit_id, frames in self.units.items():
            if frames.size and frames[-1] >= n_frames:
                raise PipelineError(
                    f"Unit {unit_id} has frames beyond the recording",
                    "invalid_ground_truth",
                    {"unit_id": unit_id, "n_frames": n_frames},
                )

    def as_labels(self) -> Tuple[np.ndarray, np.ndarray]:
        """All spikes as (frames, unit_ids), ordered by frame then unit."""
        if not self.units:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        frames = np.concatenate(list(self.units.values()))
        labels = np.concatenate([np.full(len(f), u, np.int64) for u, f in self.units.items()])
        order = np.lexsort((labels, frames))
        return frames[order], labels[order]


@dataclass(frozen=True)
class WaveformSnippet:
    values: np.ndarray
    peak_channel_global: int
    event_frame: int


@dataclass(frozen=True)
class SnippetSet:
    """A batch of T×C snippets with the metadata needed to trace them back to the probe."""

    values: np.ndarray
    event_frames: np.ndarray
    peak_channels: np.ndarray
    channel_index: np.ndarray
    channel_positions: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    dropped_frames: Tuple[int, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise PipelineError("Snippets must be an N×T×C tensor", "invalid_snippets", {"shape": list(values.shape)})
        if not np.all(np.isfinite(values)):
            raise PipelineError("Snippets contain non-finite values", "non_finite", {})
        n = values.shape[0]
        event_frames = np.asarray(self.event_frames, dtype=np.int64).reshape(n)
        peak_channels = np.asarray(self.peak_channels, dtype=np.int64).reshape(n)
        channel_index = np.asarray(self.channel_index, dtype=np.int64).reshape(n, values.shape[2])
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "event_frames", _readonly(event_frames))
        object.__setattr__(self, "peak_channels", _readonly(peak_channels))
        object.__setattr__(self, "channel_index", _readonly(channel_index))
        if self.channel_positions is not None:
            object.__setattr__(self, "channel_positions", _readonly(np.asarray(self.channel_positions, np.float64)))
        if self.labels is not None:
            object.__setattr__(self, "labels", _readonly(np.asarray(self.labels, dtype=np.int64).reshape(n)))
        object.__setattr__(self, "dropped_frames", tuple(int(f) for f in self.dropped_frames))

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> WaveformSnippet:
        return WaveformSnippet(self.values[i], int(self.peak_channels[i]), int(self.event_frames[i]))

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def take(self, indices: Sequence[int]) -> "SnippetSet":
        idx = np.asarray(indices, dtype=np.int64)
        return SnippetSet(
            values=self.values[idx],
            event_frames=self.event_frames[idx],
            peak_channels=self.peak_channels[idx],
            channel_index=self.channel_index[idx],
            channel_positions=self.channel_positions,
            labels=None if self.labels is None else self.labels[idx],
        )

    def with_labels(self, labels: np.ndarray) -> "SnippetSet":
        return SnippetSet(
            self.values, self.event_frames, self.peak_channels, self.channel_index,
            self.channel_positions, labels, self.dropped_frames,
        )

    def depth_orders(self) -> np.ndarray:
        """Per snippet, its channel slots ordered along the probe (y, then x).

        Without probe positions the slots keep their distance order.
        """
        n, c = len(self), self.n_channels
        if self.channel_positions is None:
            return np.tile(np.arange(c), (n, 1))
        pos = self.channel_positions[self.channel_index]
        return np.lexsort((pos[..., 0], pos[..., 1]), axis=-1)

    def indices_by_unit(self) -> Dict[int, np.ndarray]:
        if self.labels is None:
            raise PipelineError("Snippet set carries no unit labels", "missing_labels", {})
        return {int(u): np.flatnonzero(self.labels == u) for u in np.unique(self.labels)}


@dataclass(frozen=True)
class SortingResult:
    """Detected spike frames with contiguous unit labels 0..L-1."""

    frames: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.int64).ravel()
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if frames.shape != labels.shape:
            raise PipelineError("Frames and labels differ in length", "invalid_sorting", {})
        unique = np.unique(labels)
        if unique.size and not np.array_equal(unique, np.arange(unique.size)):
            raise PipelineError(
                "Unit labels must be contiguous nonnegative integers starting at 0",
                "invalid_sorting",
                {"labels": unique.tolist()[:20]},
            )
        object.__setattr__(self, "frames", _readonly(frames))
        object.__setattr__(self, "labels", _readonly(labels))

    @classmethod
    def from_assignments(cls, frames: Sequence[int], labels: Sequence[int]) -> "SortingResult":
        """Order events by frame and renumber arbitrary labels to 0..L-1 (ascending original value)."""
        frames = np.asarray(frames, dtype=np.int64).ravel()
        labels = np.asarray(labels, dtype=np.int64).ravel()
        if frames.shape != labels.shape:
            raise PipelineError("Frames and labels differ in length", "invalid_sorting", {})
        _, contiguous = np.unique(labels, return_inverse=True)
        order = np.lexsort((contiguous, frames))
        return cls(frames[order], contiguous.reshape(-1)[order])

    @property
    def events(self) -> List[Tuple[int, int]]:
        return list(zip(self.frames.tolist(), self.labels.tolist()))

    @property
    def n_units(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def frames_for(self, label: int) -> np.ndarray:
        return np.sort(self.frames[self.labels == label])


# ---------------------------------------------------------------------------
# Raw tensor files
# ---------------------------------------------------------------------------

def _paths(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    return path.with_suffix(".bin"), path.with_suffix(".json")


def _write_tensor(values: np.ndarray, path: PathLike, meta: Dict[str, Any]) -> None:
    bin_path, json_path = _paths(path)
    data = np.ascontiguousarray(values, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise PipelineError(f"Refusing to write non-finite values to {bin_path}", "non_finite", {})
    try:
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        data.tofile(bin_path)
        json_path.write_text(json.dumps({**meta, "dtype": DTYPE_TAG}, indent=2))
    except OSError as e:
        logger.error(f"Error writing {bin_path}: {str(e)}")
        raise PipelineError(f"Cannot write {bin_path}: {e}", "unwritable_path", {"path": str(bin_path)}) from e


def _read_tensor(path: PathLike, shape_keys: Sequence[str]) -> Tuple[np.ndarray, Dict[str, Any]]:
    bin_path, json_path = _paths(path)
    if not json_path.exists():
        raise PipelineError(f"Missing sidecar {json_path}", "missing_sidecar", {"path": str(json_path)})
    try:
        meta = json.loads(json_path.read_text())
    except json.JSONDecodeError as e:
        raise PipelineError(f"Malformed sidecar {json_path}: {e}", "parse_error", {"path": str(json_path)}) from e
    missing = [k for k in shape_keys if k not in meta]
    if missing:
        raise PipelineError(f"Sidecar {json_path} lacks keys {missing}", "parse_error", {"missing": missing})
    if meta.get("dtype", DTYPE_TAG) != DTYPE_TAG:
        raise PipelineError(f"Unsupported dtype {meta.get('dtype')}", "parse_error", {"dtype": meta.get("dtype")})
    if not bin_path.exists():
        raise PipelineError(f"Missing data file {bin_path}", "missing_input", {"path": str(bin_path)})
    shape = tuple(int(meta[k]) for k in shape_keys)
    expected = int(np.prod(shape))
    n_bytes = bin_path.stat().st_size
    if n_bytes != expected * 4:
        raise PipelineError(
            f"{bin_path} holds {n_bytes / 4:g} floats, sidecar declares {expected}",
            "size_mismatch",
            {"declared": expected, "found_bytes": n_bytes},
        )
    data = np.fromfile(bin_path, dtype="<f4").reshape(shape)
    if not np.all(np.isfinite(data)):
        raise PipelineError(f"{bin_path} contains non-finite values", "non_finite", {})
    return data, meta


def write_recording(rec: Recording, path: PathLike) -> None:
    """Write ``<name>.bin`` + ``<name>.json``; float32 input round-trips bit-exactly."""
    meta = {
        "sample_rate_hz": rec.sample_rate_hz,
        "n_channels": rec.n_channels,
        "n_frames": rec.n_frames,
        "channel_positions": rec.geometry.channel_positions.tolist(),
    }
    _write_tensor(rec.samples, path, meta)
    logger.info(f"Wrote recording {Path(path).with_suffix('.bin')} ({rec.n_frames} frames × {rec.n_channels} channels)")


def read_recording(path: PathLike) -> Recording:
    data, meta = _read_tensor(path, ("n_frames", "n_channels"))
    if "sample_rate_hz" not in meta or "channel_positions" not in meta:
        raise PipelineError("Sidecar lacks sample_rate_hz or channel_positions", "parse_error", {})
    geometry = ProbeGeometry(np.asarray(meta["channel_positions"], dtype=np.float64))
    return Recording(float(meta["sample_rate_hz"]), data, geometry)


def write_snippets(snippets: SnippetSet, path: PathLike) -> None:
    n, t, c = snippets.values.shape
    meta = {
        "n_snippets": n,
        "T": t,
        "C": c,
        "event_frames": snippets.event_frames.tolist(),
        "peak_channels": snippets.peak_channels.tolist(),
        "channel_index": snippets.channel_index.tolist(),
        "channel_positions": None if snippets.channel_positions is None else snippets.channel_positions.tolist(),
        "labels": None if snippets.labels is None else snippets.labels.tolist(),
        "dropped_frames": list(snippets.dropped_frames),
    }
    _write_tensor(snippets.values, path, meta)
    logger.info(f"Wrote {n} snippets of shape {t}×{c} to {Path(path).with_suffix('.bin')}")


def read_snippets(path: PathLike) -> SnippetSet:
    values, meta = _read_tensor(path, ("n_snippets", "T", "C"))
    n, c = values.shape[0], values.shape[2]
    positions = meta.get("channel_positions")
    return SnippetSet(
        values=values,
        event_frames=np.asarray(meta.get("event_frames", [0] * n), dtype=np.int64),
        peak_channels=np.asarray(meta.get("peak_channels", [0] * n), dtype=np.int64),
        channel_index=np.asarray(meta.get("channel_index", [list(range(c))] * n), dtype=np.int64).reshape(n, c),
        channel_positions=None if positions is None else np.asarray(positions, dtype=np.float64),
        labels=None if meta.get("labels") is None else np.asarray(meta["labels"], dtype=np.int64),
        dropped_frames=tuple(meta.get("dropped_frames", ())),
    )


def write_embeddings(reps: np.ndarray, path: PathLike, labels: Optional[np.ndarray] = None) -> None:
    reps = np.asarray(reps)
    meta = {"n_rows": reps.shape[0], "dim": reps.shape[1], "labels": None if labels is None else np.asarray(labels).tolist()}
    _write_tensor(reps, path, meta)


def read_embeddings(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    reps, meta = _read_tensor(path, ("n_rows", "dim"))
    labels = meta.get("labels")
    return reps, None if labels is None else np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# CSV files
# ---------------------------------------------------------------------------

_INT_PATTERN = r"\s*-?\d+\s*"


def _read_int_csv(path: PathLike, columns: List[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise PipelineError(f"Missing file {path}", "missing_input", {"path": str(path)}) from e
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise PipelineError(f"Cannot parse {path}: {e}", "parse_error", {"path": str(path)}) from e
    if [c.strip() for c in df.columns] != columns:
        raise PipelineError(
            f"{path} must have header {','.join(columns)}", "parse_error", {"found": list(df.columns)}
        )
    df.columns = columns
    for col in columns:
        ok = df[col].str.fullmatch(_INT_PATTERN)
        if not ok.all():
            bad = int(np.flatnonzero(~ok.to_numpy())[0])
            raise PipelineError(
                f"Malformed row {bad + 2} in {path}", "parse_error", {"row": bad + 2, "column": col}
            )
    return df.apply(lambda s: s.str.strip().astype(np.int64)) if len(df) else df.astype(np.int64)


def read_ground_truth(path: PathLike) -> GroundTruth:
    df = _read_int_csv(path, ["unit_id", "frame"])
    if (df["frame"] < 0).any():
        raise PipelineError(f"Negative frames in {path}", "parse_error", {"path": str(path)})
    units = {
        int(unit_id): np.sort(group["frame"].to_numpy())
        for unit_id, group in df.groupby("unit_id", sort=True)
    }
    return GroundTruth(units)


def write_ground_truth(gt: GroundTruth, path: PathLike) -> None:
    frames, labels = gt.as_labels()
    df = pd.DataFrame({"unit_id": labels, "frame": frames}).sort_values(["unit_id", "frame"], kind="stable")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)


def read_sorting(path: PathLike) -> SortingResult:
    df = _read_int_csv(path, ["frame", "unit_label"])
    return SortingResult.from_assignments(df["frame"].to_numpy(), df["unit_label"].to_numpy())


def write_sorting(sr: SortingResult, path: PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"frame": sr.frames, "unit_label": sr.labels}).to_csv(path, index=False)


def write_events(events: Sequence[SpikeEvent], path: PathLike) -> None:
    df = pd.DataFrame(
        {
            "frame": [e.frame for e in events],
            "channel": [e.channel for e in events],
            "amplitude": [e.amplitude for e in events],
        },
        columns=["frame", "channel", "amplitude"],
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)


def read_events(path: PathLike) -> List[SpikeEvent]:
    try:
        df = pd.read_csv(path, dtype={"frame": np.int64, "channel": np.int64, "amplitude": np.float64})
    except FileNotFoundError as e:
        raise PipelineError(f"Missing file {path}", "missing_input", {"path": str(path)}) from e
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise PipelineError(f"Cannot parse {path}: {e}", "parse_error", {"path": str(path)}) from e
    if list(df.columns) != ["frame", "channel", "amplitude"]:
        raise PipelineError(f"{path} must have header frame,channel,amplitude", "parse_error", {})
    return [SpikeEvent(int(f), int(c), float(a)) for f, c, a in df.itertuples(index=False, name=None)]
