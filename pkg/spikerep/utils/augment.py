"""View generation for contrastive training.

Snippets are T×C arrays whose channel slots are in distance order from the
peak channel (slot 0). Cropped views keep the full C slots and carry a boolean
channel mask; dropped slots are zeroed.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import signal
from scipy.stats import median_abs_deviation

from spikerep.utils.errors import PipelineError
from spikerep.utils.seeding import substream

logger = logging.getLogger(__name__)

Range = Tuple[float, float]


@dataclass(frozen=True)
class AugmentSpec:
    voltage_jitter_range: Range = (0.9, 1.1)
    temporal_jitter_max: int = 4
    crop_channels: int = 11
    collision_prob: float = 0.5
    collision_scale_range: Range = (0.2, 1.0)
    collision_offset_max: int = 30
    noise_scale_range: Range = (0.5, 2.0)
    noise_ar_coeff: float = 0.9
    apply_noise_to_view1_only: bool = True

    def __post_init__(self):
        problems = []
        for name in ("voltage_jitter_range", "collision_scale_range", "noise_scale_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                problems.append(f"{name} is not ordered")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.noise_scale_range[0] < 0 or self.collision_scale_range[0] < 0:
            problems.append("scale ranges must be nonnegative")
        if self.crop_channels < 1 or self.crop_channels % 2 == 0:
            problems.append("crop_channels must be odd and ≥ 1")
        if not 0.0 <= self.collision_prob <= 1.0:
            problems.append("collision_prob must lie in [0, 1]")
        if self.temporal_jitter_max < 0 or self.collision_offset_max < 0:
            problems.append("shifts must be ≥ 0")
        if not 0.0 <= self.noise_ar_coeff < 1.0:
            problems.append("noise_ar_coeff must lie in [0, 1)")
        if not self.apply_noise_to_view1_only:
            problems.append("noise is applied to view 1 only")
        if problems:
            raise PipelineError("Invalid augmentation spec: " + "; ".join(problems), "invalid_spec", {"problems": problems})

    @classmethod
    def identity(cls, n_channels: int) -> "AugmentSpec":
        """A spec under which every augmentation leaves the snippet unchanged."""
        return cls(
            voltage_jitter_range=(1.0, 1.0),
            temporal_jitter_max=0,
            crop_channels=n_channels,
            collision_prob=0.0,
            collision_scale_range=(0.0, 0.0),
            collision_offset_max=0,
            noise_scale_range=(0.0, 0.0),
        )


@dataclass(frozen=True)
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    clean: np.ndarray
    mask1: np.ndarray
    mask2: np.ndarray


def _shift(values: np.ndarray, delta: int, edge: bool) -> np.ndarray:
    """Move samples later by ``delta`` frames; vacated frames are edge-padded or zero."""
    if delta == 0:
        return values.copy()
    t = values.shape[0]
    src = np.arange(t) - delta
    if edge:
        return values[np.clip(src, 0, t - 1)]
    out = np.zeros_like(values)
    valid = (src >= 0) & (src < t)
    out[valid] = values[src[valid]]
    return out


def jitter(s: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    t = s.shape[0]
    if spec.temporal_jitter_max >= (t - 1) / 2:
        raise PipelineError(
            f"Temporal jitter {spec.temporal_jitter_max} too large for {t} samples",
            "invalid_spec",
            {"temporal_jitter_max": spec.temporal_jitter_max, "T": t},
        )
    gain = rng.uniform(*spec.voltage_jitter_range)
    delta = int(rng.integers(-spec.temporal_jitter_max, spec.temporal_jitter_max + 1))
    return gain * _shift(s, delta, edge=True)


def channel_crop(s: np.ndarray, k: int, rng: np.random.Generator,
                 order: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Keep a contiguous block of ``k`` slots along ``order`` that always contains slot 0.

    ``order`` lists the slots along the probe; without it the slots stay in
    distance order and the block is the ``k`` nearest channels.
    """
    c = s.shape[1]
    if not 1 <= k <= c:
        raise PipelineError(f"Cannot crop {k} of {c} channels", "invalid_spec", {"k": k, "C": c})
    order = np.arange(c) if order is None else np.asarray(order)
    anchor = int(np.flatnonzero(order == 0)[0])
    start = int(rng.integers(max(0, anchor - k + 1), min(anchor, c - k) + 1))
    mask = np.zeros(c, dtype=bool)
    mask[order[start:start + k]] = True
    return s * mask, mask


def collide(s: np.ndarray, donors: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    if len(donors) == 0:
        raise PipelineError("Collision needs a nonempty donor pool", "invalid_spec", {})
    hit = rng.random() < spec.collision_prob
    donor = donors[int(rng.integers(len(donors)))]
    scale = rng.uniform(*spec.collision_scale_range)
    delta = int(rng.integers(-spec.collision_offset_max, spec.collision_offset_max + 1))
    if not hit or scale == 0.0:
        return s.copy()
    return s + scale * _shift(np.asarray(donor, dtype=s.dtype), delta, edge=False)


def correlated_noise(s: np.ndarray, spec: AugmentSpec, rng: np.random.Generator,
                     mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Add per-channel AR(1) noise scaled to ``u`` times the snippet's MAD-based σ."""
    u = rng.uniform(*spec.noise_scale_range)
    ar = spec.noise_ar_coeff
    t, c = s.shape
    innovations = rng.standard_normal((t, c)) * np.sqrt(1.0 - ar**2)
    zi = (ar * rng.standard_normal(c))[None, :]
    noise, _ = signal.lfilter([1.0], [1.0, -ar], innovations, axis=0, zi=zi)
    visible = s if mask is None else s[:, mask]
    sigma = u * float(median_abs_deviation(visible, axis=None, scale="normal")) if visible.size else 0.0
    if sigma == 0.0:
        return s.copy()
    return s + sigma * noise


def make_view_pair(s: np.ndarray, donors: np.ndarray, spec: AugmentSpec, rng: np.random.Generator,
                   order: Optional[np.ndarray] = None) -> ViewPair:
    """View 1 is drawn first, then View 2; only View 1 is noised."""
    s = np.asarray(s, dtype=np.float64)

    def chain(noised: bool) -> Tuple[np.ndarray, np.ndarray]:
        v = jitter(s, spec, rng)
        v, mask = channel_crop(v, spec.crop_channels, rng, order)
        v = collide(v, donors, spec, rng) * mask
        if noised:
            v = correlated_noise(v, spec, rng, mask) * mask
        return v, mask

    view1, mask1 = chain(noised=True)
    view2, mask2 = chain(noised=False)
    return ViewPair(view1, view2, s * mask1, mask1, mask2)


def make_view_batch(values: np.ndarray, indices: Sequence[int], spec: AugmentSpec, seed: int, epoch: int,
                    orders: Optional[np.ndarray] = None, donors: Optional[np.ndarray] = None) -> ViewPair:
    """Stacked view pairs for ``values[indices]``.

    Each snippet draws from its own substream keyed by (seed, epoch, index), so
    a batch is reproducible regardless of how it is split.
    """
    donors = values if donors is None else donors
    pairs = [
        make_view_pair(
            values[i], donors, spec, substream(seed, "views", epoch, int(i)),
            None if orders is None else orders[i],
        )
        for i in indices
    ]
    return ViewPair(
        view1=np.stack([p.view1 for p in pairs]),
        view2=np.stack([p.view2 for p in pairs]),
        clean=np.stack([p.clean for p in pairs]),
        mask1=np.stack([p.mask1 for p in pairs]),
        mask2=np.stack([p.mask2 for p in pairs]),
    )
