import numpy as np
import pytest

from spikerep.utils.recording_io import ProbeGeometry, Recording
from spikerep.utils.synthgen import DriftModel, SynthSpec


@pytest.fixture
def small_geometry():
    return ProbeGeometry.grid(rows=8, cols=2, pitch_um=20.0)


@pytest.fixture
def noise_recording(small_geometry):
    rng = np.random.default_rng(7)
    samples = rng.normal(0.0, 10.0, size=(3000, small_geometry.n_channels))
    return Recording(30000.0, samples, small_geometry)


def make_spec(**overrides) -> SynthSpec:
    """A few seconds on a 16-channel probe; override anything."""
    values = dict(
        n_units=3,
        rows=8,
        cols=2,
        pitch_um=20.0,
        duration_s=4.0,
        sample_rate_hz=30000.0,
        firing_rate_hz=5.0,
        amplitude_range=(80.0, 150.0),
        noise_std=0.0,
        noise_ar=0.9,
        drift=DriftModel(0.0, 0.0, 4.0),
        seed=3,
    )
    values.update(overrides)
    return SynthSpec(**values)


@pytest.fixture
def spec_factory():
    return make_spec
