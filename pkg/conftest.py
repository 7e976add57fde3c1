"""Shared pytest fixtures: seeded generators, a micro network and sample factories"""

import numpy as np
import pytest

import gamer_net as gn
from trainer import SEVERE_THRESHOLD, Sample


def synthetic_sample(rng, index=0, paths=3, extents=(8, 8, 8), severity=None, age=None, timepoint=0):
    """Uniform-noise sample whose first contrast brightens with severity"""
    if severity is None:
        severity = float(rng.integers(0, 21)) / 2
    volumes = rng.uniform(0.2, 0.6, size=(paths,) + tuple(extents))
    volumes[0] += 0.03 * severity
    return Sample(
        volumes=np.clip(volumes, 0, 1),
        brain_mask=np.ones(extents, dtype=bool),
        age=float(40 + index % 20) if age is None else age,
        severity=severity,
        label=int(severity >= SEVERE_THRESHOLD),
        subject_id=f"sub-{index:03d}",
        timepoint=timepoint,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_params():
    return gn.build(gn.micro_spec(), seed=3)


@pytest.fixture
def make_sample(rng):
    def factory(index=0, **kwargs):
        return synthetic_sample(rng, index=index, **kwargs)
    return factory


@pytest.fixture
def cohort(rng):
    """Twelve subjects on 8^3, balanced between mild and severe"""
    severities = [0.0, 1.0, 2.0, 3.0, 4.0, 4.5, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]
    return [synthetic_sample(rng, index=i, severity=s) for i, s in enumerate(severities)]
