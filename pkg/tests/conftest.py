import numpy as np
import pytest

from asgn.config import TrainConfig
from asgn.synthgen import PlatformSpec, SimConfig, generate_dataset


def small_sim(**kw):
    """6x6 grid on the default 0.4 x 0.45 degree spacing, so 4-neighbours sit inside 50 km."""
    base = dict(
        grid_nx=6, grid_ny=6, lat_min=34.0, lat_max=36.4, lon_min=124.0, lon_max=126.7,
        steps=14, spinup=4,
        platforms=(
            PlatformSpec("sonde", motion="stationary", count=4, noise_sigma=0.05),
            PlatformSpec("sat", motion="sweeping", count=5, variables=("T", "Q"), noise_sigma=0.1,
                         speed_deg=0.5, start_lon=124.5, spread_deg=0.5),
        ),
    )
    base.update(kw)
    return SimConfig(**base)


def small_train(**kw):
    base = dict(epochs=2, windows_per_epoch=16, val_windows=16, batch_size=8, hidden=8,
                score_hidden=4, dist_hidden=2, m=3, k=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(small_sim())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
