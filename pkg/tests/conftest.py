import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ledsense.data import build_synthetic_dataset, load_object_stack, split as split_dataset
from ledsense.optics import LedRing, MicroscopeConfig


def micro_desk_config() -> MicroscopeConfig:
    """Small but structurally faithful geometry: grid 64, sensor 16, 9 LEDs."""
    wavelength = 522e-9
    na = 0.2
    grid_n = 64
    dx = 6.0 * wavelength / (na * grid_n)  # pupil radius 6 px, window 13 <= 16
    return MicroscopeConfig(
        wavelength=wavelength, na=na, grid_n=grid_n, dx=dx, sensor_n=16,
        led_rings=(LedRing(0.0, 1), LedRing(18.0, 4), LedRing(40.0, 4)),
    )


@pytest.fixture(scope="session")
def micro_config():
    return micro_desk_config()


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory, micro_config):
    """40 base shapes x 2 translations per class on the micro geometry."""
    root = tmp_path_factory.mktemp("micro_ds")
    build_synthetic_dataset(
        n_per_class=20, augment_translations=2, grid_n=micro_config.grid_n,
        seed=99, out_dir=root, canvas_n=32, max_shift=8,
    )
    ds = load_object_stack(root)
    split_dataset(ds, (0.6, 0.2, 0.2), seed=5)
    return ds


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
