"""
Shared pytest fixtures.

Long acceptance runs are marked ``slow`` and only run with PPAP_RUN_SLOW=1:

    PPAP_RUN_SLOW=1 pytest -m slow -v
"""

import os

import pytest

from vivarium_ppap.data import default_scene_specs, generate_synthetic_dataset
from vivarium_ppap.model import ModelConfig

# 4096-sample window plus 15 hops of 2048 gives exactly 16 frames at 44.1 kHz
TINY_SAMPLES = 4096 + 15 * 2048
TINY_DURATION = TINY_SAMPLES / 44100


def pytest_collection_modifyitems(config, items):
    if os.environ.get('PPAP_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason="set PPAP_RUN_SLOW=1 to run slow acceptance tests")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    """16x8 spectrograms, three conv blocks, N=2, D=8."""
    return ModelConfig.tiny()


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory):
    """Ten scenes of 16-frame synthetic audio; returns (manifest, directory)."""
    out_dir = tmp_path_factory.mktemp('tiny_dataset')
    manifest = generate_synthetic_dataset(
        default_scene_specs(noise_std=0.05),
        n_scenes=10,
        seed=3,
        out_dir=out_dir,
        records_per_scene=4,
        maskers_per_class=1,
        duration=TINY_DURATION,
    )
    return manifest, out_dir
