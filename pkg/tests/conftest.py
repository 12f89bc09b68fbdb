import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from causeseg.feature_io import SynthSpec, generate_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small 3-class synthetic dataset shared by trainer/inference tests."""
    spec = SynthSpec(
        n_classes=3, subconcepts_per_class=2, c=32, grid=(8, 8),
        n_images=24, noise_sigma=0.05, prototype_separation=25.0, seed=11,
    )
    out = tmp_path_factory.mktemp("tiny-data")
    manifest = generate_synthetic_dataset(spec, out, val_fraction=0.25)
    return spec, manifest
