import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sleepeff.dataset import FeatureDescriptor, FeatureSchema  # noqa: E402
from sleepeff.synthdata import SynthConfig, generate  # noqa: E402


@pytest.fixture
def small_schema():
    return FeatureSchema(
        (
            FeatureDescriptor("steps", "wearable_activity"),
            FeatureDescriptor("sedentaryminutes", "wearable_activity"),
            FeatureDescriptor("score", "survey"),
            FeatureDescriptor("gender", "survey", "categorical_ordinal", {"female": 0, "male": 1}),
        )
    )


@pytest.fixture(scope="session")
def tiny_table():
    """40 participants x 10 days of the default 93-feature layout."""
    table, truth = generate(SynthConfig(n_participants=40, days_per_participant=10, seed=3))
    return table


@pytest.fixture(scope="session")
def default_synth():
    """The default synthetic dataset (200 x 50, seed 42) and its ground truth."""
    return generate(SynthConfig())
