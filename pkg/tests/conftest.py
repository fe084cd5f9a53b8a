import random
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("suite", max_examples=50, deadline=None)
settings.load_profile("suite")

ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture(scope="session")
def demo_dir() -> Path:
    return ROOT / "demos"


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xC0FFEE)
