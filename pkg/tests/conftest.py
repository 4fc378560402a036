from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from advforge import synth


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    """60 synthetic PE files, built without touching the serializer."""
    out = tmp_path_factory.mktemp("corpus")
    synth.write_corpus(out, 60, seed=7)
    return out


@pytest.fixture(scope="session")
def corpus_files(corpus_dir) -> list[Path]:
    return sorted(corpus_dir.iterdir())


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
