from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure src/ is importable when running tests without installing the package.
ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from layerqe.transformer import TransformerConfig  # noqa: E402

DATA_DIR = Path(__file__).resolve().parent / "data"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> TransformerConfig:
    """Four layers, small enough for per-test forward passes."""
    return TransformerConfig(n_layers=4, d_model=16, n_heads=2, d_ff=24, vocab_size=300, max_seq_len=64)


@pytest.fixture
def f64_config() -> TransformerConfig:
    """Float64 model for finite-difference gradient checks."""
    return TransformerConfig(
        n_layers=2, d_model=8, n_heads=2, d_ff=12, vocab_size=300, max_seq_len=8, init_std=0.3, dtype="float64"
    )


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR
