import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from numeric import DTYPE, FlatParams, MlpSpec, Rng, layout_for  # noqa: E402
from models import MlpModel  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent


def scalar_model(bias: float = 0.0) -> MlpModel:
    """1 -> 1 network fed u = 0, so the loss of a row (0, x) is 1/2 (b - x)^2"""
    spec = MlpSpec(layer_widths=(1, 1))
    params = FlatParams(torch.tensor([0.0, bias], dtype=DTYPE), layout_for(spec))
    return MlpModel(spec, params, split_target=True)


def scalar_rows(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    return np.hstack([np.zeros_like(values), values])


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def gaussian_table():
    """Two correlated Gaussian blobs: 40 rows in 3 dimensions"""
    gen = np.random.default_rng(7)
    return gen.normal(size=(40, 3)) @ np.array([[1.0, 0.3, 0.0], [0.0, 1.0, 0.5], [0.0, 0.0, 1.0]])


@pytest.fixture
def write_file(tmp_path):
    def write(name: str, text: str) -> Path:
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        return path

    return write


@pytest.fixture
def data_dir():
    """Directory holding the real benchmark files; skips the test when unset"""
    value = os.environ.get("INFLUENCE_AD_DATA_DIR")
    if not value or not Path(value).is_dir():
        pytest.skip("INFLUENCE_AD_DATA_DIR is not set")
    return Path(value)
