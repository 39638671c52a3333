from pathlib import Path

import numpy as np
import pytest

from pixelrcnn.layers import ModelConfig

FIXTURES = Path(__file__).parent / "fixtures"

# Reference survey class counts, in catalog order.
REFERENCE_COUNTS = [3020, 9343, 7384, 4382, 12826, 5836, 849, 495, 1744, 2451, 17942, 1188, 6110, 2549, 15997]


@pytest.fixture
def reference_confusion_path():
    return FIXTURES / "reference_confusion.csv"


@pytest.fixture
def small_config():
    """Tiny architecture for exhaustive gradient checks."""
    return ModelConfig(t=5, b=3, u=4, d_out=5, n1=2, f1=2, n2=3, f2=3, K=3, dropout_p=0.0)


def numeric_grad(f, arr, h=1e-5, index=None):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` (modified in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if index is None else index
    for k in idx:
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))
