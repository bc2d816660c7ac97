import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

import tensor  # noqa: E402


@pytest.fixture(autouse=True)
def reference_precision():
    """Every test starts and ends in 64-bit mode with debug checks on."""
    tensor.set_precision('f64')
    tensor.set_debug(True)
    yield
    tensor.set_precision('f64')
    tensor.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference(loss, array, step=1e-5):
    """Central differences of a scalar loss with respect to every element of array (in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        plus = loss()
        flat[i] = saved - step
        minus = loss()
        flat[i] = saved
        out[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


TINY_RUN = {
    'architecture': '4C3-AP2-8C3-AP2-4FC',
    'epochs': 1,
    'batch_size': 16,
    't_steps': 2,
    'learning_rate': 0.05,
    'synth_classes': 4,
    'synth_train_per_class': 8,
    'synth_test_per_class': 4,
    'synth_hw': 8,
}


def write_config(path, **overrides):
    """A config file for a seconds-long synthetic run."""
    settings = dict(TINY_RUN)
    settings.update(overrides)
    with open(path, 'w') as f:
        for key, value in settings.items():
            f.write(f'{key} = {value}\n')
    return str(path)
