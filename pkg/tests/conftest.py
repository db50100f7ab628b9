import numpy as np
import pytest

from peft_forge import autodiff as ad


def fd_grad(f, tensor, eps=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``tensor``."""
    out = np.zeros(tensor.shape, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f().data)
        flat[i] = orig - eps
        fm = float(f().data)
        flat[i] = orig
        out.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / (np.linalg.norm(a) + np.linalg.norm(b) + 1e-12))


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
