import numpy as np
import pytest

from fimp.diffcore.tensor import using_dtype


@pytest.fixture
def f64():
    """Run the test body in 64-bit compute mode."""
    with using_dtype(np.float64):
        yield


def numeric_gradient(make_loss, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar closure w.r.t. `arr` in place."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        f1 = float(make_loss().data)
        arr[i] = orig - h
        f2 = float(make_loss().data)
        arr[i] = orig
        out[i] = (f1 - f2) / (2.0 * h)
    return out


def assert_grad_matches(make_loss, tensors: dict, rtol: float = 1e-4,
                        h: float = 1e-6, floor: float = 1e-3) -> None:
    """FD-verify the gradient of `make_loss()` w.r.t. each named tensor."""
    loss = make_loss()
    for t in tensors.values():
        t.zero_grad()
    loss.backward()
    for name, t in tensors.items():
        num = numeric_gradient(make_loss, t.data, h)
        ana = t.grad
        err = np.abs(ana - num) / np.maximum.reduce(
            [np.abs(ana), np.abs(num), np.full_like(num, floor)])
        assert err.max() < rtol, f"{name}: max rel err {err.max():.3e}"
