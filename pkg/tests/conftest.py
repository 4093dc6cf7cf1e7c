import numpy as np
import pytest

from multilane import tensor as T


@pytest.fixture(autouse=True)
def clean_tape():
    """Every test starts and ends with an empty tape and float32 default."""
    T.tape().clear()
    T.set_default_dtype(np.float32)
    yield
    T.tape().clear()
    T.set_default_dtype(np.float32)


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_diff(loss_fn, param, step=1e-5):
    """Central-difference gradient of scalar loss_fn() wrt a Tensor's entries.

    loss_fn must rebuild the computation from scratch on every call; the
    parameter is perturbed in place.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn()
        flat[i] = orig - step
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def grad_of(loss_builder, params):
    """Analytic gradients of loss_builder() wrt each param, one backward."""
    for p in params:
        p.zero_grad()
    T.tape().clear()
    loss = loss_builder()
    T.backward(loss)
    return [None if p.grad is None else p.grad.copy() for p in params]
