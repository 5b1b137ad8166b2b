import numpy as np
import pytest

from bboxplan import numerics as nm


def fd_check(build, *inputs, eps=1e-4):
    """Max relative error between backprop and central differences for ``build(*leaves)``."""
    leaves = [nm.leaf(np.array(x, dtype=np.float64)) for x in inputs]
    nm.backward(build(*leaves))
    worst = 0.0
    for lf in leaves:
        num = nm.numerical_grad(lambda: float(build(*leaves).value.reshape(-1)[0]), lf.value, eps)
        scale = max(np.abs(lf.grad).max(initial=0.0), np.abs(num).max(initial=0.0))
        if scale > 0:
            worst = max(worst, float(np.abs(lf.grad - num).max() / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
