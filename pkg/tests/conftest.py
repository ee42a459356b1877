import numpy as np
import pytest

from safeadapt.nets import ParamVector


def finite_diff_grad(objective, params: ParamVector, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a ScalarObjective, the oracle for analytic grads."""
    base = params.values
    grad = np.zeros_like(base)
    for j in range(base.size):
        up = base.copy()
        up[j] += eps
        down = base.copy()
        down[j] -= eps
        grad[j] = (
            objective.value(params.with_values(up)) - objective.value(params.with_values(down))
        ) / (2.0 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
