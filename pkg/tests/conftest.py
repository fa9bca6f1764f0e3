import numpy as np
import pytest


def lattice(rng: np.random.Generator, shape, scale: int = 16, span: int = 32) -> np.ndarray:
    """Random dyadic values k/scale with |k| <= span.

    Products and modest sums of such values are exactly representable in
    float64, so reordered summation (BLAS vs plain loops) is bit-identical.
    """
    return rng.integers(-span, span + 1, size=shape).astype(np.float64) / scale


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "ablation: multi-seed directional training study; opt in with RUN_ABLATION=1")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
