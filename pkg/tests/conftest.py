import numpy as np
import pytest

from hif8lab.codec import CodecParams


@pytest.fixture
def params():
    return CodecParams()


def sample_inputs(rng: np.random.Generator, n: int, lo: float = -32768.0,
                  hi: float = 32768.0) -> np.ndarray:
    """Half uniform over [lo, hi], half log-uniform in magnitude."""
    uniform = rng.uniform(lo, hi, size=n // 2)
    exponents = rng.uniform(-20, 15, size=n - n // 2)
    signs = rng.choice([-1.0, 1.0], size=n - n // 2)
    log_uniform = signs * np.exp2(exponents)
    return np.concatenate([uniform, log_uniform])
