"""Shared fixtures and the finite-difference gradient oracle.

The oracle only ever calls the forward path, so it stays independent of the
reverse-mode sweep it is used to check.
"""

import numpy as np
import pytest

from langloc import data, model
from langloc.numerics import Tensor

# relative-error denominator floor: keeps central-difference roundoff
# (~1e-9 on O(100) losses at h=1e-5) from dominating near-zero gradients
REL_FLOOR = 1e-4


def finite_difference_gradient(fn, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of
    ``tensor``, mutating it in place and restoring it."""
    arr = tensor.data
    grad = np.zeros_like(arr)
    flat_grad = grad.reshape(-1)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(fn())
        flat[i] = orig - h
        f_minus = float(fn())
        flat[i] = orig
        flat_grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def tiny_setup():
    """d_model=16, N=2, heads=2, K=2, 32x32 images, patch 8: the smallest
    end-to-end configuration."""
    catalog = data.synthetic_catalog(2)
    vocab = data.build_vocab(catalog)
    config = model.ModelConfig(
        channels=3, height=32, width=32, patch=8, d_model=16, n_heads=2,
        n_layers=2, n_scenes=2, vocab_size=len(vocab), max_caption_len=16,
        dropout=0.5,
    )
    ds_config = data.DatasetConfig(channels=3, height=32, width=32, max_caption_len=16)
    samples = data.generate_synthetic(11, catalog, 2, ds_config)
    return catalog, config, ds_config, samples
