"""Shared test helpers: finite differences and record factories."""

from __future__ import annotations

import numpy as np
import pytest

from veritas import UncertaintyBundle, make_record


def numeric_grad(f, arrays: dict[str, np.ndarray], name: str, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar f(arrays) w.r.t. arrays[name].

    Perturbs in place and restores, so f must rebuild its forward pass from
    the dict on every call.
    """
    base = arrays[name]
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(arrays)
        flat[i] = orig - step
        f_minus = f(arrays)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Max absolute difference over the max magnitude (floored)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(floor, float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)))
    return float(np.abs(a - n).max(initial=0.0)) / scale


def bundle_with(**overrides) -> UncertaintyBundle:
    """An UncertaintyBundle with benign defaults, selected fields overridden."""
    fields = dict(
        variation_ratio=0.0,
        entropy=0.0,
        variance=0.0,
        aleatoric=0.0,
        softmax_lcs=1.0,
        softmax_margin=1.0,
        softmax_ratio=0.0,
        softmax_entropy=0.0,
        mean_probs=(1.0, 0.0, 0.0),
        predicted_class=0,
    )
    fields.update(overrides)
    return UncertaintyBundle(**fields)


def record_with(tree_id: str, gold: str = "true", pred: str = "true", fold: int = 0, **overrides):
    return make_record(tree_id, gold, pred, bundle_with(**overrides), fold)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
