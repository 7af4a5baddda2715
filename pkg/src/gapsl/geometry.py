"""Flat-vector gradient geometry.

Gradients are flattened into 1-D vectors (layers in forward order, each
layer's weights row-major followed by its biases) and compared by angle.
All angle math runs in float64 regardless of the vectors' storage dtype;
cosines are clamped to [-1, 1] before arccos so near-parallel vectors
never produce NaN.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateGradientError

# Vectors with norm at or below this are degenerate: their direction is
# meaningless and they are excluded from all scoring and selection.
EPS_NORM = 1e-12


@dataclass
class GradientVector:
    """One client's flattened server-side parameter gradient for a round."""

    client_id: int
    round: int
    values: np.ndarray

    def norm(self) -> float:
        return float(np.linalg.norm(self.values.astype(np.float64, copy=False)))

    def is_degenerate(self) -> bool:
        return self.norm() <= EPS_NORM


def flatten(tensors: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate tensors into one 1-D vector, row-major within each tensor."""
    if not tensors:
        raise ValueError("cannot flatten an empty tensor list")
    return np.concatenate([np.ravel(t, order="C") for t in tensors])


def unflatten(vector: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> list[np.ndarray]:
    """Inverse of :func:`flatten` given the original tensor shapes."""
    out = []
    pos = 0
    for shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        out.append(vector[pos : pos + size].reshape(shape))
        pos += size
    if pos != vector.size:
        raise ValueError(f"vector length {vector.size} does not match shapes (need {pos})")
    return out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped into [-1, 1].

    The norm product is taken as sqrt(<a,a> * <b,b>) so identical vectors
    land on exactly 1.0 before the clamp.
    """
    a64 = a.astype(np.float64, copy=False)
    b64 = b.astype(np.float64, copy=False)
    naa = float(np.dot(a64, a64))
    nbb = float(np.dot(b64, b64))
    if naa <= EPS_NORM * EPS_NORM or nbb <= EPS_NORM * EPS_NORM:
        raise DegenerateGradientError(
            f"cosine undefined for near-zero vector (norms {np.sqrt(naa):.3e}, {np.sqrt(nbb):.3e})"
        )
    c = float(np.dot(a64, b64)) / float(np.sqrt(naa * nbb))
    return min(1.0, max(-1.0, c))


def angular_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in [0, pi] between two gradient vectors."""
    return float(np.arccos(cosine(a, b)))


def pairwise_mean_deviation(vectors: Sequence[np.ndarray]) -> float | None:
    """Mean angle over all distinct pairs, excluding degenerate vectors.

    Returns None when fewer than two non-degenerate vectors remain.
    """
    usable = [
        v for v in vectors
        if float(np.linalg.norm(v.astype(np.float64, copy=False))) > EPS_NORM
    ]
    if len(usable) < 2:
        return None
    total = 0.0
    pairs = 0
    for i in range(len(usable)):
        for j in range(i + 1, len(usable)):
            total += angular_deviation(usable[i], usable[j])
            pairs += 1
    return total / pairs


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation (divide by n) of a sample."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mean_std of an empty sequence")
    return float(np.mean(arr)), float(np.std(arr))
