"""Dense numeric helpers: seeded RNG streams, tempered softmax, finite differences.

Matrices are plain ``float64`` numpy arrays. Every softmax path is max-shifted so
large logits divided by a small temperature never overflow.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidInputError, InvalidParameterError

_MASK64 = (1 << 64) - 1


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    """Return a counter-based generator keyed by ``(seed, stream)``.

    Philox is keyed directly (no hashing), so the draw sequence for a given
    pair is fixed across platforms and runs, and distinct stream ids give
    independent sequences for the same seed.
    """
    if seed < 0 or stream < 0:
        raise InvalidParameterError("seed and stream id must be non-negative")
    key = ((int(stream) & _MASK64) << 64) | (int(seed) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


def _check_logits(logits: np.ndarray, T: float) -> np.ndarray:
    if not T > 0:
        raise InvalidParameterError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim not in (1, 2) or z.shape[-1] < 2:
        raise InvalidInputError(f"expected logits with at least 2 classes, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain non-finite values")
    return z


def log_tempered_softmax(logits, T: float = 1.0) -> np.ndarray:
    """Log-probabilities of ``softmax(logits / T)`` along the last axis."""
    z = _check_logits(logits, T) / T
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def tempered_softmax(logits, T: float = 1.0) -> np.ndarray:
    """``softmax(logits / T)`` along the last axis; accepts a vector or a row batch."""
    z = _check_logits(logits, T) / T
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if not h > 0:
        raise InvalidParameterError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = float(f(x))
        flat[j] = orig - h
        fm = float(f(x))
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    """Norm-wise relative error, ``|a-b| / max(|a|, |b|)``; 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
