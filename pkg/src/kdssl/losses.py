"""Class-weighted cross-entropy, tempered distillation loss and their combination.

Every loss returns ``(value, dlogits)`` with the gradient taken with respect to
the student's logits only. Distillation targets travel in a
:class:`SoftTargets` value whose array is read-only and which exposes no
gradient channel, so nothing can flow back into the ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InvalidInputError, InvalidParameterError, InvalidStateError
from .numkernel import log_tempered_softmax


def class_weights(counts) -> np.ndarray:
    """Normalized inverse class frequencies, ``w_c = (1/n_c) / sum_i (1/n_i)``."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ConfigurationError("need a count for each of at least two classes")
    if np.any(counts < 1):
        raise ConfigurationError(f"every class needs at least one sample, got counts {counts.tolist()}")
    inv = 1.0 / counts
    return inv / inv.sum()


@dataclass(frozen=True)
class SoftTargets:
    """Temperature-softened ensemble probabilities, treated as constants."""

    probs: np.ndarray
    T: float

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 2 or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
            raise InvalidInputError("soft targets must be a row-stochastic [N, C] matrix")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)


def _check_labels(labels, n: int, C: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise InvalidInputError(f"expected {n} labels, got shape {y.shape}")
    if n == 0:
        raise InvalidInputError("empty batch")
    if np.any(y < 0) or np.any(y >= C):
        raise InvalidInputError(f"label outside [0, {C})")
    return y


def weighted_ce(logits, labels, weights):
    """``-(1/N) sum_i w_{y_i} log p(y_i | x_i)`` and its logit gradient."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidInputError(f"logits must be [N, C], got {z.shape}")
    n, C = z.shape
    y = _check_labels(labels, n, C)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (C,):
        raise InvalidInputError(f"expected {C} class weights, got {w.shape}")
    logp = log_tempered_softmax(z, 1.0)
    rows = np.arange(n)
    wy = w[y]
    loss = -float(np.sum(wy * logp[rows, y])) / n
    d = np.exp(logp)
    d[rows, y] -= 1.0
    d *= (wy / n)[:, None]
    return loss, d


def kd_loss(student_logits, targets: SoftTargets, T: float):
    """``-(T^2/N) sum_i sum_c target_ic log softmax(z_i / T)_c`` and its logit gradient.

    The gradient is ``(T/N) (softmax(z/T) - target)`` per row.
    """
    if not T > 0:
        raise InvalidParameterError(f"temperature must be positive, got {T}")
    if not isinstance(targets, SoftTargets):
        raise InvalidInputError("targets must be a SoftTargets value")
    if targets.T != T:
        raise InvalidStateError(f"targets were softened at T={targets.T}, loss called with T={T}")
    z = np.asarray(student_logits, dtype=np.float64)
    if z.shape != targets.probs.shape:
        raise InvalidInputError(f"student logits {z.shape} vs targets {targets.probs.shape}")
    n = z.shape[0]
    logq = log_tempered_softmax(z, T)
    loss = -(T * T) * float(np.sum(targets.probs * logq)) / n
    d = (T / n) * (np.exp(logq) - targets.probs)
    return loss, d


def combined_loss(logits, labels, weights, targets: SoftTargets, lam: float, return_parts: bool = False):
    """``L_CE + lam * L_KD`` and its logit gradient.

    With ``lam == 0`` the value and gradient are the CE term itself, bit for
    bit. ``return_parts`` appends ``{"ce": ..., "kd": ...}`` for logging.
    """
    if not lam >= 0:
        raise InvalidParameterError(f"lambda must be non-negative, got {lam}")
    ce, d_ce = weighted_ce(logits, labels, weights)
    kd, d_kd = kd_loss(logits, targets, targets.T)
    if lam == 0:
        loss, d = ce, d_ce
    else:
        loss, d = ce + lam * kd, d_ce + lam * d_kd
    if return_parts:
        return loss, d, {"ce": ce, "kd": kd}
    return loss, d


def entropy_rows(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)
