"""K-member ensembles: logit averaging, softened targets, unsmoothed predictions."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .losses import SoftTargets
from .model import EVAL, Classifier, ModelSpec, init_model, STREAM_INIT
from .numkernel import tempered_softmax


def ensemble_logits(member_logits: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of the members' ``[N, C]`` logits."""
    if len(member_logits) == 0:
        raise InvalidInputError("need at least one member's logits")
    stack = [np.asarray(z, dtype=np.float64) for z in member_logits]
    shape = stack[0].shape
    if len(shape) != 2 or any(z.shape != shape for z in stack):
        raise InvalidInputError("member logits must share one [N, C] shape")
    if len(stack) == 1:
        return stack[0].copy()
    return np.mean(np.stack(stack), axis=0)


def soft_targets(mean_logits, T: float) -> SoftTargets:
    """Row-wise ``softmax(mean_logits / T)``, frozen for use as distillation targets."""
    return SoftTargets(tempered_softmax(np.asarray(mean_logits, dtype=np.float64), T), float(T))


def ensemble_predict(mean_logits):
    """Softmax at T=1, argmax (lowest index on ties) and max-probability confidence."""
    z = np.asarray(mean_logits, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidInputError(f"expected [N, C] logits, got {z.shape}")
    probs = tempered_softmax(z, 1.0)
    pred = np.argmax(probs, axis=1)
    return probs, pred, probs[np.arange(len(pred)), pred]


class Ensemble:
    """The member models f^1..f^K. Members share one spec and differ by seed."""

    def __init__(self, members: Sequence[Classifier]):
        if not members:
            raise ConfigurationError("an ensemble needs at least one member")
        spec = members[0].spec
        if any(m.spec.input_dim != spec.input_dim or m.spec.num_classes != spec.num_classes for m in members):
            raise ConfigurationError("ensemble members must share input and output dimensions")
        self.members = list(members)

    @classmethod
    def create(cls, spec: ModelSpec, K: int, seed: int) -> "Ensemble":
        """Member ``k`` is initialized from RNG stream ``STREAM_INIT + k``."""
        if K < 1:
            raise ConfigurationError(f"ensemble size must be >= 1, got {K}")
        return cls([init_model(spec, seed, STREAM_INIT + k) for k in range(K)])

    @property
    def K(self) -> int:
        return len(self.members)

    @property
    def spec(self) -> ModelSpec:
        return self.members[0].spec

    def member_logits(self, X) -> list:
        return [m.forward(X, EVAL)[0] for m in self.members]

    def mean_logits(self, X) -> np.ndarray:
        return ensemble_logits(self.member_logits(X))

    def predict(self, X):
        return ensemble_predict(self.mean_logits(X))

    def snapshot(self) -> list:
        return [[p.copy() for p in m.params] for m in self.members]

    def restore(self, snapshot) -> None:
        for m, params in zip(self.members, snapshot):
            m.set_params(params)
