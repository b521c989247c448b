"""Weak, strong and evaluation transforms for raster and vector payloads.

Raster path: aspect-preserving resize to a target height, then a center
(weak/eval) or uniformly random (strong) square crop, random right-angle
rotation and independent horizontal/vertical flips, then normalization.

Vector path: the geometry is the identity. Weak adds Gaussian noise, strong
adds larger noise and zeroes each normalized feature with a fixed
probability. Normalization always comes last.

Random draws are skipped whenever a stochastic parameter is degenerate
(noise 0, a single valid crop offset, a one-element rotation set, flip
probability 0 or 1), so a degenerate policy leaves the generator untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from skimage.transform import resize as _sk_resize

from .data import Example
from .errors import ConfigurationError

WEAK, STRONG, EVAL = "weak", "strong", "eval"
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Normalizer:
    """Per-feature (vector) or global (raster) mean and standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass(frozen=True)
class AugmentationPolicy:
    kind: str = WEAK
    resize_height: Optional[int] = None
    crop_size: Optional[int] = None
    rotations: tuple = (0, 1, 2, 3)  # quarter turns
    flip_prob: float = 0.5
    noise: float = 0.0
    feature_drop: float = 0.0
    stats: Optional[Normalizer] = None

    def __post_init__(self):
        if self.kind not in (WEAK, STRONG, EVAL):
            raise ConfigurationError(f"unknown augmentation kind {self.kind!r}")
        if self.noise < 0 or not 0.0 <= self.feature_drop < 1.0 or not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError("noise >= 0, feature_drop in [0, 1) and flip_prob in [0, 1] required")
        if self.resize_height is not None and self.crop_size is not None and self.crop_size > self.resize_height:
            raise ConfigurationError(f"crop {self.crop_size} exceeds resize height {self.resize_height}")
        if not self.rotations or any(r not in (0, 1, 2, 3) for r in self.rotations):
            raise ConfigurationError("rotations must be a non-empty subset of {0, 1, 2, 3} quarter turns")

    def with_stats(self, stats: Normalizer) -> "AugmentationPolicy":
        return replace(self, stats=stats)


@dataclass(frozen=True)
class PolicySet:
    """The three policies used by one run, sharing geometry and statistics."""

    weak: AugmentationPolicy
    strong: AugmentationPolicy
    eval: AugmentationPolicy

    def __post_init__(self):
        if (self.weak.kind, self.strong.kind, self.eval.kind) != (WEAK, STRONG, EVAL):
            raise ConfigurationError("policy kinds must be weak, strong, eval")
        if self.strong.noise < self.weak.noise or self.strong.feature_drop < self.weak.feature_drop:
            raise ConfigurationError("strong augmentation must perturb at least as much as weak")

    def with_stats(self, stats: Normalizer) -> "PolicySet":
        return PolicySet(self.weak.with_stats(stats), self.strong.with_stats(stats), self.eval.with_stats(stats))

    @classmethod
    def build(cls, *, resize_height=None, crop_size=None, rotations=(0, 1, 2, 3), flip_prob=0.5,
              weak_noise=0.0, strong_noise=0.0, feature_drop=0.0) -> "PolicySet":
        geom = dict(resize_height=resize_height, crop_size=crop_size)
        return cls(
            AugmentationPolicy(WEAK, rotations=tuple(rotations), flip_prob=flip_prob, noise=weak_noise, **geom),
            AugmentationPolicy(STRONG, rotations=tuple(rotations), flip_prob=flip_prob, noise=strong_noise,
                               feature_drop=feature_drop, **geom),
            AugmentationPolicy(EVAL, rotations=(0,), flip_prob=0.0, **geom),
        )


# -- raster geometry --------------------------------------------------------------

def resize_to_height(img: np.ndarray, height: Optional[int]) -> np.ndarray:
    if height is None or img.shape[0] == height:
        return img
    h, w = img.shape
    width = max(1, int(round(w * height / h)))
    return _sk_resize(img, (height, width), order=1, mode="edge", anti_aliasing=False, preserve_range=True)


def _crop_size(img: np.ndarray, policy: AugmentationPolicy) -> int:
    size = policy.crop_size if policy.crop_size is not None else min(img.shape)
    if img.shape[0] < size or img.shape[1] < size:
        raise ConfigurationError(f"image {img.shape} smaller than crop {size} after resize")
    return size


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    top = (img.shape[0] - size) // 2
    left = (img.shape[1] - size) // 2
    return img[top:top + size, left:left + size]


def _random_offset(extent: int, rng: np.random.Generator) -> int:
    return int(rng.integers(0, extent + 1)) if extent > 0 else 0


def _rotate_flip(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    if len(policy.rotations) > 1:
        img = np.rot90(img, k=policy.rotations[int(rng.integers(len(policy.rotations)))])
    for axis in (1, 0):  # horizontal, then vertical
        p = policy.flip_prob
        flip = p >= 1.0 or (0.0 < p and rng.random() < p)
        if flip:
            img = np.flip(img, axis=axis)
    return img


def _finish(ex: Example, payload: np.ndarray, policy: AugmentationPolicy) -> Example:
    if policy.stats is not None:
        payload = policy.stats.apply(payload)
    return replace(ex, payload=np.ascontiguousarray(payload))


# -- vector perturbations -----------------------------------------------------------

def _noisy(x: np.ndarray, scale: float, rng) -> np.ndarray:
    return x + scale * rng.standard_normal(x.shape) if scale > 0 else x


def _dropped(x: np.ndarray, prob: float, rng) -> np.ndarray:
    return x * (rng.random(x.shape) >= prob) if prob > 0 else x


# -- public transforms --------------------------------------------------------------

def weak_augment(example: Example, policy: AugmentationPolicy, rng: np.random.Generator) -> Example:
    if example.is_raster:
        img = resize_to_height(example.payload, policy.resize_height)
        img = center_crop(img, _crop_size(img, policy))
        return _finish(example, _rotate_flip(img, policy, rng), policy)
    return _finish(example, _noisy(example.payload, policy.noise, rng), policy)


def strong_augment(example: Example, policy: AugmentationPolicy, rng: np.random.Generator) -> Example:
    if example.is_raster:
        img = resize_to_height(example.payload, policy.resize_height)
        size = _crop_size(img, policy)
        top = _random_offset(img.shape[0] - size, rng)
        left = _random_offset(img.shape[1] - size, rng)
        img = img[top:top + size, left:left + size]
        return _finish(example, _rotate_flip(img, policy, rng), policy)
    out = _finish(example, _noisy(example.payload, policy.noise, rng), policy)
    if policy.feature_drop > 0:
        out = replace(out, payload=_dropped(out.payload, policy.feature_drop, rng))
    return out


def eval_transform(example: Example, policy: AugmentationPolicy) -> Example:
    if example.is_raster:
        img = resize_to_height(example.payload, policy.resize_height)
        return _finish(example, center_crop(img, _crop_size(img, policy)), policy)
    return _finish(example, example.payload, policy)


def fit_normalizer(pool: Sequence[Example], geometry: Optional[AugmentationPolicy] = None) -> Normalizer:
    """Statistics of the (eval-geometry) labeled training pool, std floored at 1e-8."""
    if not pool:
        raise ConfigurationError("cannot fit normalization statistics on an empty pool")
    geometry = replace(geometry or AugmentationPolicy(EVAL), kind=EVAL, stats=None)
    if pool[0].is_raster:
        pix = np.concatenate([eval_transform(e, geometry).payload.ravel() for e in pool])
        mean, std = np.array(pix.mean()), np.array(pix.std())
    else:
        X = np.stack([e.payload for e in pool])
        mean, std = X.mean(axis=0), X.std(axis=0)
    return Normalizer(mean, np.maximum(std, STD_FLOOR))


def transform_batch(examples: Sequence[Example], policy: AugmentationPolicy,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Apply ``policy`` to a batch and return a flattened ``[N, d]`` design matrix.

    Vector batches are perturbed with whole-matrix draws, which is what the
    trainer uses; rasters go through the per-example functions in order.
    """
    if policy.kind != EVAL and rng is None:
        raise ConfigurationError(f"{policy.kind} augmentation needs a random generator")
    if examples[0].is_raster:
        if policy.kind == EVAL:
            rows = [eval_transform(e, policy).payload for e in examples]
        else:
            fn = weak_augment if policy.kind == WEAK else strong_augment
            rows = [fn(e, policy, rng).payload for e in examples]
        return np.stack([r.ravel() for r in rows])
    return perturb_vectors(np.stack([e.payload for e in examples]), policy, rng)


def perturb_vectors(X: np.ndarray, policy: AugmentationPolicy,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Vector-path transform of a whole ``[N, d]`` matrix of raw features."""
    if policy.kind != EVAL:
        X = _noisy(X, policy.noise, rng)
    if policy.stats is not None:
        X = policy.stats.apply(X)
    if policy.kind == STRONG:
        X = _dropped(X, policy.feature_drop, rng)
    return X
