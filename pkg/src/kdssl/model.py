"""Feed-forward classifiers with hand-written reverse-mode gradients.

Two architectures share one contract:

* ``mlp``  - dense ReLU layers, dropout on the input of the classification layer.
* ``conv`` - two (3x3 conv, ReLU, 2x2 max-pool) blocks, one dense ReLU layer,
  dropout, classification layer. Inputs arrive flattened as ``[N, H*W]``.

Dropout is inverted (kept units are divided by the keep probability), so the
eval path is scale-free and never touches a random generator.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InvalidInputError, InvalidStateError
from .numkernel import rng_stream

TRAIN, EVAL = "train", "eval"
STREAM_INIT = 10

_tokens = itertools.count()


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden: tuple = (64,)
    dropout: float = 0.5
    kind: str = "mlp"
    image_shape: Optional[tuple] = None  # (H, W) for conv
    channels: tuple = (8, 16)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.kind not in ("mlp", "conv"):
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ConfigurationError("input_dim >= 1 and num_classes >= 2 required")
        if any(h < 1 for h in self.hidden) or any(c < 1 for c in self.channels):
            raise ConfigurationError("zero-width layer in model spec")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.kind == "conv":
            if self.image_shape is None or len(self.channels) != 2 or len(self.hidden) != 1:
                raise ConfigurationError("conv model needs image_shape, two channel widths and one hidden width")
            h, w = self.image_shape
            if h * w != self.input_dim or h < 4 or w < 4:
                raise ConfigurationError(f"image_shape {self.image_shape} inconsistent with input_dim {self.input_dim}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim, "num_classes": self.num_classes, "hidden": list(self.hidden),
            "dropout": self.dropout, "kind": self.kind,
            "image_shape": list(self.image_shape) if self.image_shape else None,
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if d.get("image_shape") is not None:
            d["image_shape"] = tuple(d["image_shape"])
        return cls(**d)


@dataclass
class ForwardCache:
    token: int
    version: int
    n: int
    tensors: dict = field(default_factory=dict)


def _uniform(rng, fan_in: int, shape, gain: float) -> np.ndarray:
    limit = np.sqrt(gain / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Classifier:
    """Base class. ``params`` is a flat list of arrays in declared order."""

    def __init__(self, spec: ModelSpec, params: list):
        self.spec = spec
        self.params = params
        self.version = 0
        self.token = next(_tokens)

    @property
    def param_shapes(self) -> list:
        return [p.shape for p in self.params]

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params))

    def touch(self) -> None:
        """Mark parameters as changed; caches from earlier forwards become stale."""
        self.version += 1

    def copy(self) -> "Classifier":
        twin = type(self)(self.spec, [p.copy() for p in self.params])
        return twin

    def set_params(self, params) -> None:
        if [np.shape(p) for p in params] != self.param_shapes:
            raise InvalidStateError("parameter shapes do not match the model")
        self.params = [np.array(p, dtype=np.float64) for p in params]
        self.touch()

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.spec.input_dim:
            raise InvalidInputError(f"expected batch [N, {self.spec.input_dim}], got {X.shape}")
        return X

    def _dropout(self, a: np.ndarray, mode: str, rng, cache: ForwardCache) -> np.ndarray:
        rate = self.spec.dropout
        if mode == EVAL or rate == 0.0:
            cache.tensors["mask"] = None
            return a
        if mode != TRAIN:
            raise InvalidInputError(f"mode must be 'train' or 'eval', got {mode!r}")
        if rng is None:
            raise InvalidInputError("train-mode dropout needs a random generator")
        mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
        cache.tensors["mask"] = mask
        return a * mask

    def _check_cache(self, cache: ForwardCache, dlogits) -> np.ndarray:
        if cache.token != self.token or cache.version != self.version:
            raise InvalidStateError("forward cache is stale or belongs to another model")
        d = np.asarray(dlogits, dtype=np.float64)
        if d.shape != (cache.n, self.spec.num_classes):
            raise InvalidInputError(f"dlogits shape {d.shape} does not match forward batch")
        return d

    def forward(self, X, mode: str = EVAL, rng=None):
        raise NotImplementedError

    def backward(self, cache: ForwardCache, dlogits) -> list:
        raise NotImplementedError

    def predict_logits(self, X) -> np.ndarray:
        return self.forward(X, EVAL)[0]


class MLP(Classifier):
    @classmethod
    def init(cls, spec: ModelSpec, rng: np.random.Generator) -> "MLP":
        widths = [spec.input_dim, *spec.hidden, spec.num_classes]
        params = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            gain = 3.0 if i == len(widths) - 2 else 6.0
            params += [_uniform(rng, fan_in, (fan_in, fan_out), gain), np.zeros(fan_out)]
        return cls(spec, params)

    def forward(self, X, mode: str = EVAL, rng=None):
        X = self._check_input(X)
        cache = ForwardCache(self.token, self.version, X.shape[0])
        acts = [X]
        a = X
        n_layers = len(self.params) // 2
        for l in range(n_layers - 1):
            a = np.maximum(a @ self.params[2 * l] + self.params[2 * l + 1], 0.0)
            acts.append(a)
        a = self._dropout(a, mode, rng, cache)
        logits = a @ self.params[-2] + self.params[-1]
        cache.tensors["acts"] = acts
        cache.tensors["last_in"] = a
        return logits, cache

    def backward(self, cache: ForwardCache, dlogits) -> list:
        d = self._check_cache(cache, dlogits)
        acts = cache.tensors["acts"]
        grads = [None] * len(self.params)
        grads[-2] = cache.tensors["last_in"].T @ d
        grads[-1] = d.sum(axis=0)
        da = d @ self.params[-2].T
        if cache.tensors["mask"] is not None:
            da = da * cache.tensors["mask"]
        for l in range(len(self.params) // 2 - 2, -1, -1):
            dz = da * (acts[l + 1] > 0.0)
            grads[2 * l] = acts[l].T @ dz
            grads[2 * l + 1] = dz.sum(axis=0)
            da = dz @ self.params[2 * l].T
        return grads


# -- convolution helpers --------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """``[N, C, H, W]`` -> ``[N*H*W, C*9]`` patches of a zero-padded 3x3 'same' conv."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    d6 = dcols.reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + w] += d6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def _maxpool(x: np.ndarray):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def _maxpool_back(dout: np.ndarray, idx: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    h2, w2 = dout.shape[2:]
    blocks = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    dx = np.zeros(shape)
    dx[:, :, :2 * h2, :2 * w2] = blocks
    return dx


class ConvNet(Classifier):
    @classmethod
    def init(cls, spec: ModelSpec, rng: np.random.Generator) -> "ConvNet":
        c1, c2 = spec.channels
        h, w = spec.image_shape
        flat = c2 * (h // 2 // 2) * (w // 2 // 2)
        hidden = spec.hidden[0]
        params = [
            _uniform(rng, 9, (9, c1), 6.0), np.zeros(c1),
            _uniform(rng, 9 * c1, (9 * c1, c2), 6.0), np.zeros(c2),
            _uniform(rng, flat, (flat, hidden), 6.0), np.zeros(hidden),
            _uniform(rng, hidden, (hidden, spec.num_classes), 3.0), np.zeros(spec.num_classes),
        ]
        return cls(spec, params)

    def forward(self, X, mode: str = EVAL, rng=None):
        X = self._check_input(X)
        n = X.shape[0]
        h, w = self.spec.image_shape
        cache = ForwardCache(self.token, self.version, n)
        t = cache.tensors
        x = X.reshape(n, 1, h, w)
        for blk in range(2):
            W, b = self.params[2 * blk], self.params[2 * blk + 1]
            cols = _im2col(x)
            z = cols @ W + b
            hh, ww = x.shape[2:]
            z = z.reshape(n, hh, ww, -1).transpose(0, 3, 1, 2)
            r = np.maximum(z, 0.0)
            pooled, idx = _maxpool(r)
            t[f"cols{blk}"], t[f"in{blk}"], t[f"r{blk}"], t[f"idx{blk}"] = cols, x.shape, r, idx
            x = pooled
        flat = x.reshape(n, -1)
        hid = np.maximum(flat @ self.params[4] + self.params[5], 0.0)
        t["flat"], t["pool_shape"], t["hid"] = flat, x.shape, hid
        a = self._dropout(hid, mode, rng, cache)
        t["last_in"] = a
        return a @ self.params[6] + self.params[7], cache

    def backward(self, cache: ForwardCache, dlogits) -> list:
        d = self._check_cache(cache, dlogits)
        t = cache.tensors
        n = cache.n
        grads = [None] * 8
        grads[6] = t["last_in"].T @ d
        grads[7] = d.sum(axis=0)
        da = d @ self.params[6].T
        if t["mask"] is not None:
            da = da * t["mask"]
        dz = da * (t["hid"] > 0.0)
        grads[4] = t["flat"].T @ dz
        grads[5] = dz.sum(axis=0)
        dx = (dz @ self.params[4].T).reshape(t["pool_shape"])
        for blk in (1, 0):
            r = t[f"r{blk}"]
            dr = _maxpool_back(dx, t[f"idx{blk}"], r.shape)
            dzc = dr * (r > 0.0)
            dmat = dzc.transpose(0, 2, 3, 1).reshape(-1, dzc.shape[1])
            grads[2 * blk] = t[f"cols{blk}"].T @ dmat
            grads[2 * blk + 1] = dmat.sum(axis=0)
            if blk:
                dx = _col2im(dmat @ self.params[2 * blk].T, t[f"in{blk}"])
        return grads


def init_model(spec: ModelSpec, seed: int, stream: int = STREAM_INIT) -> Classifier:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``(seed, stream)``."""
    rng = rng_stream(seed, stream)
    return (ConvNet if spec.kind == "conv" else MLP).init(spec, rng)


def build_model(spec: ModelSpec, params: list) -> Classifier:
    model = (ConvNet if spec.kind == "conv" else MLP)(spec, [np.array(p, dtype=np.float64) for p in params])
    expected = init_model(spec, 0).param_shapes
    if model.param_shapes != expected:
        raise InvalidStateError("parameter shapes do not match the model spec")
    return model
