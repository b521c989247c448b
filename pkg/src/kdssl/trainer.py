"""Semi-supervised ensemble training with online distillation and pseudo-labeling.

One SSL iteration = ``epochs`` passes of supervised training with distillation
over the labeled pool, followed by one pseudo-labeling pass over the unlabeled
pool whose confident predictions are moved into the labeled pool. Members keep
their weights across iterations unless ``warm_start`` is off.

Random draws come from per-purpose Philox streams keyed by ``(seed, stream)``;
the ids are the ``STREAM_*`` constants below, so an external loop can replay
exactly the same randomness.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .augment import (
    AugmentationPolicy,
    Normalizer,
    PolicySet,
    eval_transform,
    fit_normalizer,
    perturb_vectors,
    transform_batch,
)
from .data import PSEUDO, DatasetPools, Example, labels_of, stack_payloads
from .ensemble import Ensemble, ensemble_logits, ensemble_predict, soft_targets
from .errors import (
    ConfigurationError,
    InvalidParameterError,
    InvalidStateError,
    TrainingDivergenceError,
)
from .losses import class_weights, combined_loss
from .metrics import MetricsReport, evaluate_predictions
from .model import EVAL, TRAIN, ModelSpec
from .numkernel import rng_stream

log = logging.getLogger(__name__)

STREAM_SHUFFLE = 200
STREAM_AUGMENT = 201
STREAM_PSEUDO = 202
STREAM_DROPOUT = 300  # + member index
STREAM_MEMBER_AUGMENT = 400  # + member index, per-member augmentation mode only

MAX_BAD_BATCHES = 3


@dataclass(frozen=True)
class AugmentSettings:
    weak_noise: float = 0.1
    strong_noise: float = 0.3
    feature_drop: float = 0.1
    resize_height: Optional[int] = None
    crop_size: Optional[int] = None
    flip_prob: float = 0.5
    rotations: tuple = (0, 1, 2, 3)

    def policies(self) -> PolicySet:
        return PolicySet.build(resize_height=self.resize_height, crop_size=self.crop_size,
                               rotations=tuple(self.rotations), flip_prob=self.flip_prob,
                               weak_noise=self.weak_noise, strong_noise=self.strong_noise,
                               feature_drop=self.feature_drop)


@dataclass(frozen=True)
class TrainConfig:
    K: int = 3
    lam: float = 10.0
    T: float = 2.0
    tau: float = 0.95
    lr: float = 1e-3
    epochs: int = 40
    n_iter: int = 3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.5
    hidden: tuple = (64,)
    model_kind: str = "mlp"
    channels: tuple = (8, 16)
    seed: int = 0
    shared_augmentation: bool = True
    warm_start: bool = True
    augment: AugmentSettings = field(default_factory=AugmentSettings)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "channels", tuple(self.channels))
        if isinstance(self.augment, dict):
            aug = dict(self.augment)
            if "rotations" in aug:
                aug["rotations"] = tuple(aug["rotations"])
            object.__setattr__(self, "augment", AugmentSettings(**aug))
        if self.K < 1 or self.epochs < 1 or self.n_iter < 1 or self.batch_size < 1:
            raise ConfigurationError("K, epochs, n_iter and batch_size must all be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError(f"tau must lie in [0, 1], got {self.tau}")
        if not self.T > 0 or not self.lr > 0 or self.lam < 0:
            raise ConfigurationError("T > 0, lr > 0 and lam >= 0 required")

    def check_for(self, num_classes: int) -> None:
        # Below 1/C every prediction clears the threshold; allowed for sweeps but logged.
        if self.tau <= 1.0 / num_classes:
            log.warning("tau=%s <= 1/C=%s admits every unlabeled example", self.tau, 1.0 / num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["channels"] = list(self.channels)
        d["augment"]["rotations"] = list(self.augment.rotations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


@dataclass(frozen=True)
class PseudoLabelRecord:
    id: str
    label: int
    confidence: float
    iteration: int


@dataclass
class EpochStats:
    iteration: int
    epoch: int
    lr: float
    ce: list
    kd: list
    loss: list

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(eta: float, m: int, M: int) -> float:
    """``eta * cos(7 pi m / (18 M))``: decays to ``cos(70 deg) ~ 0.342`` of ``eta`` at ``m = M``."""
    if M < 1 or m < 0:
        raise InvalidParameterError(f"need M >= 1 and m >= 0, got m={m}, M={M}")
    if m > M:
        raise InvalidParameterError(f"epoch index {m} exceeds total epochs {M}")
    return eta * math.cos(7.0 * math.pi * m / (18.0 * M))


def adam_step(params: list, grads: list, state: OptimizerState, lr: float, hyper: AdamHyper = AdamHyper()) -> list:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise InvalidStateError("gradient shapes do not match parameters")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in parameter block {i} at step {state.step + 1}")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return params


class TrainStreams:
    """Named random generators for one training run."""

    def __init__(self, seed: int, K: int):
        self.shuffle = rng_stream(seed, STREAM_SHUFFLE)
        self.augment = rng_stream(seed, STREAM_AUGMENT)
        self.pseudo = rng_stream(seed, STREAM_PSEUDO)
        self.dropout = [rng_stream(seed, STREAM_DROPOUT + k) for k in range(K)]
        self.member_augment = [rng_stream(seed, STREAM_MEMBER_AUGMENT + k) for k in range(K)]


class BatchSource:
    """Turns example indices into augmented design matrices for one pool."""

    def __init__(self, examples: Sequence[Example]):
        self.examples = list(examples)
        self.raster = bool(self.examples) and self.examples[0].is_raster
        self.raw = None if self.raster or not self.examples else stack_payloads(self.examples)

    def __len__(self):
        return len(self.examples)

    def batch(self, idx, policy: AugmentationPolicy, rng=None) -> np.ndarray:
        if self.raster:
            return transform_batch([self.examples[i] for i in idx], policy, rng)
        return perturb_vectors(self.raw[idx], policy, rng)

    def all(self, policy: AugmentationPolicy, rng=None) -> np.ndarray:
        return self.batch(np.arange(len(self.examples)), policy, rng)


def model_spec_for(cfg: TrainConfig, input_dim: int, num_classes: int, image_shape=None) -> ModelSpec:
    return ModelSpec(input_dim=input_dim, num_classes=num_classes, hidden=cfg.hidden, dropout=cfg.dropout,
                     kind=cfg.model_kind, image_shape=image_shape, channels=cfg.channels)


@dataclass
class EvalResult:
    ensemble: MetricsReport
    members: list

    @property
    def member_mean_bacc(self) -> float:
        return float(np.mean([m.bacc for m in self.members]))

    def to_dict(self) -> dict:
        return {"ensemble": self.ensemble.to_dict(), "members": [m.to_dict() for m in self.members]}


def evaluate(ensemble: Ensemble, X: np.ndarray, y: np.ndarray) -> EvalResult:
    """Score the ensemble (mean logits) and every member on eval-transformed inputs."""
    C = ensemble.spec.num_classes
    logits = ensemble.member_logits(X)
    _, pred, _ = ensemble_predict(ensemble_logits(logits))
    members = [evaluate_predictions(np.argmax(z, axis=1), y, C) for z in logits]
    return EvalResult(evaluate_predictions(pred, y, C), members)


class SSLTrainer:
    """Owns the ensemble, optimizer states, policies and random streams of one run."""

    def __init__(self, cfg: TrainConfig, ensemble: Ensemble, policies: PolicySet, streams: TrainStreams):
        self.cfg = cfg
        self.ensemble = ensemble
        self.policies = policies
        self.streams = streams
        self.hyper = AdamHyper(cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.reset_optimizers()

    def reset_optimizers(self) -> None:
        self.opt = [OptimizerState.zeros_like(m.params) for m in self.ensemble.members]
        self.bad_streak = 0

    def train_step(self, X: np.ndarray, y: np.ndarray, weights: np.ndarray, lr: float,
                   member_inputs: Optional[list] = None):
        """One minibatch: forward all members, build frozen targets, update each member.

        Returns per-member ``(loss, ce, kd)`` or ``None`` when the batch was
        skipped because some loss was non-finite.
        """
        cfg = self.cfg
        members = self.ensemble.members
        outs = []
        for k, member in enumerate(members):
            Xk = X if member_inputs is None else member_inputs[k]
            outs.append(member.forward(Xk, TRAIN, self.streams.dropout[k]))
        if not all(np.all(np.isfinite(z)) for z, _ in outs):
            return None
        targets = soft_targets(ensemble_logits([z for z, _ in outs]), cfg.T)
        results = []
        for z, _ in outs:
            loss, d, parts = combined_loss(z, y, weights, targets, cfg.lam, return_parts=True)
            results.append((loss, parts["ce"], parts["kd"], d))
        if not all(math.isfinite(r[0]) for r in results):
            return None
        for k, (member, (_, cache), res) in enumerate(zip(members, outs, results)):
            grads = member.backward(cache, res[3])
            adam_step(member.params, grads, self.opt[k], lr, self.hyper)
            member.touch()
        return [r[:3] for r in results]

    def train_epoch(self, source: BatchSource, y: np.ndarray, weights: np.ndarray, m: int,
                    iteration: int = 1) -> EpochStats:
        if len(source) == 0:
            raise ConfigurationError("labeled pool is empty")
        cfg = self.cfg
        K = self.ensemble.K
        lr = cosine_lr(cfg.lr, m, cfg.epochs)
        order = self.streams.shuffle.permutation(len(source))
        sums = np.zeros((K, 3))
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if cfg.shared_augmentation or K == 1:
                X = source.batch(idx, self.policies.strong, self.streams.augment)
                per_member = None
            else:
                X = None
                per_member = [source.batch(idx, self.policies.strong, g) for g in self.streams.member_augment]
            res = self.train_step(X, y[idx], weights, lr, per_member)
            if res is None:
                self.bad_streak += 1
                log.warning("non-finite loss at iteration %d epoch %d batch %d", iteration, m, batches)
                if self.bad_streak >= MAX_BAD_BATCHES:
                    raise TrainingDivergenceError(f"loss non-finite for {self.bad_streak} consecutive batches "
                                                  f"(iteration {iteration}, epoch {m})")
                continue
            self.bad_streak = 0
            sums += np.array(res)
            batches += 1
        means = sums / max(batches, 1)
        return EpochStats(iteration, m, lr, means[:, 1].tolist(), means[:, 2].tolist(), means[:, 0].tolist())

    def pseudo_label(self, unlabeled: Sequence[Example], tau: float, iteration: int) -> list:
        """One weak draw per example, eval-mode members, admit where confidence > tau."""
        return pseudo_label(self.ensemble, unlabeled, tau, self.policies.weak, self.streams.pseudo, iteration)


def pseudo_label(ensemble: Ensemble, unlabeled: Sequence[Example], tau: float, weak: AugmentationPolicy,
                 rng: np.random.Generator, iteration: int = 1) -> list:
    if not unlabeled:
        return []
    X = BatchSource(unlabeled).all(weak, rng)
    _, pred, conf = ensemble.predict(X)
    return [PseudoLabelRecord(ex.id, int(c), float(p), iteration)
            for ex, c, p in zip(unlabeled, pred, conf) if p > tau]


def expand_dataset(pools: DatasetPools, records: Sequence[PseudoLabelRecord]) -> DatasetPools:
    """Move admitted examples from D_U to D_L with their pseudo-labels."""
    if not records:
        return pools
    by_id = {r.id: r for r in records}
    if len(by_id) != len(records):
        raise InvalidStateError("duplicate ids among pseudo-label records")
    known = {e.id for e in pools.unlabeled}
    unknown = set(by_id) - known
    if unknown:
        raise InvalidStateError(f"pseudo-label records for ids not in the unlabeled pool: {sorted(unknown)[:5]}")
    moved, kept = [], []
    for ex in pools.unlabeled:
        r = by_id.get(ex.id)
        if r is None:
            kept.append(ex)
        else:
            moved.append(replace(ex, label=r.label, origin=PSEUDO, iteration=r.iteration))
    return DatasetPools(pools.labeled + tuple(moved), tuple(kept), pools.num_classes)


def audit_records(records: Sequence[PseudoLabelRecord], pools: DatasetPools, iteration: int) -> dict:
    """Pseudo-label count, per-class count and precision against the hidden labels."""
    truth = {e.id: e.audit_label for e in pools.unlabeled}
    known = [(r, truth.get(r.id)) for r in records if truth.get(r.id) is not None]
    correct = sum(1 for r, t in known if r.label == t)
    per_class = np.bincount([r.label for r in records], minlength=pools.num_classes).tolist()
    return {
        "iteration": iteration,
        "admitted": len(records),
        "per_class": per_class,
        "precision": (correct / len(known)) if known else None,
        "labeled_before": len(pools.labeled),
        "unlabeled_before": len(pools.unlabeled),
    }


@dataclass
class SSLResult:
    ensemble: Ensemble
    normalizer: Normalizer
    policies: PolicySet
    pools: DatasetPools
    history: list
    audit: list
    epoch_stats: list
    best_iteration: int
    best_val_bacc: float

    def eval_matrix(self, examples: Sequence[Example]) -> np.ndarray:
        return BatchSource(examples).all(self.policies.eval)


def run_ssl(cfg: TrainConfig, pools: DatasetPools, val: Sequence[Example], test: Sequence[Example] = (),
            stage2: bool = True, diagnostic_path=None) -> SSLResult:
    """Full loop: train with distillation, pseudo-label, expand; repeat ``n_iter`` times.

    Within each iteration the members are evaluated on ``val`` after every
    epoch and the best-BAcc (ensemble) snapshot is restored before pseudo-
    labeling. The returned ensemble is the best snapshot over all iterations.
    ``stage2=False`` disables pseudo-labeling (the fully supervised baseline).
    """
    if not pools.labeled:
        raise ConfigurationError("labeled pool is empty")
    if not val:
        raise ConfigurationError("validation split is empty")
    cfg.check_for(pools.num_classes)
    base = cfg.augment.policies()
    normalizer = fit_normalizer(pools.labeled, base.eval)
    policies = base.with_stats(normalizer)
    val_X = BatchSource(val).all(policies.eval)
    val_y = np.array([e.label for e in val], dtype=np.int64)
    test_X = BatchSource(test).all(policies.eval) if test else None
    test_y = np.array([e.label for e in test], dtype=np.int64) if test else None
    image_shape = None
    if val[0].is_raster:
        image_shape = eval_transform(val[0], policies.eval).payload.shape
    spec = model_spec_for(cfg, val_X.shape[1], pools.num_classes, image_shape)
    ensemble = Ensemble.create(spec, cfg.K, cfg.seed)
    streams = TrainStreams(cfg.seed, cfg.K)
    trainer = SSLTrainer(cfg, ensemble, policies, streams)

    history, audit, epoch_stats = [], [], []
    overall_best = (-1.0, 0, None)
    for t in range(1, cfg.n_iter + 1):
        if t > 1 and not cfg.warm_start:
            ensemble.restore(Ensemble.create(spec, cfg.K, cfg.seed).snapshot())
        trainer.reset_optimizers()
        source = BatchSource(pools.labeled)
        y = labels_of(pools.labeled)
        weights = class_weights(pools.class_counts())
        best = (-1.0, -1, None)
        try:
            for m in range(cfg.epochs):
                epoch_stats.append(trainer.train_epoch(source, y, weights, m, t))
                if not all(np.all(np.isfinite(z)) for z in ensemble.member_logits(val_X)):
                    raise TrainingDivergenceError(f"non-finite validation logits (iteration {t}, epoch {m})")
                score = evaluate(ensemble, val_X, val_y).ensemble.bacc
                if score > best[0]:
                    best = (score, m, ensemble.snapshot())
        except TrainingDivergenceError as exc:
            if diagnostic_path is not None:
                from .checkpoint import save_checkpoint

                save_checkpoint(ensemble, cfg, diagnostic_path, normalizer=normalizer,
                                iteration=t, epoch=len(epoch_stats), metrics={"status": "diverged"})
            raise TrainingDivergenceError(str(exc), checkpoint_path=diagnostic_path) from exc
        ensemble.restore(best[2])
        val_eval = evaluate(ensemble, val_X, val_y)
        entry = {
            "iteration": t,
            "best_epoch": best[1],
            "labeled": len(pools.labeled),
            "unlabeled": len(pools.unlabeled),
            "class_weights": weights.tolist(),
            "val": val_eval.to_dict(),
        }
        if test_X is not None:
            entry["test"] = evaluate(ensemble, test_X, test_y).to_dict()
        if best[0] > overall_best[0]:
            overall_best = (best[0], t, ensemble.snapshot())
        if stage2:
            records = trainer.pseudo_label(pools.unlabeled, cfg.tau, t)
            audit.append(audit_records(records, pools, t))
            pools = expand_dataset(pools, records)
        entry["labeled_after"] = len(pools.labeled)
        history.append(entry)
        log.info("iteration %d: val BAcc %.4f (epoch %d), |D_L|=%d |D_U|=%d", t, best[0], best[1],
                 len(pools.labeled), len(pools.unlabeled))
    ensemble.restore(overall_best[2])
    return SSLResult(ensemble, normalizer, policies, pools, history, audit, epoch_stats,
                     overall_best[1], overall_best[0])
