"""Triplet-loss training, prototype enrollment and distance-threshold pseudo-labelling."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import SGD, ParamVector, ShapeError, Tape, Tensor, relu, sq_dist, tsum
from .model import EmbeddingModel, embed, forward


class TripletSamplingError(ValueError):
    pass


class CalibrationError(ValueError):
    def __init__(self, gamma_plus: float, gamma_minus: float):
        self.gamma_plus = gamma_plus
        self.gamma_minus = gamma_minus
        why = "is negative" if gamma_plus < 0 else f">= gamma_minus={gamma_minus:.6g}"
        super().__init__(f"calibration produced gamma_plus={gamma_plus:.6g}, which {why}")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- data types

@dataclass
class LabeledDataset:
    features: np.ndarray     # (N, C, H, W)
    labels: np.ndarray       # (N,) class ids in 1..K
    speakers: np.ndarray     # (N,)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.speakers = np.asarray(self.speakers, dtype=np.int64)
        if not len(self.features) == len(self.labels) == len(self.speakers):
            raise ValueError("features, labels and speakers must have equal length")

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def validate(self) -> "LabeledDataset":
        counts = dict(zip(*np.unique(self.labels, return_counts=True)))
        short = [int(k) for k, n in counts.items() if n < 2]
        if short:
            raise TripletSamplingError(f"classes {short} have fewer than 2 samples")
        if len(counts) < 2:
            raise TripletSamplingError("at least two classes are needed to form triplets")
        return self


@dataclass
class EnrollmentSet:
    positives: np.ndarray    # (M, C, H, W)

    def __post_init__(self):
        self.positives = np.asarray(self.positives)
        if self.positives.ndim == 3:
            self.positives = self.positives[None]
        if len(self.positives) < 1:
            raise ValueError("enrollment set is empty")

    def __len__(self):
        return len(self.positives)


@dataclass
class Prototype:
    vector: np.ndarray
    source_model_hash: str = ""


@dataclass(frozen=True)
class Thresholds:
    gamma_plus: float
    gamma_minus: float

    def __post_init__(self):
        if not (0 <= self.gamma_plus < self.gamma_minus):
            raise CalibrationError(self.gamma_plus, self.gamma_minus)


POSITIVE, NEGATIVE = 1, 0


@dataclass
class PseudoLabeledSet:
    features: np.ndarray
    labels: np.ndarray        # 1 = positive, 0 = negative
    distances: np.ndarray
    discarded_count: int = 0
    thresholds: Thresholds | None = None
    source_index: np.ndarray = field(default=None)   # position of each entry in the stream

    def __len__(self):
        return len(self.labels)

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.labels == POSITIVE))

    @property
    def n_negative(self) -> int:
        return int(np.sum(self.labels == NEGATIVE))

    def check(self, th: Thresholds | None = None) -> bool:
        th = th or self.thresholds
        pos = self.labels == POSITIVE
        return bool(np.all(self.distances[pos] <= th.gamma_plus)
                    and np.all(self.distances[~pos] >= th.gamma_minus))

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    alpha: float = 0.5
    momentum: float = 0.9
    seed: int = 0


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    samples: int = 0


# ---------------------------------------------------------------- loss

def triplet_loss(z_p1, z_p2, z_n, alpha: float):
    """max(||z_p1 - z_p2||^2 - ||z_p1 - z_n||^2 + alpha, 0), row-wise for 2-D inputs.

    Accepts Tensors (differentiable) or arrays (returns floats / arrays).
    """
    if alpha <= 0:
        raise ValueError("margin alpha must be positive")
    tensors = any(isinstance(z, Tensor) for z in (z_p1, z_p2, z_n))
    shapes = [np.shape(z.data if isinstance(z, Tensor) else z) for z in (z_p1, z_p2, z_n)]
    if len(set(shapes)) != 1:
        raise ShapeError("triplet_loss", *shapes)
    if tensors:
        return relu(sq_dist(z_p1, z_p2) - sq_dist(z_p1, z_n) + alpha)
    a, p, n = (np.asarray(z, dtype=float) for z in (z_p1, z_p2, z_n))
    out = np.maximum(((a - p) ** 2).sum(-1) - ((a - n) ** 2).sum(-1) + alpha, 0.0)
    return float(out) if out.ndim == 0 else out


def batch_triplet_loss(z: Tensor, n_triplets: int, alpha: float) -> Tensor:
    """Mean triplet loss of embeddings stacked as [anchors; positives; negatives]."""
    b = n_triplets
    return tsum(triplet_loss(z[0:b], z[b:2 * b], z[2 * b:3 * b], alpha)) * (1.0 / b)


# ---------------------------------------------------------------- sampling

def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_triplets(ds, batch_size: int, rng_seed) -> np.ndarray:
    """Index triplets (p1, p2, n) with label(p1) == label(p2) != label(n).

    For a LabeledDataset the positive class is uniform over classes with at
    least two samples and the negative class uniform over the remaining ones.
    For a PseudoLabeledSet positives and negatives are drawn uniformly with
    replacement (p1 != p2 when possible).
    """
    rng = _rng(rng_seed)
    labels = np.asarray(ds.labels)
    out = np.empty((batch_size, 3), dtype=np.int64)
    if isinstance(ds, PseudoLabeledSet):
        pos = np.flatnonzero(labels == POSITIVE)
        neg = np.flatnonzero(labels == NEGATIVE)
        if len(pos) < 2:
            raise TripletSamplingError(f"class 'positive' has {len(pos)} samples; 2 are needed")
        if len(neg) < 1:
            raise TripletSamplingError("class 'negative' has no samples")
        for t in range(batch_size):
            i, j = rng.choice(len(pos), size=2, replace=False)
            out[t] = pos[i], pos[j], neg[rng.integers(len(neg))]
        return out
    by_class = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
    anchors = [c for c, idx in by_class.items() if len(idx) >= 2]
    if not anchors:
        raise TripletSamplingError("no class has the 2 samples needed for a positive pair")
    if len(by_class) < 2:
        only = next(iter(by_class))
        raise TripletSamplingError(f"class {only} has no other class to draw negatives from")
    classes = sorted(by_class)
    for t in range(batch_size):
        cp = anchors[rng.integers(len(anchors))]
        others = [c for c in classes if c != cp]
        cn = others[rng.integers(len(others))]
        i, j = rng.choice(by_class[cp], size=2, replace=False)
        out[t] = i, j, by_class[cn][rng.integers(len(by_class[cn]))]
    return out


def triplet_batch(features: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Stack [anchors; positives; negatives] along the batch axis."""
    return features[np.concatenate([idx[:, 0], idx[:, 1], idx[:, 2]])]


# ---------------------------------------------------------------- training

def _train(model: EmbeddingModel, features: np.ndarray, ds, cfg: TrainConfig,
           seed_tag: str, bn_momentum: float = 0.1) -> tuple[EmbeddingModel, TrainLog]:
    model = model.copy()
    log = TrainLog()
    if cfg.epochs <= 0:
        return model, log
    rng = np.random.default_rng([cfg.seed, _tag(seed_tag)])
    opt = SGD(cfg.lr, cfg.momentum)
    dtype = model.params.values.dtype
    steps_per_epoch = max(1, math.ceil(len(ds) / (3 * cfg.batch_size)))
    for epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            idx = sample_triplets(ds, cfg.batch_size, rng)
            x = triplet_batch(features, idx).astype(dtype, copy=False)
            stats: dict = {}
            with Tape() as tape:
                theta = tape.watch(model.params.values)
                loss = batch_triplet_loss(forward(model, theta, x, train=True, stats_out=stats),
                                          cfg.batch_size, cfg.alpha)
                (g,) = tape.gradient(loss, [theta])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            try:
                opt.step(model.params, ParamVector(g.data, model.params.layout))
            except FloatingPointError as e:
                raise TrainingError(f"epoch {epoch}: {e}") from None
            for i, (m, v) in stats.items():
                rm, rv = model.bn_stats[i]
                model.bn_stats[i] = ((1 - bn_momentum) * rm + bn_momentum * m,
                                     (1 - bn_momentum) * rv + bn_momentum * v)
            log.losses.append(value)
            log.steps += 1
            log.samples += len(x)
    return model, log


def _tag(s: str) -> int:
    return int.from_bytes(hashlib.sha256(s.encode()).digest()[:4], "little")


def pretrain(model: EmbeddingModel, ds: LabeledDataset, cfg: TrainConfig) -> tuple[EmbeddingModel, TrainLog]:
    """B1: triplet-loss training on the labelled multi-class set."""
    ds.validate()
    return _train(model, ds.features, ds, cfg, "pretrain")


def finetune(model: EmbeddingModel, dft: PseudoLabeledSet, cfg: TrainConfig,
             tag: str = "finetune") -> tuple[EmbeddingModel, TrainLog]:
    """B3: triplet-loss fine-tuning on pseudo-labelled positives and negatives.

    A zero-epoch budget is a no-op and accepts any set.
    """
    if cfg.epochs > 0 and (dft.n_positive < 2 or dft.n_negative < 1):
        raise TripletSamplingError(
            f"fine-tuning needs >= 2 positives and >= 1 negative, got {dft.n_positive}/{dft.n_negative}")
    return _train(model, dft.features, dft, cfg, tag)


# ---------------------------------------------------------------- enrollment

def compute_prototype(model: EmbeddingModel, enrollment: EnrollmentSet) -> Prototype:
    z = embed(model, enrollment.positives)
    return Prototype(z.mean(axis=0), model.digest())


def distances(model: EmbeddingModel, proto: Prototype, x: np.ndarray) -> np.ndarray:
    z = embed(model, x)
    return np.sqrt(((z - proto.vector) ** 2).sum(axis=-1))


def nearest_rank_percentile(values, pct: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if len(v) == 0:
        raise ValueError("percentile of an empty set")
    rank = max(1, math.ceil(pct / 100.0 * len(v)))
    return float(v[min(rank, len(v)) - 1])


def thresholds_from_distances(enroll_d, negative_d, k_plus: float = 1.0,
                              neg_percentile: float = 5.0) -> Thresholds:
    enroll_d = np.asarray(enroll_d, dtype=float)
    gp = float(enroll_d.mean() + k_plus * enroll_d.std())
    gm = nearest_rank_percentile(negative_d, neg_percentile)
    return Thresholds(gp, gm)


def calibrate_thresholds(model: EmbeddingModel, proto: Prototype, enrollment: EnrollmentSet,
                         calib_negatives: np.ndarray, k_plus: float = 1.0,
                         neg_percentile: float = 5.0) -> Thresholds:
    """gamma+ = mean + k_plus * std of enrollment distances; gamma- = nearest-rank percentile of negatives."""
    if len(calib_negatives) < 1:
        raise ValueError("at least one calibration negative is required")
    return thresholds_from_distances(distances(model, proto, enrollment.positives),
                                     distances(model, proto, np.asarray(calib_negatives)),
                                     k_plus, neg_percentile)


def partition(d: np.ndarray, th: Thresholds) -> np.ndarray:
    """1 positive, 0 negative, -1 discarded."""
    d = np.asarray(d)
    out = np.full(d.shape, -1, dtype=np.int64)
    out[d <= th.gamma_plus] = POSITIVE
    out[d >= th.gamma_minus] = NEGATIVE
    return out


def pseudo_label(model: EmbeddingModel, proto: Prototype, th: Thresholds, stream) -> PseudoLabeledSet:
    stream = np.asarray(stream)
    if len(stream) == 0:
        return PseudoLabeledSet(stream, np.zeros(0, np.int64), np.zeros(0), 0, th, np.zeros(0, np.int64))
    d = distances(model, proto, stream)
    part = partition(d, th)
    keep = np.flatnonzero(part >= 0)
    return PseudoLabeledSet(stream[keep], part[keep], d[keep], int(len(d) - len(keep)), th, keep)
