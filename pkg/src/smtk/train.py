"""Synthetic scenes, loss, optimizer, metrics and the training loop."""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericalError
from .geometry import NeighborIndex, PointCloud, PoolingMap
from .network import Batch, Level, build, forward, save

logger = logging.getLogger(__name__)

PRIMITIVE_LABELS = {"plane": 0, "sphere": 1, "box": 2}
CLASS_NAMES = ("plane", "sphere", "box")


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSceneSpec:
    primitives: tuple = ("plane", "sphere", "box")
    points: int = 256
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.primitives = tuple(self.primitives)
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")
        unknown = set(self.primitives) - set(PRIMITIVE_LABELS)
        if unknown:
            raise ValueError(f"unknown primitives {sorted(unknown)}")
        if self.points < 64:
            raise ValueError("a scene needs at least 64 points")
        if self.points < len(self.primitives):
            raise ValueError("fewer points than primitives")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def _sample_plane(rng, n):
    xy = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.column_stack([xy, np.zeros(n)])


def _sample_sphere(rng, n, center, radius):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _sample_box(rng, n, center, size):
    # five faces (no bottom), chosen in proportion to their area
    sx, sy, sz = size
    areas = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3))
    pts = u * size
    pts[face == 0, 2] = sz / 2
    pts[face == 1, 1] = -sy / 2
    pts[face == 2, 1] = sy / 2
    pts[face == 3, 0] = -sx / 2
    pts[face == 4, 0] = sx / 2
    return center + pts


def generate_scene(spec):
    """Sample a labelled cloud: floor planes, resting spheres and boxes."""
    rng = np.random.default_rng(spec.seed)
    k = len(spec.primitives)
    shares = np.full(k, spec.points // k)
    shares[: spec.points % k] += 1
    placed = []  # (xy center, footprint radius) of objects on the floor
    parts, labels = [], []
    for prim, n in zip(spec.primitives, shares):
        if prim == "plane":
            pts = _sample_plane(rng, n)
        else:
            if prim == "sphere":
                radius = rng.uniform(0.25, 0.4)
                footprint = radius
            else:
                size = rng.uniform(0.3, 0.6, size=3)
                footprint = 0.5 * np.hypot(size[0], size[1])
            for _ in range(100):
                xy = rng.uniform(-0.65, 0.65, size=2)
                if all(np.hypot(*(xy - c)) > footprint + r + 0.1 for c, r in placed):
                    break
            placed.append((xy, footprint))
            if prim == "sphere":
                pts = _sample_sphere(rng, n, np.array([xy[0], xy[1], radius]), radius)
            else:
                pts = _sample_box(rng, n, np.array([xy[0], xy[1], size[2] / 2]), size)
        parts.append(pts)
        labels.append(np.full(n, PRIMITIVE_LABELS[prim]))
    pos = np.concatenate(parts)
    lab = np.concatenate(labels)
    if spec.noise > 0:
        pos = pos + rng.normal(0.0, spec.noise, size=pos.shape)
    order = rng.permutation(len(pos))
    return PointCloud(pos[order], labels=lab[order])


def make_dataset(n_scenes, points=256, seed=0, noise=0.0, primitives=("plane", "sphere", "box")):
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes)
    return [generate_scene(SyntheticSceneSpec(primitives, points, noise, int(s))) for s in seeds]


def augment(cloud, scale=(1.0, 1.0), flip_axes=(), flip_prob=0.5, jitter=0.0, seed=0):
    """Random isotropic scaling, axis flips and Gaussian jitter of positions."""
    lo, hi = scale
    if not 0 < lo <= hi:
        raise ValueError(f"invalid scale range {scale}")
    if not 0 <= flip_prob <= 1 or jitter < 0:
        raise ValueError("flip_prob must be in [0, 1] and jitter non-negative")
    axes = {"x": 0, "y": 1, "z": 2}
    rng = np.random.default_rng(seed)
    pos = cloud.positions * rng.uniform(lo, hi)
    for axis in flip_axes:
        if rng.uniform() < flip_prob:
            pos[:, axes.get(axis, axis)] *= -1.0
    if jitter > 0:
        pos = pos + rng.normal(0.0, jitter, size=pos.shape)
    return PointCloud(pos, features=cloud.features, labels=cloud.labels)


# ---------------------------------------------------------------------------
# loss and optimizer


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of the true class per point."""
    labels = np.asarray(labels)
    n, t = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= t:
        raise ValueError(f"labels must lie in [0, {t})")
    logp = T.log_softmax(logits, axis=-1)
    return T.mul(T.sum(logp[np.arange(n), labels]), -1.0 / n)


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """In-place momentum SGD; returns the per-parameter velocity buffers."""
    if velocity is None:
        velocity = [None] * len(params)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        d = g + weight_decay * p.data if weight_decay else g
        if momentum:
            velocity[i] = d.copy() if velocity[i] is None else momentum * velocity[i] + d
            d = velocity[i]
        p.data = p.data - lr * d
    return velocity


class SGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [None] * len(self.params)

    def step(self):
        grads = [p.grad for p in self.params]
        sgd_step(self.params, grads, self.lr, self.momentum, self.weight_decay, self.velocity)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def multistep_lr(base_lr, epoch, milestones=(), gamma=0.1):
    """Learning rate for a 0-based ``epoch`` under step decay at ``milestones``."""
    return base_lr * gamma ** sum(epoch >= m for m in milestones)


def cosine_lr(base_lr, epoch, epochs, min_lr=0.0):
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * epoch / epochs))


# ---------------------------------------------------------------------------
# metrics


class Metrics:
    """Confusion matrix (rows = truth, columns = prediction) and derived scores."""

    def __init__(self, n_classes=None, confusion=None):
        if confusion is None:
            confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
        self.confusion = np.asarray(confusion)
        if self.confusion.ndim != 2 or self.confusion.shape[0] != self.confusion.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (self.confusion < 0).any():
            raise ValueError("confusion entries must be non-negative")

    @property
    def n_classes(self):
        return self.confusion.shape[0]

    def update(self, pred, labels):
        t = self.n_classes
        self.confusion += np.bincount(np.asarray(labels) * t + np.asarray(pred), minlength=t * t).reshape(t, t)
        return self

    @classmethod
    def from_predictions(cls, pred, labels, n_classes):
        return cls(n_classes).update(pred, labels)

    def iou(self):
        """Per-class IoU; NaN for classes absent from both truth and prediction."""
        tp = np.diag(self.confusion).astype(float)
        denom = self.confusion.sum(axis=0) + self.confusion.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    def class_accuracy(self):
        tp = np.diag(self.confusion).astype(float)
        support = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, tp / support, np.nan)

    @property
    def miou(self):
        iou = self.iou()
        return float(np.nanmean(iou)) if np.isfinite(iou).any() else 0.0

    @property
    def macc(self):
        acc = self.class_accuracy()
        return float(np.nanmean(acc)) if np.isfinite(acc).any() else 0.0

    @property
    def oa(self):
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    def summary(self):
        return {"mIoU": self.miou, "mAcc": self.macc, "OA": self.oa}


# ---------------------------------------------------------------------------
# loops


def batches(model, dataset, batch_size, order=None):
    order = np.arange(len(dataset)) if order is None else order
    for start in range(0, len(order), batch_size):
        yield model.prepare([dataset[i] for i in order[start:start + batch_size]])


def predict(model, data):
    with T.no_grad():
        logits = forward(model, data)
    return logits.data.argmax(axis=1)


def evaluate(model, dataset, batch_size=8):
    """Confusion-matrix metrics over every labelled point of ``dataset``.

    ``dataset`` holds clouds or already prepared batches.
    """
    metrics = Metrics(model.config.n_classes)
    if dataset and isinstance(dataset[0], Batch):
        prepared = dataset
    else:
        prepared = batches(model, dataset, batch_size)
    for batch in prepared:
        if batch.labels is None:
            raise ValueError("evaluation needs labelled clouds")
        metrics.update(predict(model, batch), batch.labels)
    return metrics


@dataclass
class TrainSchedule:
    epochs: int = 60
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple = (40, 50)
    gamma: float = 0.1
    cosine: bool = False
    batch_size: int = 8
    seed: int = 0
    augment: dict = field(default_factory=dict)

    def lr_at(self, epoch):
        if self.cosine:
            return cosine_lr(self.lr, epoch, self.epochs)
        return multistep_lr(self.lr, epoch, self.milestones, self.gamma)


def train_loop(model, dataset, schedule, eval_set=None, log_path=None, checkpoint_path=None):
    """Train with momentum SGD; returns one record per epoch.

    Each record carries ``epoch, loss, mIoU, mAcc, OA, lr``; metrics come from
    ``eval_set`` (or the training clouds). With ``checkpoint_path`` the
    best-mIoU model is saved there. A non-finite loss raises NumericalError.
    """
    rng = np.random.default_rng(schedule.seed)
    opt = SGD(model.parameters(), schedule.lr, schedule.momentum, schedule.weight_decay)
    eval_prepared = list(batches(model, eval_set if eval_set is not None else dataset, schedule.batch_size))
    static = None if schedule.augment else list(batches(model, dataset, 1))
    log = []
    best = -1.0
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(schedule.epochs):
            opt.lr = schedule.lr_at(epoch)
            order = rng.permutation(len(dataset))
            total, count = 0.0, 0
            for start in range(0, len(order), schedule.batch_size):
                ids = order[start:start + schedule.batch_size]
                clouds = [dataset[i] for i in ids]
                if schedule.augment:
                    seeds = rng.integers(0, 2**31, size=len(clouds))
                    clouds = [augment(c, seed=int(s), **schedule.augment) for c, s in zip(clouds, seeds)]
                    batch = model.prepare(clouds)
                else:
                    batch = _merge([static[i] for i in ids])
                model.zero_grad()
                loss = cross_entropy(forward(model, batch), batch.labels)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, step {start // schedule.batch_size}")
                T.backward(loss)
                opt.step()
                total += value * len(ids)
                count += len(ids)
            metrics = evaluate(model, eval_prepared)
            record = {"epoch": epoch, "loss": total / count, **metrics.summary(), "lr": opt.lr}
            log.append(record)
            logger.info("epoch %d loss %.4f mIoU %.4f OA %.4f", epoch, record["loss"], record["mIoU"], record["OA"])
            if fh:
                fh.write(json.dumps(record) + "\n")
                fh.flush()
            if checkpoint_path and record["mIoU"] > best:
                best = record["mIoU"]
                save(model, checkpoint_path)
    finally:
        if fh:
            fh.close()
    return log


def toy_experiment(config, seed=0, epochs=8, lr=0.1, milestones=(6,), n_train=200, n_test=50,
                   points=256, data_seed=0, log_path=None, checkpoint_path=None):
    """Train ``config`` on plane/sphere/box scenes and score the held-out set.

    The scenes depend only on ``data_seed``; ``seed`` drives initialization
    and batch order. Returns ``(model, log, metrics)``.
    """
    train_set = make_dataset(n_train, points=points, seed=data_seed)
    test_set = make_dataset(n_test, points=points, seed=data_seed + 1)
    model = build(config, seed=seed)
    schedule = TrainSchedule(epochs=epochs, lr=lr, milestones=tuple(milestones), seed=seed)
    log = train_loop(model, train_set, schedule, eval_set=test_set, log_path=log_path,
                     checkpoint_path=checkpoint_path)
    return model, log, evaluate(model, test_set)


def _merge(prepared):
    """Concatenate single-cloud batches, offsetting indices and cell ids."""
    if len(prepared) == 1:
        return prepared[0]
    depth = len(prepared[0].levels)
    levels = []
    for d in range(depth):
        parts = [b.levels[d] for b in prepared]
        k = min(p.idx.k for p in parts)
        offsets = np.cumsum([0] + [len(p.positions) for p in parts[:-1]])
        idx = np.concatenate([p.idx.indices[:, :k] + o for p, o in zip(parts, offsets)])
        batch = np.concatenate([np.full(len(p.positions), i) for i, p in enumerate(parts)])
        pool = None
        if parts[0].pool is not None:
            cell_offsets = np.cumsum([0] + [p.pool.m for p in parts[:-1]])
            pool = PoolingMap(
                cell_of=np.concatenate([p.pool.cell_of + o for p, o in zip(parts, cell_offsets)]),
                m=int(sum(p.pool.m for p in parts)),
                grid_size=parts[0].pool.grid_size,
                coarse_batch=np.concatenate([np.full(p.pool.m, i) for i, p in enumerate(parts)]),
            )
        levels.append(Level(positions=np.concatenate([p.positions for p in parts]), batch=batch,
                            idx=NeighborIndex(idx), pool=pool))
    return Batch(
        features=np.concatenate([b.features for b in prepared]),
        labels=np.concatenate([b.labels for b in prepared]),
        levels=levels,
        sizes=[n for b in prepared for n in b.sizes],
    )


def save_metrics_csv(path, rows):
    """Write a list of dicts sharing one key set as CSV."""
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def schedule_dict(schedule):
    return asdict(schedule)
