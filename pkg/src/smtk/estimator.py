"""Scikit-learn style wrapper around network construction and training."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from ._validation import check_clouds, check_clouds_labels
from .geometry import PointCloud
from .network import NetworkConfig, build, forward
from .train import Metrics, TrainSchedule, train_loop


class SMTSegmenter(BaseEstimator):
    """Per-point semantic segmentation of point clouds.

    ``X`` is a list of clouds, each a :class:`PointCloud` or an ``N x 3``
    array (extra columns are used as input features). ``y`` is a matching
    list of per-point label arrays; arbitrary integer labels are encoded
    internally and decoded by :meth:`predict`.

    The defaults describe a small three-level network that trains in
    minutes on a CPU.
    """

    def __init__(self, channels=(16, 32, 64), counts=(1, 1, 1), grid_sizes=(0.25, 0.5), k=16,
                 mask="soft", tau=None, position_encoding="enhanced", multiplier=False,
                 upsample="saub", sharing="shared", epochs=10, lr=0.1, momentum=0.9,
                 weight_decay=1e-4, milestones=(), gamma=0.1, batch_size=8, random_state=0):
        self.channels = channels
        self.counts = counts
        self.grid_sizes = grid_sizes
        self.k = k
        self.mask = mask
        self.tau = tau
        self.position_encoding = position_encoding
        self.multiplier = multiplier
        self.upsample = upsample
        self.sharing = sharing
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.milestones = milestones
        self.gamma = gamma
        self.batch_size = batch_size
        self.random_state = random_state

    def _config(self, in_channels, n_classes):
        return NetworkConfig(
            in_channels=in_channels, channels=self.channels, counts=self.counts,
            grid_sizes=self.grid_sizes, k=self.k, n_classes=n_classes, mask=self.mask,
            tau=self.tau, position_encoding=self.position_encoding, multiplier=self.multiplier,
            upsample=self.upsample, sharing=self.sharing,
        )

    def fit(self, X, y=None):
        clouds, labels, _ = check_clouds_labels(X, y)
        widths = {c.input_features.shape[1] for c in clouds}
        if len(widths) != 1:
            raise ValueError(f"clouds disagree on input width: {sorted(widths)}")
        self.classes_ = np.unique(np.concatenate(labels))
        if len(self.classes_) < 2:
            raise ValueError("fit needs at least two distinct labels")
        self.n_features_in_ = widths.pop()
        data = [PointCloud(c.positions, c.features, np.searchsorted(self.classes_, lab))
                for c, lab in zip(clouds, labels)]
        seed = 0 if self.random_state is None else int(self.random_state)
        self.model_ = build(self._config(self.n_features_in_, len(self.classes_)), seed=seed)
        schedule = TrainSchedule(epochs=self.epochs, lr=self.lr, momentum=self.momentum,
                                 weight_decay=self.weight_decay, milestones=tuple(self.milestones),
                                 gamma=self.gamma, batch_size=self.batch_size, seed=seed)
        self.history_ = train_loop(self.model_, data, schedule)
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        clouds, single = check_clouds(X, self.n_features_in_)
        with T.no_grad():
            out = [forward(self.model_, c).data for c in clouds]
        return out, single

    def predict_proba(self, X):
        """Per-point class probabilities, columns ordered as ``classes_``."""
        logits, single = self._logits(X)
        probs = []
        for z in logits:
            e = np.exp(z - z.max(axis=1, keepdims=True))
            probs.append(e / e.sum(axis=1, keepdims=True))
        return probs[0] if single else probs

    def predict(self, X):
        logits, single = self._logits(X)
        preds = [self.classes_[z.argmax(axis=1)] for z in logits]
        return preds[0] if single else preds

    def score(self, X, y=None):
        """Overall point accuracy."""
        clouds, labels, single = check_clouds_labels(X, y)
        preds = self.predict(clouds)
        truth = np.concatenate(labels)
        return float(np.mean(np.concatenate(preds) == truth))

    def metrics(self, X, y=None):
        """Confusion-matrix metrics over labels known from ``fit``."""
        clouds, labels, _ = check_clouds_labels(X, y)
        preds = self.predict(clouds)
        truth = np.concatenate(labels)
        if not np.isin(truth, self.classes_).all():
            raise ValueError("labels unseen during fit")
        return Metrics.from_predictions(np.searchsorted(self.classes_, np.concatenate(preds)),
                                        np.searchsorted(self.classes_, truth), len(self.classes_))
