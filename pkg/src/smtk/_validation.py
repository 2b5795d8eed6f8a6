"""Input checks shared by the estimator and the command line."""

import numpy as np

from .geometry import PointCloud


def check_cloud(X, n_features=None):
    """Coerce a PointCloud or an ``N x (3 + C)`` array into a PointCloud.

    Array columns are positions first; any extra columns become features.
    """
    if isinstance(X, PointCloud):
        cloud = X
    else:
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 3:
            raise ValueError(f"a cloud must be an N x 3 (or wider) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("cloud contains NaN or infinite values")
        cloud = PointCloud(arr[:, :3], features=arr[:, 3:] if arr.shape[1] > 3 else None)
    if n_features is not None and cloud.input_features.shape[1] != n_features:
        raise ValueError(f"cloud has {cloud.input_features.shape[1]} input channels, expected {n_features}")
    return cloud


def check_clouds(X, n_features=None):
    """Return ``(clouds, single)``; ``single`` marks a lone cloud input."""
    single = isinstance(X, PointCloud) or (isinstance(X, np.ndarray) and X.ndim == 2)
    items = [X] if single else list(X)
    if not items:
        raise ValueError("no clouds given")
    return [check_cloud(x, n_features) for x in items], single


def check_clouds_labels(X, y=None):
    """Clouds plus one integer label vector per cloud.

    ``y`` may be omitted when every cloud already carries labels.
    """
    clouds, single = check_clouds(X)
    if y is None:
        labels = [c.labels for c in clouds]
        if any(lab is None for lab in labels):
            raise ValueError("labels are required: pass y or labelled PointClouds")
    else:
        labels = [np.asarray(y)] if single else [np.asarray(v) for v in y]
        if len(labels) != len(clouds):
            raise ValueError(f"{len(clouds)} clouds but {len(labels)} label arrays")
    for i, (c, lab) in enumerate(zip(clouds, labels)):
        if lab.shape != (len(c),):
            raise ValueError(f"cloud {i} has {len(c)} points but labels of shape {lab.shape}")
    return clouds, labels, single
