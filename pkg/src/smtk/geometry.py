"""Point clouds, neighbor search and voxel-grid pooling."""

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import tensor as T
from .errors import FormatError
from .tensor import ShapeError, Tensor


@dataclass
class PointCloud:
    """Positions (N x 3, meters), optional features (N x C) and labels (N,).

    When ``features`` is None the coordinates themselves serve as input
    features, so geometric augmentation needs to touch only ``positions``.
    """

    positions: np.ndarray
    features: np.ndarray = None
    labels: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ShapeError(f"positions must be N x 3, got {self.positions.shape}")
        n = self.positions.shape[0]
        if n < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite values")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != n:
                raise ShapeError(f"features must be {n} x C, got {self.features.shape}")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (n,):
                raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
            if labels.size and not np.issubdtype(labels.dtype, np.integer):
                if not np.all(labels == np.round(labels)):
                    raise ValueError("labels must be integers")
            labels = labels.astype(np.int64)
            if labels.size and labels.min() < 0:
                raise ValueError("labels must be non-negative")
            self.labels = labels

    def __len__(self):
        return self.positions.shape[0]

    @property
    def input_features(self):
        return self.positions if self.features is None else self.features

    def check_labels(self, n_classes):
        if self.labels is not None and self.labels.size and self.labels.max() >= n_classes:
            raise ValueError(f"label {self.labels.max()} outside [0, {n_classes})")


@dataclass
class NeighborIndex:
    """K neighbor indices per point, nearest first, self in column 0."""

    indices: np.ndarray

    @property
    def k(self):
        return self.indices.shape[1]

    def __len__(self):
        return self.indices.shape[0]


@dataclass
class PoolingMap:
    """Assignment of fine points to coarse voxel cells."""

    cell_of: np.ndarray
    m: int
    grid_size: float
    coarse_batch: np.ndarray = field(default=None, repr=False)

    @property
    def n(self):
        return self.cell_of.shape[0]

    def counts(self):
        return np.bincount(self.cell_of, minlength=self.m)


def _positions(cloud):
    return cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _segments(n, batch):
    if batch is None:
        return [(0, n)]
    batch = np.asarray(batch)
    if batch.shape != (n,):
        raise ShapeError(f"batch ids must have shape ({n},)")
    starts = np.flatnonzero(np.r_[True, batch[1:] != batch[:-1]])
    ends = np.r_[starts[1:], n]
    if len(np.unique(batch)) != len(starts):
        raise ValueError("batch ids must form contiguous blocks")
    return list(zip(starts.tolist(), ends.tolist()))


# ---------------------------------------------------------------------------
# k nearest neighbors


def _sqdist(a, b):
    d = a[:, None, :] - b[None, :, :]
    return (d * d).sum(axis=-1)


def _rank(d, cand, queries, k):
    # order by (distance, self first, index); cand is sorted ascending
    key = d.copy()
    key[cand[None, :] == queries[:, None]] = -1.0
    order = np.argsort(key, axis=1, kind="stable")[:, :k]
    return cand[order]


def _knn_brute(pos, k):
    n = pos.shape[0]
    idx = np.arange(n)
    return _rank(_sqdist(pos, pos), idx, idx, k)


def _knn_grid(pos, k, cell_size=None):
    n = pos.shape[0]
    lo = pos.min(axis=0)
    extent = float((pos.max(axis=0) - lo).max())
    if cell_size is None:
        cell_size = extent * (2.0 * k / n) ** (1.0 / 3.0) if extent > 0 else 1.0
    keys = np.floor((pos - lo) / cell_size).astype(np.int64)
    dims = keys.max(axis=0) + 1
    cells = {}
    for i, key in enumerate(map(tuple, keys)):
        cells.setdefault(key, []).append(i)
    cells = {key: np.asarray(v) for key, v in cells.items()}
    max_ring = int(dims.max())

    out = np.empty((n, k), dtype=np.int64)
    for key, members in cells.items():
        pending = members
        r = 1
        while len(pending):
            blocks = [
                cells[c]
                for off in product(range(-r, r + 1), repeat=3)
                if (c := (key[0] + off[0], key[1] + off[1], key[2] + off[2])) in cells
            ]
            cand = np.sort(np.concatenate(blocks))
            covers_all = r >= max_ring
            if len(cand) >= k:
                d = _sqdist(pos[pending], pos[cand])
                kth = np.partition(d, k - 1, axis=1)[:, k - 1]
                # anything outside the searched block is at least r cells away
                done = np.ones(len(pending), bool) if covers_all else kth < (r * cell_size) ** 2
                if done.any():
                    out[pending[done]] = _rank(d[done], cand, pending[done], k)
                pending = pending[~done]
            r += 1
    return out


def knn(cloud, k, method="auto", batch=None):
    """Exact k nearest neighbors, deterministic tie-breaking.

    Rows are sorted by squared distance, then index, except that each point
    is always its own first neighbor. ``method`` is ``"brute"``, ``"grid"``
    (uniform-grid acceleration, identical output) or ``"auto"``. With
    ``batch`` ids, search never crosses scene boundaries.
    """
    pos = _positions(cloud)
    n = pos.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    parts = []
    for start, end in _segments(n, batch):
        seg = pos[start:end]
        if k > len(seg):
            raise ValueError(f"k={k} exceeds the {len(seg)} available points")
        use_grid = method == "grid" or (method == "auto" and len(seg) > 1024)
        if method not in ("auto", "brute", "grid"):
            raise ValueError(f"unknown knn method {method!r}")
        found = _knn_grid(seg, k) if use_grid else _knn_brute(seg, k)
        parts.append(found + start)
    return NeighborIndex(np.concatenate(parts, axis=0))


def group(values, idx):
    """Gather neighbor rows: ``out[i, j] = values[idx[i, j]]``."""
    indices = idx.indices if isinstance(idx, NeighborIndex) else np.asarray(idx)
    values = values if isinstance(values, Tensor) else Tensor(values)
    if indices.ndim != 2:
        raise ShapeError("neighbor index must be N x K")
    return T.gather(values, indices)


def relative_positions(cloud, idx):
    """Offsets ``p[idx[i, j]] - p[i]`` as an N x K x 3 constant tensor."""
    pos = _positions(cloud)
    indices = idx.indices if isinstance(idx, NeighborIndex) else np.asarray(idx)
    if indices.size and (indices.min() < 0 or indices.max() >= pos.shape[0]):
        raise IndexError("neighbor index out of range")
    return Tensor(pos[indices] - pos[:, None, :])


# ---------------------------------------------------------------------------
# voxel pooling


def build_pooling_map(cloud, grid_size, batch=None):
    """Quantize positions to ``grid_size`` voxels; ids follow first appearance."""
    if not grid_size > 0:
        raise ValueError(f"grid_size must be positive, got {grid_size}")
    pos = _positions(cloud)
    keys = np.floor(pos / grid_size).astype(np.int64)
    if batch is not None:
        keys = np.concatenate([np.asarray(batch, dtype=np.int64)[:, None], keys], axis=1)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    cell_of = rank[inverse]
    coarse_batch = None
    if batch is not None:
        coarse_batch = np.asarray(batch)[np.sort(first)]
    return PoolingMap(cell_of=cell_of, m=len(first), grid_size=float(grid_size), coarse_batch=coarse_batch)


def grid_pool(features, positions, pmap):
    """Channel-wise max of member features and mean of member positions per cell."""
    pos = _positions(positions)
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.shape[0] != pmap.n or pos.shape[0] != pmap.n:
        raise ShapeError(f"pooling map covers {pmap.n} points, got {features.shape[0]} features")
    pooled = T.segment_max(features, pmap.cell_of, pmap.m)
    counts = pmap.counts()
    centers = np.stack(
        [np.bincount(pmap.cell_of, weights=pos[:, a], minlength=pmap.m) for a in range(3)], axis=1
    ) / counts[:, None]
    return pooled, centers


def grid_unpool(coarse, pmap):
    """Copy each cell's row back to all of its member points."""
    coarse = coarse if isinstance(coarse, Tensor) else Tensor(coarse)
    if coarse.shape[0] != pmap.m:
        raise ShapeError(f"pooling map has {pmap.m} cells, got {coarse.shape[0]} rows")
    return T.gather(coarse, pmap.cell_of)


# ---------------------------------------------------------------------------
# .xyzl files


def read_xyzl(path):
    """Parse ``x y z [label]`` lines; ``#`` starts a comment."""
    rows, labels = [], []
    labelled = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise FormatError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
            if labelled is None:
                labelled = len(parts) == 4
            elif labelled != (len(parts) == 4):
                raise FormatError(f"{path}:{lineno}: labels must be given on all lines or none")
            try:
                rows.append([float(v) for v in parts[:3]])
                if labelled:
                    labels.append(int(parts[3]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no points")
    try:
        return PointCloud(np.array(rows), labels=np.array(labels) if labelled else None)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_xyzl(path, cloud):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# x y z label\n")
        for i, p in enumerate(cloud.positions):
            line = " ".join(repr(float(v)) for v in p)
            if cloud.labels is not None:
                line += f" {int(cloud.labels[i])}"
            fh.write(line + "\n")
