"""U-Net segmentation network, configuration files and parameter accounting."""

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .blocks import GUB, SAUB, SMTB, MaskConfig, PositionEncoding
from .checkpoint import decode_text, encode_text, read_tensors, write_tensors
from .errors import FormatError
from .geometry import PointCloud, build_pooling_map, grid_pool, knn
from .layers import MLP, ParamRegistry
from .tensor import ShapeError, Tensor

CONFIG_KEY = "__config__"


@dataclass
class NetworkConfig:
    in_channels: int = 3
    channels: tuple = (32, 64, 128, 256, 512)
    counts: tuple = (1, 2, 2, 6, 2)
    grid_sizes: tuple = (0.08, 0.1, 0.2, 0.4)
    k: int = 16
    n_classes: int = 13
    mask: str = "soft"
    tau: float = None
    position_encoding: str = "enhanced"
    multiplier: bool = False
    upsample: str = "saub"
    sharing: str = "shared"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.counts = tuple(int(c) for c in self.counts)
        self.grid_sizes = tuple(float(g) for g in self.grid_sizes)
        self.validate()

    def validate(self):
        levels = len(self.channels)
        if levels < 1 or len(self.counts) != levels or len(self.grid_sizes) != levels - 1:
            raise ValueError(
                f"{levels} channel levels need {levels} block counts and {levels - 1} grid sizes, "
                f"got {len(self.counts)} and {len(self.grid_sizes)}"
            )
        positive = list(self.channels) + list(self.counts) + [self.in_channels, self.k]
        if min(positive) < 1 or (self.grid_sizes and min(self.grid_sizes) <= 0):
            raise ValueError("channels, counts, grid sizes, in_channels and k must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        MaskConfig(self.mask, self.tau)
        if self.position_encoding not in ("enhanced", "local"):
            raise ValueError(f"position_encoding must be enhanced or local, got {self.position_encoding!r}")
        if self.upsample not in ("saub", "gub"):
            raise ValueError(f"upsample must be saub or gub, got {self.upsample!r}")
        if self.sharing not in ("shared", "unshared"):
            raise ValueError(f"sharing must be shared or unshared, got {self.sharing!r}")

    @property
    def levels(self):
        return len(self.channels)

    def replace(self, **changes):
        data = asdict(self)
        data.update(changes)
        return NetworkConfig(**data)

    def to_dict(self):
        out = asdict(self)
        for key in ("channels", "counts", "grid_sizes"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_text(self):
        lines = ["# network configuration (key=value, lists comma-separated)"]
        for key, value in self.to_dict().items():
            if isinstance(value, list):
                value = ",".join(repr(v) for v in value)
            elif value is None:
                value = "none"
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, source="<config>"):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{source}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise FormatError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _parse_value(key, value)
            except ValueError as exc:
                raise FormatError(f"{source}:{lineno}: {exc}") from None
        try:
            return cls(**values)
        except ValueError as exc:
            raise FormatError(f"{source}: {exc}") from None

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), source=str(path))


# desk-scale network used by the toy task and the ablation runs
TOY_CONFIG = NetworkConfig(channels=(16, 32, 64), counts=(1, 1, 1), grid_sizes=(0.25, 0.5), n_classes=3)

# each case adds one component to the previous one
ABLATION_CASES = {
    "I": dict(position_encoding="local", mask="none", tau=None, upsample="gub", sharing="unshared"),
    "II": dict(position_encoding="local", mask="soft", tau=None, upsample="gub", sharing="unshared"),
    "III": dict(position_encoding="enhanced", mask="soft", tau=None, upsample="gub", sharing="unshared"),
    "IV": dict(position_encoding="enhanced", mask="soft", tau=None, upsample="saub", sharing="unshared"),
    "V": dict(position_encoding="enhanced", mask="soft", tau=None, upsample="saub", sharing="shared"),
}


def ablation_config(case, base=TOY_CONFIG):
    """``base`` with the component switches of ablation ``case`` (I to V)."""
    key = str(case).upper()
    if key not in ABLATION_CASES:
        raise ValueError(f"unknown ablation case {case!r}; expected one of {', '.join(ABLATION_CASES)}")
    return base.replace(multiplier=False, **ABLATION_CASES[key])


_LIST_KEYS = {"channels": int, "counts": int, "grid_sizes": float}
_INT_KEYS = {"in_channels", "k", "n_classes"}


def _parse_value(key, value):
    if key in _LIST_KEYS:
        return tuple(_LIST_KEYS[key](v) for v in value.split(",") if v.strip())
    if key in _INT_KEYS:
        return int(value)
    if key == "tau":
        return None if value.lower() == "none" else float(value)
    if key == "multiplier":
        if value.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"multiplier must be true or false, got {value!r}")
        return value.lower() in ("true", "1")
    return value


# ---------------------------------------------------------------------------
# input preparation


@dataclass
class Level:
    positions: np.ndarray
    batch: np.ndarray
    idx: object
    pool: object = None  # map from this level to the next coarser one


@dataclass
class Batch:
    """One or more clouds concatenated, with their multi-resolution geometry."""

    features: np.ndarray
    labels: np.ndarray
    levels: list
    sizes: list = field(default_factory=list)

    @property
    def n(self):
        return self.features.shape[0]


def _segment_min(batch, n):
    if batch is None:
        return n
    return int(np.bincount(batch).min())


def build_levels(positions, grid_sizes, k, batch=None):
    """Neighbor indices and pooling maps for every resolution level."""
    levels = []
    pos = positions
    for depth in range(len(grid_sizes) + 1):
        k_eff = min(k, _segment_min(batch, pos.shape[0]))
        level = Level(positions=pos, batch=batch, idx=knn(pos, k_eff, batch=batch))
        levels.append(level)
        if depth < len(grid_sizes):
            level.pool = build_pooling_map(pos, grid_sizes[depth], batch=batch)
            with T.no_grad():
                _, pos = grid_pool(Tensor(np.zeros((pos.shape[0], 1))), pos, level.pool)
            batch = level.pool.coarse_batch
    return levels


def collate(clouds, config):
    """Concatenate clouds into a :class:`Batch` for ``config``."""
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    feats = [c.input_features for c in clouds]
    for f in feats:
        if f.shape[1] != config.in_channels:
            raise ShapeError(f"cloud has {f.shape[1]} feature channels, network expects {config.in_channels}")
    positions = np.concatenate([c.positions for c in clouds])
    sizes = [len(c) for c in clouds]
    batch = np.repeat(np.arange(len(clouds)), sizes) if len(clouds) > 1 else None
    labels = None
    if all(c.labels is not None for c in clouds):
        labels = np.concatenate([c.labels for c in clouds])
    levels = build_levels(positions, config.grid_sizes, config.k, batch=batch)
    return Batch(features=np.concatenate(feats), labels=labels, levels=levels, sizes=sizes)


# ---------------------------------------------------------------------------
# model


class SMTNet:
    """Encoder-decoder over voxel-pooled resolutions with attention blocks."""

    def __init__(self, config, seed=0):
        self.config = config
        self.seed = seed
        self.registry = reg = ParamRegistry(seed)
        ch = config.channels
        mask = MaskConfig(config.mask, config.tau)
        block_kw = dict(mask=mask, n_classes=config.n_classes, multiplier=config.multiplier)

        self.stem = MLP(reg, "stem", [config.in_channels, ch[0]], final_act=True)
        self.encoders = []
        for lvl in range(config.levels):
            blocks = []
            for b in range(config.counts[lvl]):
                name = f"enc{lvl}.block{b}"
                cin = ch[lvl - 1] if lvl > 0 and b == 0 else ch[lvl]
                blocks.append(SMTB(reg, name, cin, ch[lvl], ch[lvl], self._pe(lvl, name), **block_kw))
            self.encoders.append(blocks)

        self.decoders = []
        for lvl in range(config.levels - 2, -1, -1):
            if config.upsample == "saub":
                up = SAUB(reg, f"dec{lvl}.up", ch[lvl + 1], ch[lvl + 1], ch[lvl], self._pe(lvl, f"dec{lvl}.up"))
            else:
                up = GUB(reg, f"dec{lvl}.up", ch[lvl + 1], ch[lvl + 1], ch[lvl])
            name = f"dec{lvl}.block0"
            block = SMTB(reg, name, ch[lvl], ch[lvl], ch[lvl], self._pe(lvl, name), **block_kw)
            self.decoders.append((lvl, up, block))
        self.head = MLP(reg, "head", [ch[0], ch[0], config.n_classes])

    def _pe(self, level, owner):
        c = self.config.channels[level]
        kind = self.config.position_encoding
        reg = self.registry
        if self.config.sharing == "shared":
            key = f"level{level}"
            return reg.share(key, lambda: PositionEncoding(reg, f"{key}.pe", c, kind, sharing_key=key))
        return PositionEncoding(reg, f"{owner}.pe", c, kind)

    def parameters(self):
        return self.registry.parameters()

    def named_parameters(self):
        return self.registry.named_parameters()

    def zero_grad(self):
        self.registry.zero_grad()

    def prepare(self, clouds):
        return collate(clouds, self.config)

    def __call__(self, data):
        return forward(self, data)


def build(config=None, seed=0):
    config = config or NetworkConfig()
    config.validate()
    return SMTNet(config, seed=seed)


def forward(model, data):
    """Per-point logits (N x n_classes) for a cloud, list of clouds or Batch."""
    batch = data if isinstance(data, Batch) else model.prepare(data)
    levels = batch.levels
    f = model.stem(Tensor(batch.features))
    skips = []
    for lvl, blocks in enumerate(model.encoders):
        level = levels[lvl]
        if lvl > 0:
            prev = levels[lvl - 1]
            f, _ = grid_pool(f, prev.positions, prev.pool)
        for block in blocks:
            f = block(f, level.positions, level.idx)
        skips.append(f)
    for lvl, up, block in model.decoders:
        level = levels[lvl]
        f = up(f, skips[lvl + 1], skips[lvl], level.pool, level.positions, level.idx)
        f = block(f, level.positions, level.idx)
    return model.head(f)


# ---------------------------------------------------------------------------
# accounting and persistence


def _is_position_encoding(name):
    parts = name.split(".")
    return "pe" in parts[:-1] or parts[0].startswith("level")


def count_parameters(model):
    """Distinct-tensor parameter counts: total, position encoding, per module."""
    seen = set()
    total = pe = 0
    by_module = {}
    for name, p in model.named_parameters():
        if id(p) in seen:
            continue
        seen.add(id(p))
        total += p.size
        if _is_position_encoding(name):
            pe += p.size
        module = name.split(".", 1)[0]
        by_module[module] = by_module.get(module, 0) + p.size
    return {"total": total, "position_encoding": pe, "by_module": by_module}


def save(model, path):
    tensors = {CONFIG_KEY: encode_text(json.dumps({"config": model.config.to_dict(), "seed": model.seed}))}
    for name, p in model.named_parameters():
        tensors[name] = p.data
    write_tensors(path, tensors)


def load(path):
    tensors = read_tensors(path)
    if CONFIG_KEY not in tensors:
        raise FormatError(f"{path}: checkpoint carries no network configuration")
    try:
        meta = json.loads(decode_text(tensors.pop(CONFIG_KEY)))
        config = NetworkConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad network configuration: {exc}") from None
    model = SMTNet(config, seed=meta.get("seed", 0))
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))[:3]
        extra = sorted(set(tensors) - set(params))[:3]
        raise FormatError(f"{path}: parameter names do not match config (missing {missing}, extra {extra})")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise FormatError(f"{path}: {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.data = tensors[name].astype(p.dtype)
    return model
