"""Parameter registry and the small layer set every block is built from."""

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class ParamRegistry:
    """Ordered table of named parameters plus a sharing table.

    Parameters are created through :meth:`create` so that names are unique and
    initialization is driven by one seeded generator. :meth:`share` returns the
    object previously registered under a sharing key, or builds it once.
    """

    def __init__(self, seed=0, dtype=None):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype or T.get_default_dtype()
        self.params = {}
        self.shared = {}

    def create(self, name, shape, init="glorot"):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        shape = tuple(int(s) for s in shape)
        if init == "glorot":
            fan_in, fan_out = shape[0], shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(data, requires_grad=True, name=name, dtype=self.dtype)
        self.params[name] = p
        return p

    def share(self, key, factory):
        if key not in self.shared:
            self.shared[key] = factory()
        return self.shared[key]

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def total(self):
        # shared tensors live under a single name, so this counts them once
        seen = {}
        for p in self.params.values():
            seen[id(p)] = p.size
        return int(np.sum(list(seen.values()), dtype=np.int64))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class Linear:
    def __init__(self, registry, name, in_features, out_features, bias=True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = registry.create(f"{name}.weight", (in_features, out_features))
        self.bias = registry.create(f"{name}.bias", (out_features,), init="zeros") if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Norm:
    """Per-channel standardization over every point with learnable scale/shift.

    Statistics always come from the current input; there are no running
    averages, so training and evaluation share one code path.
    """

    def __init__(self, registry, name, channels, eps=1e-5):
        self.channels = channels
        self.eps = eps
        self.scale = registry.create(f"{name}.scale", (channels,), init="ones")
        self.shift = registry.create(f"{name}.shift", (channels,), init="zeros")

    def __call__(self, x):
        return T.affine_standardize(x, self.scale, self.shift, self.eps)


class ReLU:
    def __call__(self, x):
        return T.relu(x)


def mlp(x, layers):
    """Apply ``layers`` in order after checking that linear widths chain."""
    width = x.shape[-1]
    for layer in layers:
        if isinstance(layer, Linear):
            if layer.in_features != width:
                raise ShapeError(f"mlp width mismatch: expected {layer.in_features}, got {width}")
            width = layer.out_features
        elif isinstance(layer, Norm) and layer.channels != width:
            raise ShapeError(f"norm over {layer.channels} channels applied to width {width}")
    for layer in layers:
        x = layer(x)
    return x


class MLP:
    """Stack of linear layers with Norm + ReLU between them.

    ``widths=[a, b, c]`` gives ``Linear(a,b) Norm ReLU Linear(b,c)``. With
    ``final_act`` the last linear is also followed by Norm + ReLU, which is the
    projection unit used around every attention block.
    """

    def __init__(self, registry, name, widths, final_act=False):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.layers = []
        last = len(widths) - 2
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.layers.append(Linear(registry, f"{name}.{i}", a, b))
            if i < last or final_act:
                self.layers.append(Norm(registry, f"{name}.{i}.norm", b))
                self.layers.append(ReLU())

    @property
    def out_features(self):
        return self.widths[-1]

    def __call__(self, x):
        return mlp(x, self.layers)
