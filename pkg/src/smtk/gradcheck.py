"""Central finite-difference gradient checks and the named suites the CLI runs."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

EPS = 1e-6
RTOL = 1e-4
ATOL = 1e-7


@dataclass
class GradcheckReport:
    name: str
    checked: int = 0
    max_rel_error: float = 0.0
    refined: int = 0
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return self.checked > 0 and not self.failures

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.checked} entries, max rel err {self.max_rel_error:.2e}, "
                f"{len(self.failures)} failures, {self.refined} kink rechecks")


def check_gradients(loss_fn, params, name="gradcheck", eps=EPS, rtol=RTOL, atol=ATOL,
                    fraction=None, max_per_param=None, rng=None):
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    An entry passes when ``|analytic - numeric| <= rtol * max(|analytic|,
    |numeric|) + atol``. ``fraction`` or ``max_per_param`` subsample entries.

    A failing entry whose forward and backward one-sided differences disagree
    sits within ``eps`` of a non-differentiable point (ReLU, max). It is
    re-measured with steps shrinking by 10x down to ``eps * 1e-2`` under the
    same tolerance; the number of such entries is reported as ``refined``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    T.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradcheckReport(name)
    with T.no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            entries = np.arange(flat.size)
            count = flat.size
            if fraction is not None:
                count = max(1, int(round(fraction * flat.size)))
            if max_per_param is not None:
                count = min(count, max_per_param)
            if count < flat.size:
                entries = np.sort(rng.choice(flat.size, size=count, replace=False))
            for e in entries:
                ana = a.reshape(-1)[e]
                up, down = _evaluate(loss_fn, flat, e, eps)
                num = (up - down) / (2 * eps)
                ok = _close(ana, num, rtol, atol)
                base = loss_fn().item() if not ok else None
                if not ok and not _close((up - base) / eps, (base - down) / eps, rtol, atol):
                    report.refined += 1
                    step = eps
                    while not ok and step > eps * 1e-2:
                        step /= 10
                        up, down = _evaluate(loss_fn, flat, e, step)
                        num = (up - down) / (2 * step)
                        ok = _close(ana, num, rtol, atol)
                err = abs(ana - num)
                scale = max(abs(ana), abs(num))
                if scale * rtol >= atol:  # below this the absolute tolerance governs
                    report.max_rel_error = max(report.max_rel_error, err / scale)
                if not ok:
                    report.failures.append((p.name, int(e), float(ana), float(num)))
                report.checked += 1
    for p in params:
        p.grad = None
    return report


def _evaluate(loss_fn, flat, e, eps):
    orig = flat[e]
    flat[e] = orig + eps
    up = loss_fn().item()
    flat[e] = orig - eps
    down = loss_fn().item()
    flat[e] = orig
    return up, down


def _close(a, b, rtol, atol):
    return abs(a - b) <= rtol * max(abs(a), abs(b)) + atol


def projection_loss(out, seed=0):
    """Scalar ``sum(out * R)`` with fixed random weights ``R``.

    A random projection exercises every output entry with distinct weights,
    unlike a plain sum whose gradient can cancel through normalization.
    """
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum(out * T.Tensor(r, dtype=out.dtype))


# ---------------------------------------------------------------------------
# suites


def _cloud(n, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(n, 3))


def _setup(seed, n=32, k=8, c=8, n_classes=3):
    from .geometry import knn
    from .layers import ParamRegistry

    pos = _cloud(n, seed)
    idx = knn(pos, k)
    reg = ParamRegistry(seed)
    feats = T.Tensor(np.random.default_rng(seed + 100).standard_normal((n, c)), requires_grad=True, name="f")
    return pos, idx, reg, feats, n_classes


def _suite_attention(kind, seed):
    from . import blocks as B

    pos, idx, reg, f, t = _setup(seed)
    c = f.shape[1]
    pe_kind = "enhanced" if kind in ("smtransformer", "soft_mask") else "local"
    pe = B.PositionEncoding(reg, "pe", c, pe_kind)
    mask = B.MaskConfig("soft") if kind in ("smtransformer", "soft_mask") else None
    params = B.VectorAttention(reg, "attn", c, pe, mask=mask, n_classes=t, multiplier=kind == "ptv2_attention")
    fn = {
        "pt_attention": lambda: B.pt_attention(f, pos, idx, params),
        "ptv2_attention": lambda: B.ptv2_attention(f, pos, idx, params),
        "smtransformer": lambda: B.smtransformer(f, pos, idx, params),
        "soft_mask": lambda: B.soft_mask(f, idx, params),
    }[kind]
    return (lambda: projection_loss(fn(), seed)), [f] + reg.parameters()


def _suite_position_encoding(seed):
    from . import blocks as B

    pos, idx, reg, f, _ = _setup(seed)
    pe = B.PositionEncoding(reg, "pe", f.shape[1], "enhanced")
    return (lambda: projection_loss(B.enhanced_position_encoding(pos, idx, pe), seed)), reg.parameters()


def _suite_smtb(seed):
    from . import blocks as B

    pos, idx, reg, f, t = _setup(seed)
    pe = B.PositionEncoding(reg, "pe", 8, "enhanced")
    block = B.SMTB(reg, "block", f.shape[1], 8, 6, pe, mask=B.MaskConfig("soft"), n_classes=t)
    return (lambda: projection_loss(B.smtb(f, pos, idx, block), seed)), [f] + reg.parameters()


def _upsample_setup(seed):
    from .geometry import build_pooling_map

    pos, idx, reg, f_h, _ = _setup(seed)
    pmap = build_pooling_map(pos, 1.0)
    rng = np.random.default_rng(seed + 7)
    f_in2 = T.Tensor(rng.standard_normal((pmap.m, 6)), requires_grad=True, name="f_in2")
    f_l = T.Tensor(rng.standard_normal((pmap.m, 6)), requires_grad=True, name="f_l")
    return pos, idx, reg, f_h, f_in2, f_l, pmap


def _suite_skip_attention(seed):
    from . import blocks as B

    pos, idx, reg, f_h, _ = _setup(seed)
    f_mid = T.Tensor(np.random.default_rng(seed + 3).standard_normal(f_h.shape), requires_grad=True, name="f_mid")
    pe = B.PositionEncoding(reg, "pe", f_h.shape[1], "enhanced")
    params = B.VectorAttention(reg, "attn", f_h.shape[1], pe)
    loss = lambda: projection_loss(B.skip_attention(f_h, f_mid, pos, idx, params), seed)  # noqa: E731
    return loss, [f_h, f_mid] + reg.parameters()


def _suite_saub(seed):
    from . import blocks as B

    pos, idx, reg, f_h, f_in2, f_l, pmap = _upsample_setup(seed)
    pe = B.PositionEncoding(reg, "pe", f_h.shape[1], "enhanced")
    params = B.SAUB(reg, "saub", 6, 6, f_h.shape[1], pe)
    loss = lambda: projection_loss(B.saub(f_in2, f_l, f_h, pmap, pos, idx, params), seed)  # noqa: E731
    return loss, [f_h, f_in2, f_l] + reg.parameters()


def _suite_network(seed, fraction=0.01):
    from .geometry import PointCloud
    from .network import NetworkConfig, build, forward
    from .train import cross_entropy

    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(channels=(8, 16), counts=(1, 1), grid_sizes=(0.6,), k=8, n_classes=3)
    model = build(cfg, seed=seed)
    cloud = PointCloud(rng.uniform(-1, 1, (48, 3)), labels=rng.integers(0, 3, 48))
    batch = model.prepare(cloud)
    loss = lambda: cross_entropy(forward(model, batch), batch.labels)  # noqa: E731
    return loss, model.parameters(), fraction


SUITES = {
    "pt_attention": lambda s: _suite_attention("pt_attention", s),
    "ptv2_attention": lambda s: _suite_attention("ptv2_attention", s),
    "soft_mask": lambda s: _suite_attention("soft_mask", s),
    "enhanced_position_encoding": _suite_position_encoding,
    "smtransformer": lambda s: _suite_attention("smtransformer", s),
    "smtb": _suite_smtb,
    "skip_attention": _suite_skip_attention,
    "saub": _suite_saub,
    "network": _suite_network,
}


def run_suite(name, seed):
    setup = SUITES[name](seed)
    fraction = None
    if len(setup) == 3:
        loss_fn, params, fraction = setup
    else:
        loss_fn, params = setup
    with_dtype = T.get_default_dtype()
    if with_dtype != np.float64:
        raise RuntimeError("gradient checks need double precision")
    return check_gradients(loss_fn, params, name=f"{name}[seed={seed}]", fraction=fraction,
                           rng=np.random.default_rng(seed))


def run_all(names=None, seeds=(0, 1, 2)):
    names = names or list(SUITES)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise KeyError(f"unknown gradcheck suite(s): {sorted(unknown)}")
    return [run_suite(name, seed) for name in names for seed in seeds]
