"""The unrolled FAS-Unet: smoothing blocks (LSB/CSB/RSB), feature downsample
block (FDB), feature correction block (FCB) and the softmax fusion head.

Each nonlinear operator is ``x -> BN(ReLU(conv(x)))``; batch norm comes after
the ReLU.  Every application of such an operator owns its own batch-norm site,
while kernels are shared as listed in :func:`param_specs`.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad

INIT_MODES = ("zero", "random", "learned_conv")


@dataclass
class NetConfig:
    levels: int = 3
    channels: int = 8
    k_l: int = 2
    k_m: int = 3
    k_r: int = 2
    classes: int = 3
    in_channels: int = 1
    kernel: int = 3
    weight_share_inner: bool = False
    init_mode: str = "learned_conv"
    spatial_dims: int = 2
    channel_ratio: float = 1.0
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.channels < 1 or self.classes < 1 or self.in_channels < 1:
            raise ValueError("channels, classes and in_channels must be positive")
        if min(self.k_l, self.k_m, self.k_r) < 0:
            raise ValueError("smoothing counts must be nonnegative")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel extent must be odd and positive")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.spatial_dims not in (2, 3):
            raise ValueError("spatial_dims must be 2 or 3")
        if self.activation not in ("relu", "identity"):
            raise ValueError("activation must be 'relu' or 'identity'")

    @property
    def width(self) -> int:
        """Feature channels of each convolution (``r * p`` in 3D)."""
        if self.spatial_dims == 3:
            return int(round(self.channel_ratio * self.channels))
        return self.channels

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass
class Param:
    value: np.ndarray
    kind: str  # conv | bn_weight | bn_bias | bias
    group: str  # theta1 | theta2 | bn
    grad: np.ndarray = None
    momentum: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.value)


class ParamStore:
    """Ordered trainable parameters plus batch-norm running statistics."""

    def __init__(self):
        self.params: "OrderedDict[str, Param]" = OrderedDict()
        self.bn: "OrderedDict[str, ad.BNState]" = OrderedDict()

    def add(self, name: str, value, kind: str, group: str) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = Param(np.asarray(value, dtype=np.float64), kind, group)

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def count(self, group: Optional[str] = None, kind: Optional[str] = None) -> int:
        return sum(p.value.size for p in self.params.values()
                   if (group is None or p.group == group) and (kind is None or p.kind == kind))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self.params.items():
            out.params[name] = Param(p.value.copy(), p.kind, p.group, p.grad.copy(), p.momentum.copy())
        for name, s in self.bn.items():
            st = ad.BNState(len(s.mean))
            st.mean, st.var = s.mean.copy(), s.var.copy()
            out.bn[name] = st
        return out


# -- parameter inventory ------------------------------------------------------

def _inner_names(q: str, level: int, k: int, shared: bool) -> list[str]:
    if shared:
        return [f"K'_{q}.{level}"] if k else []
    return [f"K'_{q}.{level}.{j}" for j in range(1, k + 1)]


def _inner_name(q: str, level: int, j: int, shared: bool) -> str:
    return f"K'_{q}.{level}" if shared else f"K'_{q}.{level}.{j}"


def _fdb_coarse_kernel(level: int, cfg: NetConfig) -> str:
    # F^{l+1} in the FDB uses K_{l+1}; the coarsest level has no K_L of its
    # own, so it borrows the coarsest smoothing kernel K_{m,L}
    return f"K.{level + 1}" if level + 1 < cfg.levels else f"K_m.{cfg.levels}"


def param_specs(cfg: NetConfig) -> list[tuple[str, tuple[int, ...], str, str]]:
    """Ordered ``(name, shape, kind, group)`` for every trainable entry."""
    p, k, d = cfg.width, cfg.kernel, cfg.spatial_dims
    sq = (k,) * d
    pp = (p, p) + sq
    specs = [("K0", (p, cfg.in_channels) + sq, "conv", "theta1")]
    for lvl in range(1, cfg.levels):
        specs += [(f"K_down.{lvl}", pp, "conv", "theta1"),
                  (f"K_up.{lvl}", pp, "conv", "theta1"),
                  (f"K_l.{lvl}", pp, "conv", "theta1"),
                  (f"K_r.{lvl}", pp, "conv", "theta1"),
                  (f"K.{lvl}", pp, "conv", "theta1")]
        specs += [(n, pp, "conv", "theta1") for n in _inner_names("l", lvl, cfg.k_l, cfg.weight_share_inner)]
        specs += [(n, pp, "conv", "theta1") for n in _inner_names("r", lvl, cfg.k_r, cfg.weight_share_inner)]
    L = cfg.levels
    specs.append((f"K_m.{L}", pp, "conv", "theta1"))
    specs += [(n, pp, "conv", "theta1") for n in _inner_names("m", L, cfg.k_m, cfg.weight_share_inner)]
    specs.append(("K_p", (cfg.classes, p) + (1,) * d, "conv", "theta2"))
    specs.append(("K_p.bias", (cfg.classes,), "bias", "theta2"))
    for site in bn_sites(cfg):
        specs.append((f"bn.{site}.weight", (p,), "bn_weight", "bn"))
        specs.append((f"bn.{site}.bias", (p,), "bn_bias", "bn"))
    return specs


def bn_sites(cfg: NetConfig) -> list[str]:
    sites = ["K0"]
    for lvl in range(1, cfg.levels):
        sites += [f"l.{lvl}.{j}.{ab}" for j in range(1, cfg.k_l + 1) for ab in "ab"]
        sites += [f"fdb.{lvl}.fine", f"fdb.{lvl}.coarse"]
        sites += [f"r.{lvl}.{j}.{ab}" for j in range(1, cfg.k_r + 1) for ab in "ab"]
    sites += [f"m.{cfg.levels}.{j}.{ab}" for j in range(1, cfg.k_m + 1) for ab in "ab"]
    return sites


def init_params(cfg: NetConfig, seed: int = 0) -> ParamStore:
    """Kaiming fan-in normal weights, BN scale 1 / shift 0, zero momentum."""
    if cfg.spatial_dims != 2:
        raise NotImplementedError("only 2D networks can be instantiated")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, kind, group in param_specs(cfg):
        if kind == "conv":
            fan_in = int(np.prod(shape[1:]))
            value = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif kind == "bn_weight":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        store.add(name, value, kind, group)
    for site in bn_sites(cfg):
        store.bn[site] = ad.BNState(cfg.width)
    return store


@dataclass
class ParamCount:
    multiplier: int
    eta_kernel: int
    multiplier_term: int
    formula_count: int
    instantiated_count: int
    theta1_count: int


def param_count(cfg: NetConfig) -> ParamCount:
    """Closed-form theta_1 size next to the enumerated parameter inventory.

    ``formula_count = c_in p k^d + ((k_m + 1) + (L - 1)(k_l + k_r + 5)) eta(K)``
    with ``eta(K) = (r p)^2 k^d`` (conv weights only).  ``instantiated_count``
    also includes the fusion head and batch-norm affine entries.
    """
    p, k, d = cfg.width, cfg.kernel, cfg.spatial_dims
    eta = p * p * k**d
    if cfg.weight_share_inner:
        inner = lambda n: min(n, 1)  # noqa: E731
    else:
        inner = lambda n: n  # noqa: E731
    mult = (inner(cfg.k_m) + 1) + (cfg.levels - 1) * (inner(cfg.k_l) + inner(cfg.k_r) + 5)
    specs = param_specs(cfg)
    inst = sum(int(np.prod(s)) for _, s, _, _ in specs)
    theta1 = sum(int(np.prod(s)) for _, s, _, g in specs if g == "theta1")
    return ParamCount(mult, eta, mult * eta, cfg.in_channels * p * k**d + mult * eta, inst, theta1)


# -- blocks -------------------------------------------------------------------

class Net:
    """Binds a tape, a parameter store and a mode for one forward pass."""

    def __init__(self, tape: ad.Tape, store: ParamStore, cfg: NetConfig, mode: str = "eval"):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.tape, self.store, self.cfg, self.mode = tape, store, cfg, mode
        self.act = ad.relu if cfg.activation == "relu" else ad.identity

    def w(self, name: str) -> ad.Var:
        return self.tape.leaf(name, self.store[name].value)

    def op(self, x: ad.Var, kernel: str, site: str) -> ad.Var:
        """``BN(act(conv(x)))`` with the named kernel and batch-norm site."""
        y = self.act(ad.conv2d(x, self.w(kernel)))
        return ad.batchnorm(y, self.w(f"bn.{site}.weight"), self.w(f"bn.{site}.bias"),
                            self.store.bn[site], self.mode)

    def smoothing_block(self, u: ad.Var, b: ad.Var, level: int, q: str) -> ad.Var:
        steps = {"l": self.cfg.k_l, "m": self.cfg.k_m, "r": self.cfg.k_r}[q]
        outer = f"K_{q}.{level}"
        for j in range(1, steps + 1):
            r = b - self.op(u, outer, f"{q}.{level}.{j}.a")
            inner = _inner_name(q, level, j, self.cfg.weight_share_inner)
            u = u + self.op(r, inner, f"{q}.{level}.{j}.b")
        return u

    def fdb(self, b: ad.Var, u_bar: ad.Var, level: int) -> tuple[ad.Var, ad.Var]:
        if not 1 <= level < self.cfg.levels:
            raise ValueError(f"FDB level {level} outside 1..{self.cfg.levels - 1}")
        down = self.w(f"K_down.{level}")
        r = b - self.op(u_bar, f"K.{level}", f"fdb.{level}.fine")
        u_init = ad.conv2d(u_bar, down, stride=2)
        b_c = ad.conv2d(r, down, stride=2) + self.op(u_init, _fdb_coarse_kernel(level, self.cfg),
                                                     f"fdb.{level}.coarse")
        return b_c, u_init

    def fcb(self, u_bar: ad.Var, u_c: ad.Var, u_init: ad.Var, level: int) -> ad.Var:
        if u_c.shape != u_init.shape:
            raise ValueError("coarse solution and coarse initial guess differ in shape")
        corr = ad.deconv2d(u_c - u_init, self.w(f"K_up.{level}"), u_bar.shape[2:])
        return u_bar + corr

    def features(self, f: ad.Var) -> ad.Var:
        cfg = self.cfg
        H, W = f.shape[2:]
        if H % cfg.divisor or W % cfg.divisor:
            raise ValueError(f"input extents {H}x{W} not divisible by 2^(L-1) = {cfg.divisor}")
        b = ad.batchnorm(ad.conv2d(f, self.w("K0")), self.w("bn.K0.weight"),
                         self.w("bn.K0.bias"), self.store.bn["K0"], self.mode)
        if cfg.init_mode == "learned_conv":
            u = b
        elif cfg.init_mode == "zero":
            u = self.tape.var(np.zeros(b.shape))
        else:
            rng = np.random.default_rng(cfg.seed)
            u = self.tape.var(rng.standard_normal(b.shape))
        stack = []
        for lvl in range(1, cfg.levels):
            u_bar = self.smoothing_block(u, b, lvl, "l")
            b_c, u_init = self.fdb(b, u_bar, lvl)
            stack.append((u_bar, u_init, b))
            u, b = u_init, b_c
        u = self.smoothing_block(u, b, cfg.levels, "m")
        for lvl in range(cfg.levels - 1, 0, -1):
            u_bar, u_init, b = stack.pop()
            u = self.smoothing_block(self.fcb(u_bar, u, u_init, lvl), b, lvl, "r")
        return u

    def head(self, u: ad.Var) -> ad.Var:
        z = ad.add_bias(ad.conv2d(u, self.w("K_p"), pad=0), self.w("K_p.bias"))
        return ad.softmax_channels(z)

    def __call__(self, f) -> ad.Var:
        if not isinstance(f, ad.Var):
            f = self.tape.var(f)
        return self.head(self.features(f))


def forward(f: np.ndarray, store: ParamStore, cfg: NetConfig, mode: str = "eval",
            tape: Optional[ad.Tape] = None) -> ad.Var:
    """Probability maps ``N x c x H x W`` for a batch ``N x c_in x H x W``."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 3:
        f = f[None]
    if f.ndim != 4 or f.shape[1] != cfg.in_channels:
        raise ValueError(f"expected N x {cfg.in_channels} x H x W input, got {f.shape}")
    tape = tape if tape is not None else ad.Tape()
    return Net(tape, store, cfg, mode)(f)


def predict(s) -> np.ndarray:
    """Per-pixel argmax over classes; ties resolve to the lowest class index."""
    s = s.value if isinstance(s, ad.Var) else np.asarray(s)
    return np.argmax(s, axis=-3)


def collect_grads(tape: ad.Tape, store: ParamStore) -> None:
    """Copy leaf gradients from a swept tape into the store's gradient buffers."""
    for name, leaf in tape.leaves.items():
        if leaf.grad is not None:
            store[name].grad += leaf.grad
