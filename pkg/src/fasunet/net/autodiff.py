"""A minimal tape-based reverse-mode differentiator over numpy arrays.

Every primitive takes :class:`Var` inputs, computes its value eagerly and
records a backward rule on the tape shared by its inputs.  ``Tape.backward``
sweeps the records in reverse, visiting each exactly once and accumulating
gradients additively.

Arrays are batched ``N x C x H x W``.  Convolutions use cross-correlation.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
PROB_CLAMP = 1e-12


class Var:
    __slots__ = ("value", "grad", "tape", "name", "complement")

    def __init__(self, value, tape: "Tape", name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.name = name
        # 1 - value without cancellation, set by softmax_channels
        self.complement: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __repr__(self):
        return f"Var(shape={self.shape}, name={self.name!r})"


class Tape:
    def __init__(self):
        self.records: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self.kink_masks: list[np.ndarray] = []
        self._leaves: dict[str, Var] = {}

    def var(self, value, name=None) -> Var:
        return Var(value, self, name)

    def leaf(self, name: str, value) -> Var:
        """Return the (cached) leaf for a named parameter so reuse accumulates."""
        v = self._leaves.get(name)
        if v is None:
            v = self._leaves[name] = Var(value, self, name)
        return v

    @property
    def leaves(self) -> dict[str, Var]:
        return self._leaves

    def record(self, out: Var, inputs: tuple[Var, ...], backward: Callable) -> Var:
        self.records.append((out, inputs, backward))
        return out

    def backward(self, out: Var, seed=None) -> None:
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node, inputs, rule in reversed(self.records):
            if node.grad is None:
                continue
            grads = rule(node.grad)
            for x, g in zip(inputs, grads):
                if g is None:
                    continue
                x.grad = g if x.grad is None else x.grad + g


def _tape(*xs: Var) -> Tape:
    return xs[0].tape


# -- raw numpy kernels -------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _flat_padded(x: np.ndarray, pad: int, kh: int, kw: int):
    """Zero-pad and flatten the spatial axes so every tap is a contiguous shift.

    Output pixel ``(i, j)`` of a stride-1 correlation lives at flat index
    ``i * Wp + j``; tap ``(a, b)`` reads ``xflat[..., a * Wp + b + idx]``.
    """
    N, C, H, W = x.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    # one spare row keeps the last tap's slice in bounds
    xp = np.zeros((N, C, Hp + 1, Wp))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    return xp.reshape(N, C, -1), Ho, Wo, Wp


def _conv_s1(x: np.ndarray, k: np.ndarray, pad: int) -> np.ndarray:
    O, C, kh, kw = k.shape
    xf, Ho, Wo, Wp = _flat_padded(x, pad, kh, kw)
    span = Ho * Wp
    out = np.zeros((x.shape[0], O, span))
    for a in range(kh):
        for b in range(kw):
            off = a * Wp + b
            out += np.matmul(k[:, :, a, b], xf[:, :, off:off + span])
    return out.reshape(x.shape[0], O, Ho, Wp)[:, :, :, :Wo]


def _conv_s1_grad_weight(x: np.ndarray, g: np.ndarray, k_shape, pad: int) -> np.ndarray:
    O, C, kh, kw = k_shape
    xf, Ho, Wo, Wp = _flat_padded(x, pad, kh, kw)
    span = Ho * Wp
    gf = np.zeros((g.shape[0], O, Ho, Wp))
    gf[:, :, :, :Wo] = g
    gf = gf.reshape(g.shape[0], O, span)
    dk = np.empty(k_shape)
    for a in range(kh):
        for b in range(kw):
            off = a * Wp + b
            dk[:, :, a, b] = np.matmul(gf, xf[:, :, off:off + span].transpose(0, 2, 1)).sum(axis=0)
    return dk


def conv2d_raw(x: np.ndarray, k: np.ndarray, stride: int = 1, pad: Optional[int] = None) -> np.ndarray:
    if pad is None:
        pad = (k.shape[-1] - 1) // 2
    if x.shape[1] != k.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {k.shape[1]}")
    if stride == 1:
        return _conv_s1(x, k, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, k.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    # win: N, C, Ho, Wo, kh, kw
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad_input(g: np.ndarray, k: np.ndarray, in_hw: tuple[int, int],
                      stride: int = 1, pad: Optional[int] = None) -> np.ndarray:
    if pad is None:
        pad = (k.shape[-1] - 1) // 2
    N, _, Ho, Wo = g.shape
    _, C, kh, kw = k.shape
    H, W = in_hw
    if (_out_extent(H, kh, stride, pad), _out_extent(W, kw, stride, pad)) != (Ho, Wo):
        raise ValueError(f"target extents {in_hw} inconsistent with output {Ho}x{Wo}")
    if stride == 1 and 2 * pad <= kh - 1 and kh == kw:
        # full correlation with the flipped, channel-transposed kernel
        kf = np.ascontiguousarray(k.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        return _conv_s1(g, kf, kh - 1 - pad)
    cols = np.tensordot(k, g, axes=([0], [1]))  # C, kh, kw, N, Ho, Wo
    cols = np.ascontiguousarray(cols.transpose(1, 2, 3, 0, 4, 5))  # kh, kw, N, C, Ho, Wo
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    for a in range(kh):
        for b in range(kw):
            xp[:, :, a:a + stride * (Ho - 1) + 1:stride, b:b + stride * (Wo - 1) + 1:stride] += cols[a, b]
    return xp[:, :, pad:pad + H, pad:pad + W]


def conv2d_grad_weight(x: np.ndarray, g: np.ndarray, k_shape, stride: int = 1,
                       pad: Optional[int] = None) -> np.ndarray:
    if pad is None:
        pad = (k_shape[-1] - 1) // 2
    if stride == 1:
        return _conv_s1_grad_weight(x, g, k_shape, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, k_shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = g.shape[2:]
    win = win[:, :, :Ho, :Wo]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw


# -- differentiable primitives ----------------------------------------------

def add(a: Var, b: Var) -> Var:
    t = _tape(a, b)
    return t.record(Var(a.value + b.value, t), (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    t = _tape(a, b)
    return t.record(Var(a.value - b.value, t), (a, b), lambda g: (g, -g))


def conv2d(x: Var, k: Var, stride: int = 1, pad: Optional[int] = None) -> Var:
    t = _tape(x, k)
    if pad is None:
        pad = (k.shape[-1] - 1) // 2
    out = conv2d_raw(x.value, k.value, stride, pad)
    hw = x.shape[2:]

    def rule(g):
        return (conv2d_grad_input(g, k.value, hw, stride, pad),
                conv2d_grad_weight(x.value, g, k.shape, stride, pad))
    return t.record(Var(out, t), (x, k), rule)


def deconv2d(y: Var, k: Var, out_hw: tuple[int, int], stride: int = 2) -> Var:
    """Transposed convolution: the exact adjoint of ``conv2d(., k, stride)`` on ``out_hw`` grids.

    ``k`` has the shape of the matching forward kernel, ``C_coarse x C_fine x kh x kw``.
    """
    t = _tape(y, k)
    pad = (k.shape[-1] - 1) // 2
    out = conv2d_grad_input(y.value, k.value, out_hw, stride, pad)

    def rule(g):
        return (conv2d_raw(g, k.value, stride, pad),
                conv2d_grad_weight(g, y.value, k.shape, stride, pad))
    return t.record(Var(out, t), (y, k), rule)


def add_bias(x: Var, bias: Var) -> Var:
    t = _tape(x, bias)
    out = x.value + bias.value[None, :, None, None]
    return t.record(Var(out, t), (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))))


def relu(x: Var) -> Var:
    t = x.tape
    mask = x.value > 0
    t.kink_masks.append(mask)
    return t.record(Var(np.where(mask, x.value, 0.0), t), (x,), lambda g: (g * mask,))


def identity(x: Var) -> Var:
    return x


class BNState:
    """Running statistics of one batch-norm site (mutated in train mode)."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batchnorm(x: Var, gamma: Var, beta: Var, state: BNState, mode: str = "train") -> Var:
    t = _tape(x, gamma, beta)
    axes = (0, 2, 3)
    if mode == "train":
        mean = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        m = x.value.size // x.shape[1]
        unbiased = var * m / max(m - 1, 1)
        state.mean = (1 - BN_MOMENTUM) * state.mean + BN_MOMENTUM * mean
        state.var = (1 - BN_MOMENTUM) * state.var + BN_MOMENTUM * unbiased
    elif mode == "eval":
        mean, var = state.mean, state.var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.value - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]

    def rule(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gamma.value[None, :, None, None]
        if mode == "eval":
            dx = gx * inv[None, :, None, None]
        else:
            dx = inv[None, :, None, None] * (
                gx - gx.mean(axis=axes, keepdims=True)
                - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
        return dx, dgamma, dbeta
    return t.record(Var(out, t), (x, gamma, beta), rule)


def softmax_channels(x: Var) -> Var:
    t = x.tape
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=1, keepdims=True)
    s = e / total
    others = np.stack([np.delete(e, k, axis=1).sum(axis=1) for k in range(e.shape[1])], axis=1)
    out = Var(s, t)
    out.complement = others / total
    return t.record(out, (x,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def cross_entropy(s: Var, target: np.ndarray) -> Var:
    """Negative mean over samples and pixels of ``sum_k y log s + (1-y) log(1-s)``."""
    t = s.tape
    y = np.asarray(target, dtype=np.float64)
    if y.shape != s.shape:
        raise ValueError(f"label shape {y.shape} does not match prediction {s.shape}")
    comp = s.complement if s.complement is not None else 1.0 - s.value
    inside = (s.value > PROB_CLAMP) & (comp > PROB_CLAMP)
    t.kink_masks.append(inside)
    sc = np.maximum(s.value, PROB_CLAMP)
    cc = np.maximum(comp, PROB_CLAMP)
    n = s.shape[0] * s.shape[2] * s.shape[3]
    total = np.sum(y * np.log(sc) + (1 - y) * np.log(cc))
    loss = -total / n

    def rule(g):
        return (-g * inside * (y / sc - (1 - y) / cc) / n,)
    return t.record(Var(loss, t), (s,), rule)
