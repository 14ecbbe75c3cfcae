"""Convex multi-phase Mumford-Shah model: blur operator, energy and the
nonlinear Euler-Lagrange operator ``F(u) = A^T A u - mu div(phi'(grad u))``.

Features ``u`` are ``d x H x W`` tensors; the observed image ``f`` is ``H x W``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradField, Tensor, as_tensor, div_backward, grad_forward


@dataclass(frozen=True)
class BlurSpec:
    """Blur operator ``A``: channel mix followed by a 2D kernel.

    ``kind`` is ``"identity"`` or ``"gaussian"``; ``channel_mix`` maps the
    ``d`` feature channels onto one image channel and must sum to one.
    """

    kind: str = "identity"
    sigma: float = 1.0
    radius: int = 2
    channel_mix: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.kind not in ("identity", "gaussian"):
            raise ValueError(f"unknown blur kind {self.kind!r}")
        mix = np.asarray(self.channel_mix, dtype=np.float64)
        if mix.ndim != 1 or mix.size == 0 or np.any(mix < 0):
            raise ValueError("channel_mix must be a non-empty list of nonnegative weights")
        if abs(mix.sum() - 1.0) > 1e-12:
            raise ValueError(f"channel_mix must sum to 1, got {mix.sum()!r}")
        if self.kind == "gaussian" and (self.sigma <= 0 or self.radius < 0):
            raise ValueError("gaussian blur needs sigma > 0 and radius >= 0")

    @property
    def kernel(self) -> np.ndarray:
        if self.kind == "identity":
            return np.ones((1, 1))
        t = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        g = np.exp(-0.5 * (t / self.sigma) ** 2)
        k = np.outer(g, g)
        return k / k.sum()

    @property
    def mix(self) -> np.ndarray:
        return np.asarray(self.channel_mix, dtype=np.float64)

    def l1_norm(self) -> float:
        """Sum of absolute stencil weights; bounds the operator 2-norm of A."""
        return float(np.abs(self.mix).sum() * np.abs(self.kernel).sum())


@dataclass(frozen=True)
class ModelParams:
    mu: float = 0.1
    nu: float = 0.0
    eps_tv: float = 1e-3
    blur: BlurSpec = field(default_factory=BlurSpec)
    channels: int = 1
    tv_enabled: bool = True

    def __post_init__(self):
        if self.mu < 0 or self.nu < 0:
            raise ValueError("mu and nu must be nonnegative")
        if self.eps_tv <= 0:
            raise ValueError("eps_tv must be positive")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if len(self.blur.channel_mix) != self.channels:
            raise ValueError(
                f"channel_mix has {len(self.blur.channel_mix)} weights for {self.channels} channels"
            )


def _as_features(u, p: ModelParams) -> np.ndarray:
    u = as_tensor(u)
    if u.ndim == 2 and p.channels == 1:
        u = u[None]
    if u.ndim != 3 or u.shape[0] != p.channels:
        raise ValueError(f"expected {p.channels} x H x W features, got shape {u.shape}")
    return u


def _correlate_edge(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    r0, r1 = k.shape[0] // 2, k.shape[1] // 2
    xp = np.pad(x, ((r0, r0), (r1, r1)), mode="edge")
    out = np.zeros_like(x)
    H, W = x.shape
    for a in range(k.shape[0]):
        for b in range(k.shape[1]):
            out += k[a, b] * xp[a:a + H, b:b + W]
    return out


def _correlate_edge_adjoint(r: np.ndarray, k: np.ndarray) -> np.ndarray:
    r0, r1 = k.shape[0] // 2, k.shape[1] // 2
    H, W = r.shape
    xp = np.zeros((H + 2 * r0, W + 2 * r1))
    for a in range(k.shape[0]):
        for b in range(k.shape[1]):
            xp[a:a + H, b:b + W] += k[a, b] * r
    # fold the replicated padding back onto the border pixels
    if r0:
        xp[r0, :] += xp[:r0, :].sum(axis=0)
        xp[r0 + H - 1, :] += xp[r0 + H:, :].sum(axis=0)
    if r1:
        xp[:, r1] += xp[:, :r1].sum(axis=1)
        xp[:, r1 + W - 1] += xp[:, r1 + W:].sum(axis=1)
    return xp[r0:r0 + H, r1:r1 + W]


def apply_A(u: Tensor, p: ModelParams) -> Tensor:
    u = _as_features(u, p)
    mixed = np.tensordot(p.blur.mix, u, axes=1)
    if p.blur.kind == "identity":
        return mixed
    return _correlate_edge(mixed, p.blur.kernel)


def apply_At(r: Tensor, p: ModelParams) -> Tensor:
    r = as_tensor(r)
    if r.ndim != 2:
        raise ValueError(f"apply_At expects an H x W image, got shape {r.shape}")
    if p.blur.kind != "identity":
        r = _correlate_edge_adjoint(r, p.blur.kernel)
    return p.blur.mix[:, None, None] * r[None]


def phi_prime(g: GradField, p: ModelParams) -> GradField:
    gx, gy = as_tensor(g[0]), as_tensor(g[1])
    if gx.shape != gy.shape:
        raise ValueError("gradient components differ in shape")
    ox, oy = 2.0 * p.nu * gx, 2.0 * p.nu * gy
    if p.tv_enabled:
        w = 1.0 / np.sqrt(gx * gx + gy * gy + p.eps_tv**2)
        ox = ox + w * gx
        oy = oy + w * gy
    return GradField(ox, oy)


def eval_energy(u: Tensor, f: Tensor, p: ModelParams) -> float:
    """``sum (f - Au)^2 + 2 mu sum phi_eps(grad u)`` over pixels and channels.

    ``phi_eps(g) = nu |g|^2 + sqrt(|g|^2 + eps^2) - eps`` (TV term dropped when
    ``tv_enabled`` is false).  The regulariser weight 2*mu makes ``apply_F``
    exactly the half-gradient: ``F(u) - A^T f = grad E(u) / 2``.
    """
    u = _as_features(u, p)
    f = as_tensor(f)
    if f.shape != u.shape[1:]:
        raise ValueError(f"image shape {f.shape} does not match features {u.shape}")
    data = float(np.sum((f - apply_A(u, p)) ** 2))
    reg = 0.0
    for uc in u:
        gx, gy = grad_forward(uc)
        sq = gx * gx + gy * gy
        reg += p.nu * float(sq.sum())
        if p.tv_enabled:
            reg += float(np.sum(np.sqrt(sq + p.eps_tv**2) - p.eps_tv))
    return data + 2.0 * p.mu * reg


def apply_F(u: Tensor, p: ModelParams) -> Tensor:
    u = _as_features(u, p)
    out = apply_At(apply_A(u, p), p)
    if p.mu:
        for c, uc in enumerate(u):
            out[c] -= p.mu * div_backward(phi_prime(grad_forward(uc), p))
    return out


def residual(u: Tensor, b: Tensor, p: ModelParams) -> Tensor:
    u = _as_features(u, p)
    b = as_tensor(b)
    if b.shape != u.shape:
        raise ValueError(f"right-hand side shape {b.shape} does not match {u.shape}")
    return b - apply_F(u, p)
