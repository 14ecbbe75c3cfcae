"""Classical FAS nonlinear multigrid for ``F(u) = b``.

Smoothing is damped Richardson ``u <- u + tau (b - F(u))``; transfers are
full weighting and bilinear interpolation anchored at even fine pixels, with
coarse extents ``ceil(n / 2)``.  Levels are numbered 1 (finest) to L.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .model import ModelParams, apply_At, apply_F, eval_energy
from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)

_FW = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0


class DivergenceError(RuntimeError):
    def __init__(self, step: int, where: str = "smoother"):
        super().__init__(f"{where} produced a non-finite iterate at step {step}")
        self.step = step


@dataclass
class FasConfig:
    levels: int = 3
    k_l: int = 3
    k_m: int = 7
    k_r: int = 4
    cycles: int = 10
    tau: Union[float, str] = "auto"
    min_coarse_extent: int = 4

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if min(self.k_l, self.k_m, self.k_r) < 0:
            raise ValueError("smoothing counts must be nonnegative")
        if self.levels > 1 and self.k_m < 1:
            raise ValueError("k_m must be >= 1 when levels > 1")
        if self.cycles < 1:
            raise ValueError("cycles must be >= 1")
        if self.tau != "auto" and not float(self.tau) > 0:
            raise ValueError("tau must be positive or 'auto'")
        if self.min_coarse_extent < 1:
            raise ValueError("min_coarse_extent must be positive")


@dataclass
class GridHierarchy:
    extents: list[tuple[int, int]]
    params: list[ModelParams]

    @property
    def levels(self) -> int:
        return len(self.extents)


def build_hierarchy(shape: tuple[int, int], p: ModelParams, cfg: FasConfig) -> GridHierarchy:
    H, W = shape
    extents = [(H, W)]
    for _ in range(cfg.levels - 1):
        h, w = extents[-1]
        extents.append(((h + 1) // 2, (w + 1) // 2))
    if cfg.levels > 1 and min(extents[-1]) < cfg.min_coarse_extent:
        raise ValueError(
            f"{cfg.levels} levels on a {H}x{W} grid give coarsest extents {extents[-1]}, "
            f"below min_coarse_extent={cfg.min_coarse_extent}"
        )
    return GridHierarchy(extents, [p] * cfg.levels)


def auto_tau(p: ModelParams) -> float:
    """Step ``1 / (||A||_1^2 + mu (8 nu + 4/eps))``; the TV term is dropped in linear mode."""
    bound = 8.0 * p.nu + (4.0 / p.eps_tv if p.tv_enabled else 0.0)
    return 1.0 / (p.blur.l1_norm() ** 2 + p.mu * bound)


def _resolve_tau(tau, p: ModelParams) -> float:
    return auto_tau(p) if tau == "auto" else float(tau)


def smooth(u: Tensor, b: Tensor, p: ModelParams, steps: int, tau="auto") -> Tensor:
    if steps < 0:
        raise ValueError("steps must be >= 0")
    t = _resolve_tau(tau, p)
    u = as_tensor(u).copy()
    # overflow is caught by the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps):
            u += t * (b - apply_F(u, p))
            if not np.all(np.isfinite(u)):
                raise DivergenceError(k + 1)
    return u


def _restrict2(x: np.ndarray) -> np.ndarray:
    H, W = x.shape
    if H < 2 or W < 2:
        raise ValueError(f"cannot restrict a {H}x{W} grid")
    h, w = (H + 1) // 2, (W + 1) // 2
    xp = np.pad(x, 1, mode="edge")
    out = np.zeros((h, w))
    for a in range(3):
        for b in range(3):
            out += _FW[a, b] * xp[a:a + 2 * h - 1:2, b:b + 2 * w - 1:2]
    return out


def restrict(x: Tensor) -> Tensor:
    """Full-weighting restriction, applied per channel for ``d x H x W`` input."""
    x = as_tensor(x)
    if x.ndim == 2:
        return _restrict2(x)
    return np.stack([_restrict2(c) for c in x])


def _prolong2(x: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = x.shape
    if (H + 1) // 2 != h or (W + 1) // 2 != w:
        raise ValueError(f"coarse grid {h}x{w} is inconsistent with target {H}x{W}")
    xp = np.pad(x, ((0, 1), (0, 1)), mode="edge")
    fine = np.empty((2 * h, 2 * w))
    c00, c01 = xp[:-1, :-1], xp[:-1, 1:]
    c10, c11 = xp[1:, :-1], xp[1:, 1:]
    fine[0::2, 0::2] = c00
    fine[0::2, 1::2] = 0.5 * (c00 + c01)
    fine[1::2, 0::2] = 0.5 * (c00 + c10)
    fine[1::2, 1::2] = 0.25 * (c00 + c01 + c10 + c11)
    return fine[:H, :W]


def prolong(x: Tensor, H: int, W: int) -> Tensor:
    """Bilinear interpolation onto the ``H x W`` grid (coarse node i sits at fine 2i)."""
    x = as_tensor(x)
    if x.ndim == 2:
        return _prolong2(x, H, W)
    return np.stack([_prolong2(c, H, W) for c in x])


def fas_vcycle(u: Tensor, b: Tensor, level: int, hierarchy: GridHierarchy, cfg: FasConfig) -> Tensor:
    L = hierarchy.levels
    if not 1 <= level <= L:
        raise ValueError(f"level {level} outside 1..{L}")
    p = hierarchy.params[level - 1]
    tau = _resolve_tau(cfg.tau, p)
    if level == L:
        return smooth(u, b, p, cfg.k_m, tau)
    u_bar = smooth(u, b, p, cfg.k_l, tau)
    r = b - apply_F(u_bar, p)
    pc = hierarchy.params[level]
    u_c0 = restrict(u_bar)
    b_c = restrict(r) + apply_F(u_c0, pc)
    u_c = fas_vcycle(u_c0, b_c, level + 1, hierarchy, cfg)
    H, W = hierarchy.extents[level - 1]
    u_bar = u_bar + prolong(u_c - u_c0, H, W)
    return smooth(u_bar, b, p, cfg.k_r, tau)


@dataclass
class SolveResult:
    u: np.ndarray
    residual_norms: list[float] = field(default_factory=list)
    energies: list[float] = field(default_factory=list)


def solve(f: Tensor, p: ModelParams, cfg: FasConfig) -> SolveResult:
    """Run ``cfg.cycles`` V-cycles on ``F(u) = A^T f`` from ``u0 = A^T f``.

    The traces hold the residual norm and energy after each cycle, preceded by
    the values at the initial guess.
    """
    f = as_tensor(f)
    if f.ndim != 2:
        raise ValueError(f"solve expects an H x W image, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError("input image contains non-finite values")
    hier = build_hierarchy(f.shape, p, cfg)
    b = apply_At(f, p)
    u = b.copy()
    res = SolveResult(u)
    res.residual_norms.append(float(np.linalg.norm(b - apply_F(u, p))))
    res.energies.append(eval_energy(u, f, p))
    for k in range(cfg.cycles):
        try:
            u = fas_vcycle(u, b, 1, hier, cfg)
        except DivergenceError as e:
            raise DivergenceError(e.step, where=f"V-cycle {k + 1}") from e
        res.residual_norms.append(float(np.linalg.norm(b - apply_F(u, p))))
        res.energies.append(eval_energy(u, f, p))
        log.debug("cycle %d residual %.3e energy %.6e", k + 1, res.residual_norms[-1], res.energies[-1])
    res.u = u
    return res
