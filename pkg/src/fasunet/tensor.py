"""Dense float64 tensors and the finite-difference stencils shared by the
classical solver and the network.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; image-like data
uses channels-then-rows-then-columns layout.  The discrete gradient uses
forward differences with replicate (Neumann) boundaries and the divergence is
its exact negative adjoint, so ``<grad u, g> = -<u, div g>`` holds to rounding.
"""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

Tensor = np.ndarray

_MAX_ELEMENTS = 2**40


class GradField(NamedTuple):
    """Forward-difference gradient components ``(gx, gy)`` of one image."""

    gx: np.ndarray
    gy: np.ndarray


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 4:
        raise ValueError(f"tensor rank must be 1..4, got {len(shape)}")
    if any(s <= 0 for s in shape):
        raise ValueError(f"tensor extents must be positive, got {shape}")
    if int(np.prod(shape, dtype=object)) > _MAX_ELEMENTS:
        raise ValueError(f"tensor of shape {shape} is too large")
    return shape


def zeros(shape: Sequence[int]) -> Tensor:
    return np.zeros(_check_shape(shape), dtype=np.float64)


def full(shape: Sequence[int], value: float) -> Tensor:
    return np.full(_check_shape(shape), float(value), dtype=np.float64)


def random_normal(shape: Sequence[int], seed: int, std: float = 1.0) -> Tensor:
    rng = np.random.default_rng(seed)
    return std * rng.standard_normal(_check_shape(shape))


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def grad_forward(u: Tensor) -> GradField:
    """Forward differences; the last column of gx and last row of gy are 0."""
    u = as_tensor(u)
    if u.ndim != 2:
        raise ValueError(f"grad_forward expects a rank-2 image, got rank {u.ndim}")
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return GradField(gx, gy)


def div_backward(g: GradField) -> Tensor:
    """Discrete divergence, the negative adjoint of :func:`grad_forward`.

    Entries of ``gx[:, -1]`` and ``gy[-1, :]`` are ignored, matching the
    zero boundary rows produced by the gradient.
    """
    gx, gy = as_tensor(g[0]), as_tensor(g[1])
    if gx.shape != gy.shape:
        raise ValueError(f"gradient components differ in shape: {gx.shape} vs {gy.shape}")
    if gx.ndim != 2:
        raise ValueError("div_backward expects rank-2 components")
    d = np.zeros_like(gx)
    d[:, :-1] += gx[:, :-1]
    d[:, 1:] -= gx[:, :-1]
    d[:-1, :] += gy[:-1, :]
    d[1:, :] -= gy[:-1, :]
    return d


def _same_shape(x: Tensor, y: Tensor) -> None:
    if np.shape(x) != np.shape(y):
        raise ValueError(f"shape mismatch: {np.shape(x)} vs {np.shape(y)}")


def add(x: Tensor, y) -> Tensor:
    if np.ndim(y) == 0:
        return as_tensor(x) + float(y)
    _same_shape(x, y)
    return as_tensor(x) + as_tensor(y)


def sub(x: Tensor, y) -> Tensor:
    if np.ndim(y) == 0:
        return as_tensor(x) - float(y)
    _same_shape(x, y)
    return as_tensor(x) - as_tensor(y)


def scale(x: Tensor, a: float) -> Tensor:
    return float(a) * as_tensor(x)


def dot(x: Tensor, y: Tensor) -> float:
    _same_shape(x, y)
    return float(np.sum(as_tensor(x) * as_tensor(y)))


def norm2(x: Tensor) -> float:
    return float(np.sqrt(np.sum(as_tensor(x) ** 2)))
