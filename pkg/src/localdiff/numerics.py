"""Dense-map numerics: row softmax, Gaussian smoothing, latent gradients.

All operators are pure functions over torch tensors.  float64 is the
default working precision; float32 is accepted everywhere for speed runs.
Gradients are obtained by reverse-mode differentiation through torch;
the finite-difference cross-check lives in the test suite so the two
routes stay independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NonFiniteError, ParameterError, ShapeError

__all__ = [
    "ensure_finite",
    "softmax_rows",
    "GaussianKernel",
    "gaussian_smooth",
    "grad_wrt_latent",
]


def ensure_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    """Return ``x`` unchanged, raising :class:`NonFiniteError` on NaN/Inf."""
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def softmax_rows(m: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax of a rank-2 matrix, stabilized by row-max subtraction."""
    if m.dim() != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 matrix, got rank {m.dim()}")
    ensure_finite(m, "softmax_rows input")
    shifted = m - m.max(dim=1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


@dataclass(frozen=True)
class GaussianKernel:
    """Normalized 2-D Gaussian stencil used to smooth attention maps."""

    size: int
    sigma: float
    weights: torch.Tensor

    @classmethod
    def make(cls, size: int = 3, sigma: float = 1.0,
             dtype: torch.dtype = torch.float64) -> "GaussianKernel":
        if size < 1 or size % 2 == 0:
            raise ParameterError(f"kernel size must be odd and positive, got {size}")
        if sigma <= 0:
            raise ParameterError(f"sigma must be positive, got {sigma}")
        r = size // 2
        coords = torch.arange(size, dtype=dtype) - r
        dy2 = coords.reshape(-1, 1) ** 2
        dx2 = coords.reshape(1, -1) ** 2
        w = torch.exp(-(dy2 + dx2) / (2.0 * sigma * sigma))
        # normalize by the row-major sequential sum: the accumulation order
        # is part of the kernel's definition so any reimplementation that
        # follows it reproduces the weights bit for bit
        total = torch.zeros((), dtype=dtype)
        for v in w.flatten():
            total = total + v
        w = w / total
        return cls(size=size, sigma=float(sigma), weights=w)

    def __post_init__(self):
        if self.weights.shape != (self.size, self.size):
            raise ShapeError("kernel weights do not match declared size")
        total = float(self.weights.sum())
        tol = 1e-12 if self.weights.dtype == torch.float64 else 1e-5
        if not math.isclose(total, 1.0, abs_tol=tol):
            raise ParameterError(f"kernel weights must sum to 1, got {total}")


def _smooth_lastdims(x: torch.Tensor, kernel: GaussianKernel) -> torch.Tensor:
    """Smooth the last two dims of ``x`` with zero padding.

    Implemented as an accumulation of shifted, scaled copies in kernel
    scan order so a per-pixel reference loop reproduces it bit for bit.
    """
    h, w = x.shape[-2], x.shape[-1]
    k = kernel.size
    if k > h or k > w:
        raise ParameterError(f"kernel size {k} exceeds map size {h}x{w}")
    r = k // 2
    weights = kernel.weights.to(x.dtype)
    padded = F.pad(x, (r, r, r, r))
    out = torch.zeros_like(x)
    for dy in range(k):
        for dx in range(k):
            out = out + weights[dy, dx] * padded[..., dy:dy + h, dx:dx + w]
    return out


def gaussian_smooth(map2d: torch.Tensor, kernel: GaussianKernel) -> torch.Tensor:
    """Convolve a rank-2 map with a normalized Gaussian kernel (zero padding)."""
    if map2d.dim() != 2:
        raise ShapeError(f"gaussian_smooth expects a rank-2 map, got rank {map2d.dim()}")
    return _smooth_lastdims(map2d, kernel)


def grad_wrt_latent(loss_fn, z: torch.Tensor) -> torch.Tensor:
    """Gradient of a scalar loss with respect to the latent ``z``.

    ``loss_fn`` must evaluate the loss through the denoiser forward pass
    as a differentiable torch expression of its argument.
    """
    leaf = z.detach().clone().requires_grad_(True)
    loss = loss_fn(leaf)
    if loss.dim() != 0:
        raise ShapeError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        raise NonFiniteError("loss is non-finite at the evaluation point")
    if not loss.requires_grad:
        return torch.zeros_like(leaf)
    (grad,) = torch.autograd.grad(loss, leaf, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(leaf)
    return grad.detach()
