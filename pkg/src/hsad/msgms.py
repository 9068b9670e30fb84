"""Gradient-magnitude similarity: 4-direction Sobel magnitude, GMS map,
average-pooling pyramid, and the multi-scale GMS reconstruction loss.

The heavy path runs in torch (float64, CPU) so the training loop can reuse its
backward pass; the cube-level API wraps it. Kernels are applied as
correlations (no flip) with replicate-edge padding, so outputs keep the input
size at every scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .cube import HsiCube

# Kernel order: x, y, 45 degree, 135 degree. Each row sums to zero (no DC
# response), so constant inputs produce exactly zero magnitude.
SOBEL_BANK = np.array(
    [
        [[1, 0, -1], [2, 0, -2], [1, 0, -1]],
        [[1, 2, 1], [0, 0, 0], [-1, -2, -1]],
        [[2, 1, 0], [1, 0, -1], [0, -1, -2]],
        [[0, 1, 2], [-1, 0, 1], [-2, -1, 0]],
    ],
    dtype=np.float64,
)

_SOBEL_WEIGHT = torch.from_numpy(SOBEL_BANK.copy()).unsqueeze(1)  # (4, 1, 3, 3)


@dataclass(frozen=True)
class MsgmsConfig:
    """Loss constants: stability term c and pyramid depth S (level 0 = full size)."""

    stability_c: float = 1.0
    scales: int = 5

    def __post_init__(self):
        if self.stability_c <= 0:
            raise ValueError(f"stability_c must be > 0, got {self.stability_c}")
        if self.scales < 1:
            raise ValueError(f"scales must be >= 1, got {self.scales}")


class _SafeSqrt(torch.autograd.Function):
    """sqrt with the norm-style 0 subgradient at 0.

    The magnitude sqrt(sum of squared responses) is non-differentiable where
    all responses vanish (constant patches, e.g. zero-filled mask regions);
    plain autograd yields NaN there. Forward values are untouched.
    """

    @staticmethod
    def forward(ctx, s):
        root = torch.sqrt(s)
        ctx.save_for_backward(root)
        return root

    @staticmethod
    def backward(ctx, grad_out):
        (root,) = ctx.saved_tensors
        return torch.where(root > 0, grad_out / (2.0 * root), torch.zeros_like(root))


def _grad_magnitude_t(x: torch.Tensor) -> torch.Tensor:
    """Per-band 4-direction Sobel magnitude of an (N, B, H, W) tensor."""
    n, b, h, w = x.shape
    if h < 3 or w < 3:
        raise ValueError(f"gradient magnitude needs H, W >= 3, got {h}x{w}")
    flat = x.reshape(n * b, 1, h, w)
    # The zero-sum kernels make the response shift-invariant; subtracting one
    # sample per image makes that exact in floating point as well, so constant
    # images yield an exactly zero magnitude instead of accumulation roundoff.
    flat = flat - flat[:, :, :1, :1]
    padded = F.pad(flat, (1, 1, 1, 1), mode="replicate")
    resp = F.conv2d(padded, _SOBEL_WEIGHT)
    return _SafeSqrt.apply((resp * resp).sum(dim=1)).reshape(n, b, h, w)


def _gms_t(g_i: torch.Tensor, g_r: torch.Tensor, c: float) -> torch.Tensor:
    return (2.0 * g_i * g_r + c) / (g_i * g_i + g_r * g_r + c)


def _msgms_loss_t(x: torch.Tensor, y: torch.Tensor, cfg: MsgmsConfig) -> torch.Tensor:
    """Mean (1 - GMS) across scales, bands, pixels, and the batch."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    h, w = x.shape[2], x.shape[3]
    need = 3 * 2 ** (cfg.scales - 1)
    if min(h, w) < need:
        raise ValueError(
            f"{h}x{w} input too small for {cfg.scales} scales (needs >= {need})"
        )
    total = x.new_zeros(())
    for level in range(cfg.scales):
        if level:
            if x.shape[2] % 2 or x.shape[3] % 2:
                warnings.warn(
                    f"odd size {tuple(x.shape[2:])} at pyramid level {level}; "
                    "trailing row/column dropped",
                    stacklevel=2,
                )
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
        gms = _gms_t(_grad_magnitude_t(x), _grad_magnitude_t(y), cfg.stability_c)
        total = total + (1.0 - gms).mean()
    return total / cfg.scales


def _l2_loss_t(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return ((x - y) ** 2).mean()


def _to_tensor(cube: HsiCube) -> torch.Tensor:
    arr = np.ascontiguousarray(cube.values.transpose(2, 0, 1))
    return torch.from_numpy(arr).unsqueeze(0)


def _to_cube(t: torch.Tensor) -> HsiCube:
    return HsiCube(t.squeeze(0).numpy().transpose(1, 2, 0).copy())


# ---------------------------------------------------------------------------
# cube-level API
# ---------------------------------------------------------------------------


def gradient_magnitude(cube: HsiCube) -> HsiCube:
    """Per-band Sobel gradient magnitude, same shape as the input."""
    with torch.no_grad():
        return _to_cube(_grad_magnitude_t(_to_tensor(cube)))


def gms_map(g_i: HsiCube, g_r: HsiCube, c: float) -> HsiCube:
    """Gradient-magnitude similarity (2ab + c) / (a² + b² + c), values in (0, 1]."""
    if g_i.values.shape != g_r.values.shape:
        raise ValueError(
            f"shape mismatch {g_i.values.shape} vs {g_r.values.shape}"
        )
    if c <= 0:
        raise ValueError(f"stability constant must be > 0, got {c}")
    a, b = g_i.values, g_r.values
    return HsiCube((2.0 * a * b + c) / (a * a + b * b + c))


def avg_pool_half(cube: HsiCube) -> HsiCube:
    """2x2 stride-2 average pooling per band; odd trailing row/col dropped."""
    h, w = cube.height, cube.width
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ValueError(f"cube {h}x{w} too small to pool")
    if h % 2 or w % 2:
        warnings.warn(
            f"odd cube size {h}x{w}: trailing row/column dropped by pooling",
            stacklevel=2,
        )
    v = cube.values[: 2 * h2, : 2 * w2]
    pooled = v.reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))
    return HsiCube(pooled)


def msgms_loss(x: HsiCube, y: HsiCube, cfg: MsgmsConfig) -> float:
    """Multi-scale GMS loss in [0, 1); 0 iff gradients agree everywhere."""
    if x.values.shape != y.values.shape:
        raise ValueError(f"shape mismatch {x.values.shape} vs {y.values.shape}")
    with torch.no_grad():
        return float(_msgms_loss_t(_to_tensor(x), _to_tensor(y), cfg))
