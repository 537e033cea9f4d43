"""Soft dice and focal losses with closed-form gradients.

Both are ``torch.autograd.Function`` subclasses whose backward pass is the
hand-derived gradient, so what trains the network is exactly what the
finite-difference tests check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError

DICE_EPS = 1e-6
FOCAL_CLAMP = 1e-7


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def _check(pred, target):
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


class _SoftDice(torch.autograd.Function):
    @staticmethod
    def forward(ctx, pred, target):
        inter = (pred * target).sum()
        num = 2 * inter + DICE_EPS
        den = (pred * pred).sum() + (target * target).sum() + DICE_EPS
        ctx.save_for_backward(pred, target, num, den)
        return 1 - num / den

    @staticmethod
    def backward(ctx, grad_out):
        pred, target, num, den = ctx.saved_tensors
        # d/dp_i [1 - num/den] = -(2 q_i den - 2 p_i num) / den^2
        grad = -(2 * target * den - 2 * pred * num) / (den * den)
        return grad_out * grad, None


class _Focal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, pred, target, alpha, gamma):
        p = pred.clamp(FOCAL_CLAMP, 1 - FOCAL_CLAMP)
        pos = target > 0.5
        pt = torch.where(pos, p, 1 - p)
        at = torch.where(pos, torch.full_like(p, alpha), torch.full_like(p, 1 - alpha))
        per_voxel = -at * (1 - pt) ** gamma * torch.log(pt)
        ctx.save_for_backward(pred, p, pt, at, pos)
        ctx.gamma = gamma
        return per_voxel.mean()

    @staticmethod
    def backward(ctx, grad_out):
        pred, p, pt, at, pos = ctx.saved_tensors
        gamma = ctx.gamma
        one_minus = 1 - pt
        # dFL/dpt = at * [gamma (1-pt)^(gamma-1) log(pt) - (1-pt)^gamma / pt]
        if gamma == 0:
            d_pt = -at / pt
        else:
            d_pt = at * (gamma * one_minus ** (gamma - 1) * torch.log(pt) - one_minus ** gamma / pt)
        # pt = p on positives, 1 - p on negatives
        d_p = torch.where(pos, d_pt, -d_pt)
        inside = (pred >= FOCAL_CLAMP) & (pred <= 1 - FOCAL_CLAMP)
        d_p = torch.where(inside, d_p, torch.zeros_like(d_p))
        return grad_out * d_p / pred.numel(), None, None, None


def _tensors(pred, target):
    if not isinstance(pred, torch.Tensor):
        pred = np.asarray(pred, dtype=np.float64)
    pred = torch.as_tensor(pred)
    if not pred.is_floating_point():
        pred = pred.to(torch.float64)
    target = torch.as_tensor(target).to(pred.dtype)
    _check(pred, target)
    return pred, target


def soft_dice_loss(pred, target) -> torch.Tensor:
    """``1 - (2 sum(p q) + eps) / (sum(p^2) + sum(q^2) + eps)`` over all voxels."""
    pred, target = _tensors(pred, target)
    return _SoftDice.apply(pred, target)


def focal_loss(pred, target, params: FocalParams = FocalParams()) -> torch.Tensor:
    """Voxel mean of ``-a_t (1 - p_t)^gamma log(p_t)``."""
    pred, target = _tensors(pred, target)
    return _Focal.apply(pred, target, float(params.alpha), float(params.gamma))


def soft_dice_grad(pred, target) -> np.ndarray:
    """Closed-form gradient of :func:`soft_dice_loss` w.r.t. ``pred``."""
    pred = torch.as_tensor(np.asarray(pred, dtype=np.float64)).requires_grad_(True)
    soft_dice_loss(pred, torch.as_tensor(np.asarray(target, dtype=np.float64))).backward()
    return pred.grad.numpy()


def focal_grad(pred, target, params: FocalParams = FocalParams()) -> np.ndarray:
    pred = torch.as_tensor(np.asarray(pred, dtype=np.float64)).requires_grad_(True)
    focal_loss(pred, torch.as_tensor(np.asarray(target, dtype=np.float64)), params).backward()
    return pred.grad.numpy()


def make_loss(name: str, params: FocalParams | None = None):
    """Return a ``loss(pred, target)`` callable for ``"dice"`` or ``"focal"``."""
    if name == "dice":
        return soft_dice_loss
    if name == "focal":
        params = params or FocalParams()
        return lambda pred, target: focal_loss(pred, target, params)
    raise ValueError(f"unknown loss {name!r}; expected 'dice' or 'focal'")
