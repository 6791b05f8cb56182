"""Pose regression losses.

``L_x`` and ``L_q`` are batch means of per-sample residual norms over the
translation block (columns 0-2) and the quaternion block (columns 3-6).
Three ways of combining them are provided:

* fixed weighting ``L_x + beta * L_q``
* homoscedastic uncertainty ``L_x / sx^2 + log sx^2 + L_q / sq^2 + log sq^2``
* the log-variance form ``L_x * exp(-s_x) + s_x + L_q * exp(-s_q) + s_q``
  with ``s = log(sigma^2)``, which is what training minimizes.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import NonPositiveSigma, ShapeMismatch, ValidationError

NORMS = ("l1", "l2")
DEFAULT_BETA = 500.0


def _residual_norms(res: np.ndarray, norm: str) -> np.ndarray:
    if norm == "l1":
        return np.abs(res).sum(axis=1)
    if norm == "l2":
        return np.sqrt((res * res).sum(axis=1))
    raise ValidationError(f"norm must be one of {NORMS}, got {norm!r}")


def _residual_grad(res: np.ndarray, norm: str) -> np.ndarray:
    if norm == "l1":
        return np.sign(res)
    n = np.sqrt((res * res).sum(axis=1, keepdims=True))
    return np.divide(res, n, out=np.zeros_like(res), where=n > 0)


def _check(pred, gt):
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 7:
        raise ShapeMismatch(f"pred {pred.shape} and gt {gt.shape} must both be (N, 7)")
    return pred, gt


def residual_losses(pred, gt, norm: str = "l1") -> tuple[float, float]:
    """Return (L_x, L_q) for a batch."""
    pred, gt = _check(pred, gt)
    res = pred - gt
    lx = _residual_norms(res[:, :3], norm).mean()
    lq = _residual_norms(res[:, 3:], norm).mean()
    return float(lx), float(lq)


def combine_beta(lx: float, lq: float, beta: float = DEFAULT_BETA) -> float:
    if beta <= 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    return lx + beta * lq


def combine_homoscedastic(lx: float, lq: float, sigma_x: float, sigma_q: float) -> float:
    if sigma_x <= 0 or sigma_q <= 0:
        raise NonPositiveSigma(f"sigmas must be positive, got {sigma_x}, {sigma_q}")
    vx, vq = sigma_x * sigma_x, sigma_q * sigma_q
    return lx / vx + math.log(vx) + lq / vq + math.log(vq)


def combine_stable(lx: float, lq: float, s_x: float, s_q: float) -> float:
    return lx * math.exp(-s_x) + s_x + lq * math.exp(-s_q) + s_q


def loss_beta(pred, gt, beta: float = DEFAULT_BETA, norm: str = "l1") -> float:
    return combine_beta(*residual_losses(pred, gt, norm), beta)


def loss_homoscedastic(pred, gt, sigma_x: float, sigma_q: float, norm: str = "l1") -> float:
    return combine_homoscedastic(*residual_losses(pred, gt, norm), sigma_x, sigma_q)


def loss_stable(pred, gt, s_x: float, s_q: float, norm: str = "l1") -> float:
    return combine_stable(*residual_losses(pred, gt, norm), s_x, s_q)


def loss_stable_with_grad(pred, gt, s_x: float, s_q: float, norm: str = "l1"):
    """Loss plus gradients w.r.t. ``pred``, ``s_x`` and ``s_q``."""
    pred, gt = _check(pred, gt)
    n = pred.shape[0]
    res = pred - gt
    lx = _residual_norms(res[:, :3], norm).mean()
    lq = _residual_norms(res[:, 3:], norm).mean()
    wx, wq = math.exp(-s_x), math.exp(-s_q)
    loss = lx * wx + s_x + lq * wq + s_q

    dpred = np.empty_like(res)
    dpred[:, :3] = _residual_grad(res[:, :3], norm) * (wx / n)
    dpred[:, 3:] = _residual_grad(res[:, 3:], norm) * (wq / n)
    ds_x = 1.0 - lx * wx
    ds_q = 1.0 - lq * wq
    return float(loss), dpred, ds_x, ds_q
