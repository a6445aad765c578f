"""Shared learnable initial point for HomoODE.

A single per-channel vector z_tilde of shape (1, 1, c) is broadcast to every
spatial position of every sample's initial state.  It is trained toward the
centroid of the model's equilibria with plain SGD on its own loss, on a slower
schedule than the main optimizer and entirely outside the model's tape.

Layout note: models store states as (batch, c, h, w), so the broadcast
writes z_tilde[0, 0, k] into channel k of that layout.

Loss normalization.  With ``init_loss`` defined as

    L = (1 / (h w)) * sum_c mean_{n, pos} (z*[n, c, pos] - z_tilde[c])^2

one SGD step with learning rate eta moves each channel by

    z_tilde <- alpha * centroid + (1 - alpha) * z_tilde,  alpha = 2 eta / (h w),

where ``centroid`` is the batch-and-spatial mean of z* in that channel.  The
step is clamped to alpha <= 1 (an overshooting update would land on the far
side of the centroid).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .tensor import DimensionError, Tape, Tensor


@dataclass
class SharedInit:
    z_tilde: Tensor
    lr_init: float = 0.02
    update_every: int = 20
    step_counter: int = 0
    updates: int = 0

    @classmethod
    def zeros(cls, channels: int, **kw) -> "SharedInit":
        return cls(Tensor(np.zeros((1, 1, channels)), requires_grad=True), **kw)

    @property
    def channels(self) -> int:
        return self.z_tilde.shape[-1]

    @property
    def vector(self) -> np.ndarray:
        return self.z_tilde.data.reshape(-1)

    def tick(self) -> bool:
        """Count one optimizer step; True when an init update is due."""
        self.step_counter += 1
        return self.update_every > 0 and self.step_counter % self.update_every == 0

    def alpha(self, h: int, w: int) -> float:
        """EMA weight of one update on an h x w feature map (after clamping)."""
        return min(1.0, 2.0 * self.lr_init / (h * w))


def broadcast_init(si: SharedInit, h: int, w: int, batch: int = 1) -> Tensor:
    """Detached (batch, c, h, w) initial state tiled from z_tilde.

    ``h = w = 0`` gives the flat (batch, c) state used by point-data models.
    """
    if h < 0 or w < 0 or (h == 0) != (w == 0):
        raise ValueError("h and w must both be positive (or both 0 for flat states)")
    v = si.vector
    if h == 0:
        return Tensor(np.broadcast_to(v, (batch, v.size)).copy())
    return Tensor(np.broadcast_to(v[None, :, None, None], (batch, v.size, h, w)).copy())


def _spatial(z_star: np.ndarray) -> tuple:
    if z_star.ndim == 4:
        return z_star.shape[2], z_star.shape[3]
    if z_star.ndim == 2:
        return 1, 1
    raise DimensionError(f"equilibrium batch must be (n, c, h, w) or (n, c), got {z_star.shape}")


def init_loss(si: SharedInit, z_star_batch) -> Tensor:
    """Squared distance of the (detached) equilibria to the broadcast init."""
    z = z_star_batch.data if isinstance(z_star_batch, Tensor) else np.asarray(z_star_batch, float)
    h, w = _spatial(z)
    if z.shape[1] != si.channels:
        raise DimensionError(f"equilibria have {z.shape[1]} channels, init has {si.channels}")
    zt = si.z_tilde.reshape(1, si.channels, *((1, 1) if z.ndim == 4 else ()))
    d = Tensor(z) - zt
    axes = (0, 2, 3) if z.ndim == 4 else (0,)
    return (d * d).mean(axis=axes).sum() * (1.0 / (h * w))


def closed_form_update(z_tilde: np.ndarray, z_star_batch: np.ndarray, alpha: float) -> np.ndarray:
    """z_tilde <- alpha * centroid + (1 - alpha) * z_tilde, per channel."""
    z = np.asarray(z_star_batch, float)
    axes = (0, 2, 3) if z.ndim == 4 else (0,)
    centroid = z.mean(axis=axes).reshape(np.shape(z_tilde))
    return alpha * centroid + (1.0 - alpha) * np.asarray(z_tilde, float)


def update_init(si: SharedInit, z_star_batch) -> SharedInit:
    """One SGD step on ``init_loss``; returns ``si`` (updated in place)."""
    z = z_star_batch.data if isinstance(z_star_batch, Tensor) else np.asarray(z_star_batch, float)
    h, w = _spatial(z)
    lr = min(si.lr_init, h * w / 2.0)  # alpha <= 1
    with Tape() as tape:
        loss = init_loss(si, z)
    (g,) = tape.gradient(loss, [si.z_tilde])
    si.z_tilde.data = si.z_tilde.data - lr * g
    si.updates += 1
    return si


class CentroidReport(NamedTuple):
    minimizer: np.ndarray
    mean: np.ndarray
    max_abs_diff: float
    grad_at_mean: np.ndarray
    ok: bool


def centroid_equivalence_check(samples, tol: float = 1e-10) -> CentroidReport:
    """Check that the minimizer of the empirical init loss is the per-channel mean.

    The minimizer is found independently of the closed form: the loss is a
    quadratic in z_tilde, so its exact minimizer comes from one Newton step
    (gradient and Hessian by autodiff) from the origin.
    """
    z = np.asarray(samples.data if isinstance(samples, Tensor) else samples, float)
    c = z.shape[1]
    si = SharedInit.zeros(c)

    with Tape() as tape:
        loss = init_loss(si, z)
    (g0,) = tape.gradient(loss, [si.z_tilde])
    # the Hessian is diagonal: curvature per channel from a unit probe
    probe = SharedInit(Tensor(np.ones((1, 1, c)), requires_grad=True))
    with Tape() as tape:
        loss1 = init_loss(probe, z)
    (g1,) = tape.gradient(loss1, [probe.z_tilde])
    minimizer = (-g0 / (g1 - g0)).reshape(-1)

    axes = (0, 2, 3) if z.ndim == 4 else (0,)
    mean = z.mean(axis=axes)
    at_mean = SharedInit(Tensor(mean.reshape(1, 1, c), requires_grad=True))
    with Tape() as tape:
        lm = init_loss(at_mean, z)
    (gm,) = tape.gradient(lm, [at_mean.z_tilde])
    diff = float(np.max(np.abs(minimizer - mean)))
    return CentroidReport(minimizer, mean, diff, gm.reshape(-1), diff <= tol)
