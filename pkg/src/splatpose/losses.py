"""Training objectives with analytic gradients on the position maps.

* position loss: per-pixel L2 distance between masked predicted and
  ground-truth points, averaged over valid pixels.
* alignment loss: one minus the cosine between the camera-origin rays to the
  predicted and ground-truth points, averaged per counted pixel. Exactly
  invariant to positive per-pixel radial rescaling of the prediction.
* render loss: MSE + 0.2 * (1 - SSIM), forward-only, used for evaluation
  and the per-step training report.
* total loss: render + lambda_a * align + [t <= T_max] * lambda_p * position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SE3Pose
from .renderer import RenderOutput

_EPS_NORM = 1e-8
_EPS_DIST = 1e-12

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossWeights:
    lambda_a: float = 1.0
    lambda_p: float = 10.0
    t_max: int = 2000

    def __post_init__(self):
        if self.lambda_a < 0 or self.lambda_p < 0:
            raise ValueError("loss weights must be non-negative")


def _check_shapes(pred: list[np.ndarray], gt: list[np.ndarray]) -> None:
    if len(pred) != len(gt):
        raise ValueError(f"view count mismatch: {len(pred)} vs {len(gt)}")
    for a, b in zip(pred, gt):
        if a.shape != b.shape:
            raise ValueError(f"point map shape mismatch: {a.shape} vs {b.shape}")


def position_loss(
    pred: list[np.ndarray], gt: list[np.ndarray], masks: list[np.ndarray]
) -> tuple[float, list[np.ndarray]]:
    """Masked per-pixel L2 position error, mean-reduced over valid pixels.

    Returns (loss, per-view gradients w.r.t. the predicted maps); gradients
    are zero on masked-out pixels.
    """
    _check_shapes(pred, gt)
    count = sum(int(np.asarray(m, dtype=bool).sum()) for m in masks)
    if count == 0:
        raise ValueError("mask union is empty")

    total = 0.0
    grads = []
    for Xh, X, M in zip(pred, gt, masks):
        M = np.asarray(M, dtype=bool)
        diff = np.where(M[..., None], Xh - X, 0.0)
        dist = np.linalg.norm(diff, axis=-1)
        total += float(dist[M].sum())
        g = diff / (np.maximum(dist, _EPS_DIST)[..., None] * count)
        g[~M] = 0.0
        grads.append(g)
    return total / count, grads


def alignment_loss(
    pred: list[np.ndarray],
    poses: list[SE3Pose],
    gt: list[np.ndarray],
    masks: list[np.ndarray] | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Ray-cosine alignment loss between predicted and ground-truth points.

    Rays go from each view's camera origin to the point; pixels where either
    ray norm falls below 1e-8 contribute zero. With masks given, only masked
    pixels are counted (object-mode training restricts this loss to the
    foreground).
    """
    _check_shapes(pred, gt)
    if masks is None:
        masks = [np.ones(X.shape[:2], dtype=bool) for X in gt]
    count = sum(int(np.asarray(m, dtype=bool).sum()) for m in masks)
    if count == 0:
        raise ValueError("mask union is empty")

    total = 0.0
    grads = []
    for Xh, pose, X, M in zip(pred, poses, gt, masks):
        M = np.asarray(M, dtype=bool)
        t = pose.t
        r_hat = Xh - t
        r = np.where(M[..., None], X - t, 0.0)
        n_hat = np.linalg.norm(r_hat, axis=-1)
        n_ref = np.linalg.norm(r, axis=-1)
        ok = M & (n_hat > _EPS_NORM) & (n_ref > _EPS_NORM)

        dot = np.einsum("...i,...i->...", r_hat, r)
        denom = np.where(ok, n_hat * n_ref, 1.0)
        cos = np.where(ok, dot / denom, 1.0)
        total += float((1.0 - cos)[ok].sum())

        # d(1 - cos)/d(r_hat) = -(r/|r| - cos * r_hat/|r_hat|) / |r_hat|
        unit_hat = r_hat / np.maximum(n_hat, _EPS_NORM)[..., None]
        unit_ref = r / np.maximum(n_ref, _EPS_NORM)[..., None]
        g = -(unit_ref - cos[..., None] * unit_hat) / np.maximum(n_hat, _EPS_NORM)[..., None]
        g[~ok] = 0.0
        grads.append(g / count)
    return total / count, grads


# ---------------------------------------------------------------------------
# image reconstruction loss
# ---------------------------------------------------------------------------

def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _sepconv_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of a 2D image with a 1D kernel."""
    from numpy.lib.stride_tricks import sliding_window_view

    tmp = sliding_window_view(img, k.size, axis=0) @ k
    return sliding_window_view(tmp, k.size, axis=1) @ k


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5),
    k1=0.01, k2=0.03, unit dynamic range, valid windows only, averaged over
    channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")

    k = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = _sepconv_valid(x, k)
        mu_y = _sepconv_valid(y, k)
        sxx = _sepconv_valid(x * x, k) - mu_x * mu_x
        syy = _sepconv_valid(y * y, k) - mu_y * mu_y
        sxy = _sepconv_valid(x * y, k) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def render_loss(rendered: RenderOutput, target: np.ndarray) -> float:
    """MSE + 0.2 * (1 - SSIM) between the rendered color and a target image."""
    target = np.asarray(target, dtype=np.float64)
    if rendered.color.shape != target.shape:
        raise ValueError(f"resolution mismatch: {rendered.color.shape} vs {target.shape}")
    mse = float(np.mean((rendered.color - target) ** 2))
    return mse + 0.2 * (1.0 - ssim(rendered.color, target))


def total_loss(
    step: int, render: float, align: float, position: float, weights: LossWeights
) -> float:
    """Combine the loss components for a given training step; the position
    term is included only while step <= t_max (inclusive)."""
    out = render + weights.lambda_a * align
    if step <= weights.t_max:
        out += weights.lambda_p * position
    return out
