"""Forward software splatting rasterizer.

3D Gaussians are projected to screen-space 2D Gaussians with the perspective
Jacobian, then composited per pixel front-to-back in ascending camera-frame
depth (ties broken by input index). A 3-sigma elliptical footprint bounds
each splat and per-splat alpha is clamped to ALPHA_MAX.

The rasterizer is forward-only (no gradients) and deterministic: identical
inputs produce bitwise-identical buffers. Designed for desk-scale
resolutions (<= 256 x 256) where a per-pixel exact depth sort is affordable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import BehindCameraError, Intrinsics, SE3Pose
from .gsmap import GaussianCloud, GaussianPrimitive

logger = logging.getLogger(__name__)

NEAR_PLANE = 0.01
COV_REGULARIZER = 0.1  # pixels^2, added to the projected covariance diagonal
ALPHA_MAX = 0.999
FOOTPRINT_SIGMA = 3.0
_T_CUTOFF = 1e-14  # stop compositing a pixel once transmittance is exhausted
_DEPTH_EPS = 1e-12


@dataclass
class RenderOutput:
    """Color, alpha, and alpha-weighted expected depth buffers."""

    color: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W) in [0, 1]
    depth: np.ndarray  # (H, W), scene units
    background: np.ndarray  # (3,)


def _as_cloud(prims) -> GaussianCloud:
    if isinstance(prims, GaussianCloud):
        return prims
    if isinstance(prims, GaussianPrimitive):
        return GaussianCloud.from_primitives([prims])
    return GaussianCloud.from_primitives(list(prims))


def _quats_to_mats(q: np.ndarray) -> np.ndarray:
    """(K, 4) unit quaternions -> (K, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _project_cloud(
    cloud: GaussianCloud, pose: SE3Pose, K: Intrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project all Gaussians. Returns (means2 (K,2), cov2 (K,2,2), depth (K,), valid (K,))."""
    W_rot = pose.R.T  # world (reference) -> camera rotation
    p_cam = (cloud.mu - pose.t) @ pose.R
    z = p_cam[:, 2]
    valid = z > NEAR_PLANE

    Rk = _quats_to_mats(cloud.r)
    cov3 = Rk * (cloud.s**2)[:, None, :] @ np.swapaxes(Rk, 1, 2)

    zs = np.where(valid, z, 1.0)  # placeholder depth avoids divide warnings
    J = np.zeros((len(cloud), 2, 3))
    J[:, 0, 0] = K.f / zs
    J[:, 1, 1] = K.f / zs
    J[:, 0, 2] = -K.f * p_cam[:, 0] / zs**2
    J[:, 1, 2] = -K.f * p_cam[:, 1] / zs**2

    M = J @ W_rot
    cov2 = M @ cov3 @ np.swapaxes(M, 1, 2)
    cov2[:, 0, 0] += COV_REGULARIZER
    cov2[:, 1, 1] += COV_REGULARIZER

    means2 = np.stack([K.f * p_cam[:, 0] / zs + K.cx, K.f * p_cam[:, 1] / zs + K.cy], axis=1)
    return means2, cov2, z, valid


def project_gaussian(
    prim: GaussianPrimitive, pose: SE3Pose, K: Intrinsics
) -> tuple[np.ndarray, np.ndarray, float]:
    """Project one Gaussian to (2D mean, 2x2 covariance, camera depth).

    Raises BehindCameraError if the center is behind the near plane.
    """
    cloud = GaussianCloud.from_primitives([prim])
    means2, cov2, z, valid = _project_cloud(cloud, pose, K)
    if not valid[0]:
        raise BehindCameraError(f"Gaussian behind near plane (z={z[0]:.4g})")
    return means2[0], cov2[0], float(z[0])


def render(
    prims,
    pose: SE3Pose,
    K: Intrinsics,
    height: int,
    width: int,
    background: np.ndarray,
) -> RenderOutput:
    """Rasterize Gaussians into color, alpha, and expected-depth buffers."""
    cloud = _as_cloud(prims)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    npix = height * width

    acc_color = np.zeros((npix, 3))
    acc_depth = np.zeros(npix)
    transmit = np.ones(npix)

    if len(cloud) > 0:
        means2, cov2, z, valid = _project_cloud(cloud, pose, K)
        skipped = int((~valid).sum())
        if skipped:
            logger.debug("render: skipped %d Gaussians behind the near plane", skipped)
        idx = np.flatnonzero(valid)
        frag = _make_fragments(
            means2[idx], cov2[idx], z[idx], cloud.o[idx], cloud.c[idx], idx, height, width
        )
        if frag is not None:
            pix, depth, alpha, color, gid = frag
            order = np.lexsort((gid, depth, pix))
            _composite(
                pix[order], depth[order], alpha[order], color[order],
                acc_color, acc_depth, transmit,
            )

    color = acc_color + transmit[:, None] * bg
    alpha = 1.0 - transmit
    depth = acc_depth / np.maximum(alpha, _DEPTH_EPS)
    return RenderOutput(
        color=color.reshape(height, width, 3),
        alpha=alpha.reshape(height, width),
        depth=depth.reshape(height, width),
        background=bg,
    )


def _make_fragments(means2, cov2, z, opacity, color, gid, height, width):
    """Expand each splat's 3-sigma bounding box into per-pixel fragments."""
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    inv_a = cov2[:, 1, 1] / det
    inv_b = -cov2[:, 0, 1] / det
    inv_c = cov2[:, 0, 0] / det

    rx = FOOTPRINT_SIGMA * np.sqrt(cov2[:, 0, 0])
    ry = FOOTPRINT_SIGMA * np.sqrt(cov2[:, 1, 1])
    x0 = np.clip(np.ceil(means2[:, 0] - rx), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(means2[:, 0] + rx) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.ceil(means2[:, 1] - ry), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(means2[:, 1] + ry) + 1, 0, height).astype(np.int64)
    w = np.maximum(x1 - x0, 0)
    h = np.maximum(y1 - y0, 0)
    counts = w * h
    total = int(counts.sum())
    if total == 0:
        return None

    rep = np.repeat(np.arange(len(counts)), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - offsets[rep]
    px = x0[rep] + local % w[rep]
    py = y0[rep] + local // w[rep]

    dx = px - means2[rep, 0]
    dy = py - means2[rep, 1]
    quad = inv_a[rep] * dx * dx + 2.0 * inv_b[rep] * dx * dy + inv_c[rep] * dy * dy
    keep = quad <= FOOTPRINT_SIGMA**2
    if not np.any(keep):
        return None
    rep = rep[keep]
    alpha = np.minimum(opacity[rep] * np.exp(-0.5 * quad[keep]), ALPHA_MAX)
    pix = py[keep] * width + px[keep]
    return pix, z[rep], alpha, color[rep], gid[rep]


def _composite(pix, depth, alpha, color, acc_color, acc_depth, transmit):
    """Front-to-back alpha compositing of depth-sorted fragments.

    Fragments must be sorted by (pixel, depth, index). Processes one depth
    rank per round across all pixels; a pixel drops out once its residual
    transmittance falls below _T_CUTOFF.
    """
    n = pix.shape[0]
    new_seg = np.empty(n, dtype=bool)
    new_seg[0] = True
    new_seg[1:] = pix[1:] != pix[:-1]
    seg_start = np.flatnonzero(new_seg)
    seg_pix = pix[seg_start]
    seg_len = np.diff(np.append(seg_start, n))

    alive = np.arange(seg_start.shape[0])
    k = 0
    while alive.size:
        alive = alive[seg_len[alive] > k]
        if alive.size == 0:
            break
        pos = seg_start[alive] + k
        pxs = seg_pix[alive]
        a = alpha[pos]
        t_cur = transmit[pxs]
        wgt = t_cur * a
        acc_color[pxs] += wgt[:, None] * color[pos]
        acc_depth[pxs] += wgt * depth[pos]
        t_new = t_cur * (1.0 - a)
        transmit[pxs] = t_new
        alive = alive[t_new > _T_CUTOFF]
        k += 1
