"""Rigid transforms, quaternions, and the pinhole camera model.

Conventions used throughout the package:

* Quaternions are ``(w, x, y, z)`` and unit-length after ``quat_normalize``.
* ``SE3Pose`` maps camera-frame points into the reference frame,
  ``x_ref = R @ x_cam + t``.  The reference view's pose is the identity, and
  the camera center expressed in the reference frame is simply ``t``.
* ``Intrinsics`` is a pinhole model with square pixels and the principal
  point fixed at ``(W/2, H/2)``; pixel coordinates are ``(x, y)`` with x along
  image columns and y along rows, sampled at integer grid positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NAN_SENTINEL = float("nan")


class BehindCameraError(ValueError):
    """Raised when a point does not project (camera-frame depth <= 0)."""


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / ||q||. Raises on a near-zero quaternion."""
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise ValueError("cannot normalize a near-zero quaternion")
    return q / n


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Convert a (w, x, y, z) quaternion to a 3x3 rotation matrix.

    The input is normalized first, so any non-zero quaternion is accepted.
    """
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def mat_to_quat(R: np.ndarray) -> np.ndarray:
    """Convert a rotation matrix to a (w, x, y, z) unit quaternion (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b of (w, x, y, z) quaternions."""
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def random_unit_quat(rng: np.random.Generator) -> np.ndarray:
    return quat_normalize(rng.normal(size=4))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) (SVD, det +1)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U @ Vt)))])
    return U @ D @ Vt


# ---------------------------------------------------------------------------
# poses and intrinsics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SE3Pose:
    """Rigid camera-to-reference transform, x_ref = R @ x_cam + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(M: np.ndarray) -> "SE3Pose":
        M = np.asarray(M, dtype=np.float64).reshape(4, 4)
        return SE3Pose(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform camera-frame point(s) of shape (..., 3) into the reference frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.R.T + self.t

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Transform reference-frame point(s) into this camera's frame."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.t) @ self.R

    def orthonormalized(self) -> "SE3Pose":
        return SE3Pose(orthonormalize(self.R), self.t)


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """a then b seen from the outer frame: (a*b).apply(x) == a.apply(b.apply(x))."""
    return SE3Pose(a.R @ b.R, a.R @ b.t + a.t)


def invert(p: SE3Pose) -> SE3Pose:
    return SE3Pose(p.R.T, -p.R.T @ p.t)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: focal length in pixels, centered principal point."""

    f: float
    width: int
    height: int

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError(f"focal length must be positive, got {self.f}")

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]]
        )


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project(point: np.ndarray, pose: SE3Pose, K: Intrinsics) -> tuple[np.ndarray, float]:
    """Project one reference-frame point. Returns ((x, y) pixels, depth).

    Raises BehindCameraError when the camera-frame depth is <= 0.
    """
    p_cam = pose.apply_inverse(np.asarray(point, dtype=np.float64))
    z = float(p_cam[2])
    if z <= 0.0:
        raise BehindCameraError(f"point has non-positive camera depth z={z}")
    pix = np.array([K.f * p_cam[0] / z + K.cx, K.f * p_cam[1] / z + K.cy])
    return pix, z


def project_points(points: np.ndarray, pose: SE3Pose, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (..., 3) points. Returns ((..., 2) pixels, (...,) depths).

    Does not raise on non-positive depth; callers must mask on the returned
    depths. Pixel values for z <= 0 are meaningless.
    """
    p_cam = pose.apply_inverse(points)
    z = p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = K.f * p_cam[..., 0] / z + K.cx
        py = K.f * p_cam[..., 1] / z + K.cy
    return np.stack([px, py], axis=-1), z


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H, W, 2) map of pixel coordinates, entry [j, i] = (i, j)."""
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def unproject_depth(
    depth: np.ndarray, K: Intrinsics, pose: SE3Pose, mask: np.ndarray
) -> np.ndarray:
    """Lift a depth map to a reference-frame point map.

    Invalid pixels (mask false) carry NaN sentinels. Raises on a non-positive
    depth at a masked-in pixel.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    H, W = depth.shape
    if mask.shape != (H, W):
        raise ValueError(f"mask shape {mask.shape} does not match depth shape {depth.shape}")
    if np.any(depth[mask] <= 0):
        raise ValueError("non-positive depth on a masked-in pixel")

    grid = pixel_grid(W, H)
    dirs = np.empty((H, W, 3))
    dirs[..., 0] = (grid[..., 0] - K.cx) / K.f
    dirs[..., 1] = (grid[..., 1] - K.cy) / K.f
    dirs[..., 2] = 1.0
    pts_cam = dirs * depth[..., None]
    pts = pose.apply(pts_cam)
    pts[~mask] = NAN_SENTINEL
    return pts


# ---------------------------------------------------------------------------
# camera JSON (shared with the cli module)
# ---------------------------------------------------------------------------

def cameras_to_json(K: Intrinsics, poses: list[SE3Pose]) -> str:
    payload = {
        "f": float(K.f),
        "width": int(K.width),
        "height": int(K.height),
        "poses": [p.matrix().reshape(16).tolist() for p in poses],
    }
    return json.dumps(payload, indent=2)


def cameras_from_json(text: str) -> tuple[Intrinsics, list[SE3Pose]]:
    payload = json.loads(text)
    try:
        K = Intrinsics(f=float(payload["f"]), width=int(payload["width"]), height=int(payload["height"]))
        raw_poses = payload["poses"]
    except KeyError as e:
        raise ValueError(f"camera JSON missing key: {e}") from e
    poses = []
    for flat in raw_poses:
        if len(flat) != 16:
            raise ValueError(f"camera pose must have 16 entries, got {len(flat)}")
        poses.append(SE3Pose.from_matrix(np.asarray(flat, dtype=np.float64).reshape(4, 4)))
    return K, poses


def save_cameras(path: str | Path, K: Intrinsics, poses: list[SE3Pose]) -> None:
    Path(path).write_text(cameras_to_json(K, poses))


def load_cameras(path: str | Path) -> tuple[Intrinsics, list[SE3Pose]]:
    return cameras_from_json(Path(path).read_text())
