"""Camera recovery from predicted Gaussian position maps.

Focal length is estimated per view by minimizing pixel-projection residuals
with Weiszfeld iterations (iteratively reweighted least squares on the L1
objective), poses are solved by masked PnP-RANSAC (6-point DLT hypotheses,
Gauss-Newton polish), and camera rigs are normalized into the first view's
frame for training batches. Pose accuracy is reported as pairwise relative
rotation error plus translation error after similarity alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, SE3Pose, compose, invert, project_points
from .gsmap import mean_masked_distance


class SolverError(RuntimeError):
    """Raised when an iterative solver cannot produce a usable result."""


class PnPSolverError(SolverError):
    """Raised when RANSAC cannot produce a pose with enough inliers."""


@dataclass
class RansacParams:
    seed: int
    iterations: int = 256
    threshold_px: float | None = None  # None: 0.5% of the image diagonal
    min_inliers: int = 12

    def resolve_threshold(self, K: Intrinsics) -> float:
        if self.threshold_px is not None:
            if self.threshold_px <= 0:
                raise ValueError("reprojection threshold must be positive")
            return float(self.threshold_px)
        return 0.005 * float(np.hypot(K.width, K.height))


@dataclass
class PoseErrors:
    rre: float    # mean pairwise relative rotation error, degrees
    rra15: float  # fraction of pairs with RRE < 15 degrees
    rra30: float  # fraction of pairs with RRE < 30 degrees
    te: float     # mean camera-center distance after similarity alignment

    def to_dict(self) -> dict:
        return {"rre": self.rre, "rra15": self.rra15, "rra30": self.rra30, "te": self.te}


# ---------------------------------------------------------------------------
# focal estimation
# ---------------------------------------------------------------------------

def estimate_focal_single(
    X: np.ndarray, mask: np.ndarray, *, return_history: bool = False
):
    """Estimate focal length from a camera-frame point map.

    Minimizes sum_p || (i', j') - f * (X0, X1) / X2 || over masked pixels,
    with (i', j') the pixel coordinates relative to the image center.
    Initialized at the L2 closed form, then Weiszfeld-reweighted for up to
    10 iterations or until |delta f| < 1e-6 * f.
    """
    X = np.asarray(X, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    z = X[..., 2]
    valid = mask & np.all(np.isfinite(X), axis=-1) & (z > 1e-12)
    n = int(valid.sum())
    if n < 8:
        raise ValueError(f"focal estimation needs >= 8 valid pixels with positive depth, got {n}")

    jj, ii = np.nonzero(valid)
    p = np.stack([ii - W / 2.0, jj - H / 2.0], axis=1)
    u = X[valid][:, 0:2] / z[valid][:, None]

    pu = np.einsum("ij,ij->i", p, u)
    uu = np.einsum("ij,ij->i", u, u)
    if uu.sum() < 1e-12 or pu.sum() <= 0:
        raise SolverError("degenerate point directions; focal length unrecoverable")
    f = float(pu.sum() / uu.sum())

    def objective(fv: float) -> float:
        return float(np.linalg.norm(p - fv * u, axis=1).sum())

    history = [objective(f)]
    for _ in range(10):
        r = np.linalg.norm(p - f * u, axis=1)
        w = 1.0 / np.maximum(r, 1e-8)
        f_new = float((w * pu).sum() / (w * uu).sum())
        history.append(objective(f_new))
        converged = abs(f_new - f) < 1e-6 * abs(f_new)
        f = f_new
        if converged:
            break
    if return_history:
        return f, history
    return f


def estimate_focal_multi(per_view_focals: list[float]) -> float:
    """Average the per-view focal estimates into a shared focal length."""
    if len(per_view_focals) == 0:
        raise ValueError("cannot average an empty list of focal estimates")
    focals = np.asarray(per_view_focals, dtype=np.float64)
    if np.any(focals <= 0):
        raise ValueError("focal estimates must be positive")
    return float(focals.mean())


# ---------------------------------------------------------------------------
# PnP masks
# ---------------------------------------------------------------------------

def build_mask_object(alpha: np.ndarray) -> np.ndarray:
    """Foreground mask from an alpha map (object-mode PnP)."""
    return np.asarray(alpha, dtype=np.float64) > 0.5


def build_mask_scene(opacity: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Visibility mask from the decoded opacity map (scene-mode PnP)."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return np.asarray(opacity, dtype=np.float64) > tau


# ---------------------------------------------------------------------------
# PnP-RANSAC
# ---------------------------------------------------------------------------

def _hat(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def _rodrigues(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    Wx = _hat(omega)
    if theta < 1e-10:
        return np.eye(3) + Wx
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * Wx
        + ((1.0 - np.cos(theta)) / theta**2) * (Wx @ Wx)
    )


def _dlt_pose(Xs: np.ndarray, yn: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """6-point DLT for [R|t] mapping reference points to normalized image rays.

    Returns None for degenerate (rank-deficient) samples.
    """
    c3 = Xs.mean(axis=0)
    dev = np.linalg.norm(Xs - c3, axis=1).mean()
    if dev < 1e-12:
        return None
    Xn = (Xs - c3) / dev

    m = Xs.shape[0]
    A = np.zeros((2 * m, 12))
    Xh = np.concatenate([Xn, np.ones((m, 1))], axis=1)
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -yn[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -yn[:, 1:2] * Xh

    _, svals, Vt = np.linalg.svd(A)
    if svals[-2] < 1e-9 * svals[0]:
        return None
    M = Vt[-1].reshape(3, 4)
    B = M[:, :3] / dev
    b = M[:, 3] - (M[:, :3] @ c3) / dev
    if np.linalg.det(B) < 0:
        B, b = -B, -b

    U, S, Vt2 = np.linalg.svd(B)
    if S[-1] < 1e-12 * S[0]:
        return None
    D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U @ Vt2)))])
    R_cw = U @ D @ Vt2
    scale = float(S.mean())
    t_cw = b / scale
    return R_cw, t_cw


def _reprojection_errors(
    Xs: np.ndarray, Ys: np.ndarray, pose: SE3Pose, K: Intrinsics
) -> tuple[np.ndarray, np.ndarray]:
    pix, z = project_points(Xs, pose, K)
    err = np.linalg.norm(pix - Ys, axis=1)
    return err, z


def _gauss_newton_refine(
    Xs: np.ndarray, Ys: np.ndarray, R_cw: np.ndarray, t_cw: np.ndarray, K: Intrinsics,
    *, max_steps: int = 20, damping: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Polish [R_cw|t_cw] by Gauss-Newton on pixel reprojection residuals."""
    n = Xs.shape[0]
    for _ in range(max_steps):
        p = Xs @ R_cw.T + t_cw
        z = p[:, 2]
        if np.any(z <= 1e-9):
            break
        px = K.f * p[:, 0] / z + K.cx
        py = K.f * p[:, 1] / z + K.cy
        r = np.stack([px - Ys[:, 0], py - Ys[:, 1]], axis=1).reshape(-1)

        dpi = np.zeros((n, 2, 3))
        dpi[:, 0, 0] = K.f / z
        dpi[:, 1, 1] = K.f / z
        dpi[:, 0, 2] = -K.f * p[:, 0] / z**2
        dpi[:, 1, 2] = -K.f * p[:, 1] / z**2

        # dp/d(xi) for xi = (dt, omega): dp = dt + omega x p
        dp = np.zeros((n, 3, 6))
        dp[:, :, 0:3] = np.eye(3)
        dp[:, 0, 4] = p[:, 2]
        dp[:, 0, 5] = -p[:, 1]
        dp[:, 1, 3] = -p[:, 2]
        dp[:, 1, 5] = p[:, 0]
        dp[:, 2, 3] = p[:, 1]
        dp[:, 2, 4] = -p[:, 0]

        J = (dpi @ dp).reshape(-1, 6)
        H = J.T @ J + damping * np.eye(6)
        g = J.T @ r
        try:
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            break
        dR = _rodrigues(delta[3:6])
        R_cw = dR @ R_cw
        t_cw = dR @ t_cw + delta[0:3]
        if np.linalg.norm(delta) < 1e-10:
            break
    return R_cw, t_cw


def solve_pnp_ransac(
    X: np.ndarray,
    Y: np.ndarray,
    M: np.ndarray,
    K: Intrinsics,
    params: RansacParams,
) -> tuple[SE3Pose, np.ndarray]:
    """Recover a camera-to-reference pose from a masked point map.

    X: (H, W, 3) points in the reference frame, Y: (H, W, 2) pixel
    coordinates, M: (H, W) validity mask. Hypotheses come from 6-point DLT on
    K-normalized coordinates; the best hypothesis (max inliers, ties broken
    by earliest iteration) is Gauss-Newton refined on its inliers. Returns
    the refined pose and the (H, W) inlier mask under the refined pose.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    M = np.asarray(M, dtype=bool)
    if params.iterations < 1:
        raise ValueError("RANSAC needs at least one iteration")
    threshold = params.resolve_threshold(K)

    valid = M & np.all(np.isfinite(X), axis=-1)
    flat_idx = np.flatnonzero(valid.reshape(-1))
    Xs = X.reshape(-1, 3)[flat_idx]
    Ys = Y.reshape(-1, 2)[flat_idx]
    n = Xs.shape[0]
    if n < max(6, params.min_inliers):
        raise PnPSolverError(
            f"insufficient correspondences: {n} valid, need >= {max(6, params.min_inliers)}"
        )

    yn = (Ys - np.array([K.cx, K.cy])) / K.f
    rng = np.random.default_rng(params.seed)

    best_count = -1
    best_pose: SE3Pose | None = None
    for _ in range(params.iterations):
        hyp = None
        for _attempt in range(20):
            sample = rng.choice(n, size=6, replace=False)
            hyp = _dlt_pose(Xs[sample], yn[sample])
            if hyp is not None:
                break
        if hyp is None:
            continue
        R_cw, t_cw = hyp
        pose = SE3Pose(R_cw.T, -R_cw.T @ t_cw)
        err, z = _reprojection_errors(Xs, Ys, pose, K)
        count = int(((z > 0) & (err < threshold)).sum())
        if count > best_count:
            best_count = count
            best_pose = pose
            if count == n:
                break

    if best_pose is None or best_count < params.min_inliers:
        raise PnPSolverError(
            f"no hypothesis reached {params.min_inliers} inliers "
            f"(best {max(best_count, 0)} of {n})"
        )

    err, z = _reprojection_errors(Xs, Ys, best_pose, K)
    inl = (z > 0) & (err < threshold)
    R_cw = best_pose.R.T
    t_cw = -best_pose.R.T @ best_pose.t
    R_cw, t_cw = _gauss_newton_refine(Xs[inl], Ys[inl], R_cw, t_cw, K)
    refined = SE3Pose(R_cw.T, -R_cw.T @ t_cw)

    err, z = _reprojection_errors(Xs, Ys, refined, K)
    inl = (z > 0) & (err < threshold)
    inlier_mask = np.zeros(X.shape[0] * X.shape[1], dtype=bool)
    inlier_mask[flat_idx[inl]] = True
    return refined, inlier_mask.reshape(X.shape[0], X.shape[1])


# ---------------------------------------------------------------------------
# camera normalization
# ---------------------------------------------------------------------------

def normalize_cameras_object(
    poses: list[SE3Pose], object_center: np.ndarray
) -> tuple[list[SE3Pose], float]:
    """Scale the rig so camera 1 sits at distance 2 from the object center,
    then rebase every pose so the first view's pose is exactly the identity.

    Returns the normalized poses and the applied world scale. The caller must
    apply the same similarity (scale about the origin, then the rebase) to
    scene geometry and depths.
    """
    center = np.asarray(object_center, dtype=np.float64).reshape(3)
    d = float(np.linalg.norm(poses[0].t - center))
    if d < 1e-12:
        raise ValueError("first camera coincides with the object center")
    scale = 2.0 / d
    scaled = [SE3Pose(p.R, scale * p.t) for p in poses]
    inv_first = invert(scaled[0])
    out = [compose(inv_first, p) for p in scaled]
    out[0] = SE3Pose.identity()
    return out, scale


def normalize_cameras_scene(
    poses: list[SE3Pose], pointmaps: list[np.ndarray], masks: list[np.ndarray]
) -> tuple[list[SE3Pose], float]:
    """Rebase poses to the first view and scale so the mean valid-point
    distance to the new origin is 1. Returns (poses, depth scale s); the
    caller must scale ground-truth depths and points by s as well.
    """
    inv_first = invert(poses[0])
    rel = [compose(inv_first, p) for p in poses]
    rel[0] = SE3Pose.identity()
    ref_points = [inv_first.apply(X) for X in pointmaps]
    d = mean_masked_distance(ref_points, masks)
    s = 1.0 / d
    out = [SE3Pose(p.R, s * p.t) for p in rel]
    return out, s


# ---------------------------------------------------------------------------
# pose accuracy metrics
# ---------------------------------------------------------------------------

def _umeyama_similarity(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity (scale, R, t) with dst ~ scale * R @ src + t."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    ds = src - mu_s
    dd = dst - mu_d
    cov = dd.T @ ds / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U @ Vt)))])
    R = U @ S @ Vt
    var_s = float((ds**2).sum() / src.shape[0])
    if var_s < 1e-18:
        scale = 1.0
    else:
        scale = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - scale * (R @ mu_s)
    return scale, R, t


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle in degrees between two rotation matrices."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def pose_errors(pred: list[SE3Pose], gt: list[SE3Pose]) -> PoseErrors:
    """Pairwise relative rotation error statistics plus aligned translation error.

    Predictions live in an arbitrary reference frame and scale, so camera
    centers are similarity-aligned (Umeyama) to the ground truth before the
    translation error is measured; relative rotations need no alignment.
    """
    if len(pred) != len(gt):
        raise ValueError(f"pose list length mismatch: {len(pred)} vs {len(gt)}")
    n = len(pred)
    if n < 2:
        raise ValueError("pose metrics need at least two cameras")

    rres = []
    for a in range(n):
        for b in range(a + 1, n):
            rel_p = pred[a].R.T @ pred[b].R
            rel_g = gt[a].R.T @ gt[b].R
            rres.append(rotation_angle_deg(rel_g, rel_p))
    rres = np.asarray(rres)

    cp = np.stack([p.t for p in pred])
    cg = np.stack([p.t for p in gt])
    scale, R, t = _umeyama_similarity(cp, cg)
    aligned = cp @ (scale * R).T + t
    te = float(np.linalg.norm(aligned - cg, axis=1).mean())

    return PoseErrors(
        rre=float(rres.mean()),
        rra15=float((rres < 15.0).mean()),
        rra30=float((rres < 30.0).mean()),
        te=te,
    )
