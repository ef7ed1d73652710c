"""Procedural blob scenes that double as exact ground-truth oracles.

Scenes are themselves sets of Gaussian primitives, so rendered images,
alpha masks, expected depths, and unprojected point maps are consistent by
construction: every stored point map is exactly the unprojection of the
stored depth map under the stored (normalized) cameras.

Dataset layout on disk:

    scene_0000/
        view_0.png  view_0_depth.pfm  view_0_mask.png  ...
        cameras.json
        meta.json       (seed, mode, normalization scale)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio
from .calib import normalize_cameras_object, normalize_cameras_scene
from .geometry import (
    Intrinsics,
    SE3Pose,
    invert,
    load_cameras,
    mat_to_quat,
    quat_mul,
    save_cameras,
    unproject_depth,
)
from .gsmap import GaussianCloud
from .renderer import render

OBJECT_CENTER = np.zeros(3)
WHITE = np.ones(3)
BLACK = np.zeros(3)

MASK_ALPHA_THRESHOLD = 0.5


@dataclass
class SynthScene:
    cloud: GaussianCloud
    object_center: np.ndarray
    bounding_radius: float
    seed: int


@dataclass
class DatasetSample:
    """One multi-view training tuple in the normalized reference frame."""

    images: np.ndarray        # (N, H, W, 3)
    depths: np.ndarray        # (N, H, W), normalized scale
    masks: np.ndarray         # (N, H, W) bool, alpha > 0.5
    pointmaps: np.ndarray     # (N, H, W, 3), NaN where invalid
    poses: list[SE3Pose]      # normalized, poses[0] == identity
    K: Intrinsics
    mode: str                 # "object" | "scene"
    scale: float              # world scale applied by normalization
    seed: int

    @property
    def background(self) -> np.ndarray:
        return WHITE if self.mode == "object" else BLACK


def make_scene(seed: int, blob_count: int = 6) -> SynthScene:
    """Sample colored ellipsoidal blobs inside the unit cube."""
    if blob_count < 1:
        raise ValueError("need at least one blob")
    rng = np.random.default_rng(seed)
    mu = rng.uniform(-1.0, 1.0, size=(blob_count, 3))
    s = rng.uniform(0.05, 0.3, size=(blob_count, 3))
    q = rng.normal(size=(blob_count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    o = rng.uniform(0.7, 1.0, size=blob_count)
    # colors stay clear of white so foreground pixels are separable from the
    # white object-mode background
    c = rng.uniform(0.0, 0.85, size=(blob_count, 3))
    cloud = GaussianCloud(mu=mu, r=q, s=s, o=o, c=c)
    return SynthScene(
        cloud=cloud,
        object_center=OBJECT_CENTER.copy(),
        bounding_radius=float(np.sqrt(3.0)),
        seed=seed,
    )


def look_at(camera_center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> SE3Pose:
    """Camera-to-world pose whose +z axis points from the center at the target."""
    center = np.asarray(camera_center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera center coincides with the look-at target")
    z = fwd / n
    upv = np.asarray(up, dtype=np.float64)
    x = np.cross(z, upv)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("up vector is parallel to the viewing direction")
    x /= nx
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return SE3Pose(R, center)


def sample_orbit_cameras(
    n: int,
    elevation_deg: float = 20.0,
    radius: float = 2.5,
    seed: int | None = None,
    structured: bool = True,
) -> list[SE3Pose]:
    """Cameras on an orbit around the object center, all looking at it.

    Structured mode spaces azimuths evenly starting at 0; random mode draws
    them uniformly (seeded).
    """
    if n < 1:
        raise ValueError("need at least one camera")
    if radius <= 0:
        raise ValueError("orbit radius must be positive")
    if structured:
        az = np.arange(n) * (2.0 * np.pi / n)
    else:
        rng = np.random.default_rng(seed)
        az = rng.uniform(0.0, 2.0 * np.pi, size=n)
    el = np.radians(elevation_deg)
    poses = []
    for a in az:
        center = radius * np.array([np.cos(a) * np.cos(el), np.sin(a) * np.cos(el), np.sin(el)])
        poses.append(look_at(center, OBJECT_CENTER))
    return poses


def _transform_cloud(cloud: GaussianCloud, scale: float, frame: SE3Pose) -> GaussianCloud:
    """Scale the world about the origin, then express it in `frame`
    (apply inverse of frame to points, rotate orientations along)."""
    inv = invert(frame)
    mu = inv.apply(scale * cloud.mu)
    q_frame = mat_to_quat(inv.R)
    r = np.stack([quat_mul(q_frame, cloud.r[k]) for k in range(len(cloud))])
    return GaussianCloud(mu=mu, r=r, s=scale * cloud.s, o=cloud.o.copy(), c=cloud.c.copy())


def render_dataset(
    scene: SynthScene,
    cameras: list[SE3Pose],
    K: Intrinsics,
    mode: str = "object",
) -> DatasetSample:
    """Render all views and package a normalized ground-truth sample.

    Renders happen in the original world frame; poses, depths, and point
    maps are then normalized (object: first camera at distance 2 from the
    center, scene: unit mean point distance). Images are unaffected by the
    normalization, which is a similarity transform of the whole world.
    """
    if mode not in ("object", "scene"):
        raise ValueError(f"unknown mode: {mode}")
    bg = WHITE if mode == "object" else BLACK
    H, W = K.height, K.width

    images = np.empty((len(cameras), H, W, 3))
    depths = np.empty((len(cameras), H, W))
    masks = np.empty((len(cameras), H, W), dtype=bool)
    for k, cam in enumerate(cameras):
        out = render(scene.cloud, cam, K, H, W, bg)
        images[k] = out.color
        depths[k] = out.depth
        masks[k] = out.alpha > MASK_ALPHA_THRESHOLD
    if not masks.any():
        raise ValueError("unusable sample: no view has any valid (alpha > 0.5) pixels")

    if mode == "object":
        poses, scale = normalize_cameras_object(cameras, scene.object_center)
        depths = depths * scale
    else:
        raw_points = [
            unproject_depth(depths[k], K, cameras[k], masks[k]) for k in range(len(cameras))
        ]
        poses, scale = normalize_cameras_scene(cameras, raw_points, list(masks))
        depths = depths * scale

    pointmaps = np.stack(
        [unproject_depth(depths[k], K, poses[k], masks[k]) for k in range(len(cameras))]
    )
    return DatasetSample(
        images=images,
        depths=depths,
        masks=masks,
        pointmaps=pointmaps,
        poses=poses,
        K=K,
        mode=mode,
        scale=float(scale),
        seed=scene.seed,
    )


def normalized_scene_cloud(scene: SynthScene, cameras: list[SE3Pose], sample: DatasetSample) -> GaussianCloud:
    """The scene's primitives expressed in the sample's normalized frame."""
    first_scaled = SE3Pose(cameras[0].R, sample.scale * cameras[0].t)
    return _transform_cloud(scene.cloud, sample.scale, first_scaled)


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------

def save_sample(directory: str | Path, sample: DatasetSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k in range(sample.images.shape[0]):
        imgio.write_png(d / f"view_{k}.png", sample.images[k])
        imgio.write_pfm(d / f"view_{k}_depth.pfm", np.nan_to_num(sample.depths[k]))
        imgio.write_mask_png(d / f"view_{k}_mask.png", sample.masks[k])
    save_cameras(d / "cameras.json", sample.K, sample.poses)
    meta = {
        "seed": sample.seed,
        "mode": sample.mode,
        "scale": sample.scale,
        "views": int(sample.images.shape[0]),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2))


def load_sample(directory: str | Path) -> DatasetSample:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    K, poses = load_cameras(d / "cameras.json")
    n = meta["views"]
    images = np.stack([imgio.read_png(d / f"view_{k}.png") for k in range(n)])
    depths = np.stack(
        [imgio.read_pfm(d / f"view_{k}_depth.pfm").astype(np.float64) for k in range(n)]
    )
    masks = np.stack([imgio.read_mask_png(d / f"view_{k}_mask.png") for k in range(n)])
    pointmaps = np.stack(
        [unproject_depth(depths[k], K, poses[k], masks[k]) for k in range(n)]
    )
    return DatasetSample(
        images=images,
        depths=depths,
        masks=masks,
        pointmaps=pointmaps,
        poses=poses,
        K=K,
        mode=meta["mode"],
        scale=float(meta["scale"]),
        seed=int(meta["seed"]),
    )


def generate_dataset(
    out_dir: str | Path,
    *,
    scenes: int,
    views: int,
    seed: int,
    mode: str = "object",
    resolution: int = 32,
    focal: float = 24.0,
    blobs_min: int = 3,
    blobs_max: int = 10,
    structured: bool = False,
    elevation_deg: float = 20.0,
    radius: float = 2.5,
) -> None:
    """Write `scenes` independent samples under out_dir/scene_<id>/."""
    if scenes < 1:
        raise ValueError("scene count must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    K = Intrinsics(f=focal, width=resolution, height=resolution)
    master = np.random.default_rng(seed)
    for idx in range(scenes):
        scene_seed = int(master.integers(0, 2**31 - 1))
        cam_seed = int(master.integers(0, 2**31 - 1))
        blobs = int(master.integers(blobs_min, blobs_max + 1))
        scene = make_scene(scene_seed, blobs)
        cameras = sample_orbit_cameras(
            views, elevation_deg=elevation_deg, radius=radius,
            seed=cam_seed, structured=structured,
        )
        sample = render_dataset(scene, cameras, K, mode)
        save_sample(out / f"scene_{idx:04d}", sample)
    manifest = {
        "scenes": scenes,
        "views": views,
        "seed": seed,
        "mode": mode,
        "resolution": resolution,
        "focal": focal,
        "structured": structured,
    }
    (out / "meta.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(directory: str | Path) -> list[DatasetSample]:
    d = Path(directory)
    scene_dirs = sorted(p for p in d.iterdir() if p.is_dir() and p.name.startswith("scene_"))
    if not scene_dirs:
        raise ValueError(f"no scene_* directories under {d}")
    return [load_sample(p) for p in scene_dirs]
