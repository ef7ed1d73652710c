"""Command-line surface: synth, train, reconstruct, render, eval-pose, eval-nvs.

Every command is deterministic given its --seed. Commands accept a TOML
config file (--config) whose keys mirror the flag names; explicit flags
override file values. Exit codes: 0 success, 1 usage, 2 data error,
3 solver failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import imgio, losses, model, synth
from .calib import (
    PnPSolverError,
    RansacParams,
    SolverError,
    build_mask_scene,
    estimate_focal_multi,
    estimate_focal_single,
    pose_errors,
    solve_pnp_ransac,
)
from .geometry import Intrinsics, SE3Pose, load_cameras, pixel_grid, save_cameras
from .gsmap import GaussianCloud, ply_read, ply_write
from .losses import LossWeights
from .renderer import render

WHITE_FG_THRESHOLD = 0.1


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configs and TOML round trip
# ---------------------------------------------------------------------------

def config_to_toml(cfg) -> str:
    """Serialize a flat run-config dataclass to TOML."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, bool):
            s = "true" if v else "false"
        elif isinstance(v, (int, np.integer)):
            s = str(int(v))
        elif isinstance(v, float):
            s = repr(float(v))
            if "." not in s and "e" not in s and "inf" not in s and "nan" not in s:
                s += ".0"
        elif isinstance(v, str):
            s = json.dumps(v)
        else:
            raise TypeError(f"unsupported config field type for {f.name}: {type(v)}")
        lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"


def config_from_toml(cls, text: str):
    data = tomllib.loads(text)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    return cls(**data)


def _merge_config(cls, args: argparse.Namespace):
    """defaults < config file < explicit flags."""
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        file_cfg = tomllib.loads(path.read_text())
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(file_cfg) - names
        if unknown:
            raise DataError(f"unknown config keys in {path}: {sorted(unknown)}")
        values.update(file_cfg)
    for f in dataclasses.fields(cls):
        flag_val = getattr(args, f.name, None)
        if flag_val is not None:
            values[f.name] = flag_val
    return cls(**values)


@dataclass
class SynthConfig:
    out: str = "dataset"
    scenes: int = 8
    views: int = 4
    seed: int = 0
    mode: str = "object"
    resolution: int = 32
    focal: float = 24.0
    blobs_min: int = 3
    blobs_max: int = 10
    structured: bool = False
    elevation: float = 20.0
    radius: float = 2.5
    force: bool = False


@dataclass
class TrainConfig:
    data: str = "dataset"
    out: str = "checkpoint.bin"
    log: str = "train_log.jsonl"
    steps: int = 5000
    seed: int = 0
    lr: float = 5e-3
    warmup: int = 100
    batch_scenes: int = 1
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    patch: int = 4
    lambda_a: float = 1.0
    lambda_p: float = 10.0
    t_max: int = 2000
    appearance_weight: float = 1.0
    rotate_reference: bool = True
    render_log_every: int = 1


@dataclass
class ReconstructConfig:
    checkpoint: str = "checkpoint.bin"
    out: str = "recon"
    seed: int = 0
    tau: float = 0.5
    ransac_iterations: int = 256
    ransac_threshold: float = 0.0  # 0: default 0.5% of the image diagonal
    min_inliers: int = 12


@dataclass
class RenderConfig:
    ply: str = "gaussians.ply"
    out: str = "render.png"
    camera: str = ""       # cameras.json; empty: use explicit flags below
    view: int = 0
    focal: float = 0.0
    width: int = 0
    height: int = 0
    pose: str = ""         # 16 comma-separated row-major floats, default identity
    background: str = "white"
    depth_out: str = ""
    alpha_out: str = ""


@dataclass
class EvalPoseConfig:
    pred: str = ""
    gt: str = ""
    out: str = ""


@dataclass
class EvalNvsConfig:
    pred: str = ""
    gt: str = ""
    out: str = ""
    resolution: int = 0  # 0: native


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def foreground_mask_from_image(image: np.ndarray, threshold: float = WHITE_FG_THRESHOLD) -> np.ndarray:
    """Foreground of a white-background image: pixels that are clearly
    non-white in at least one channel. Desk-scale substitute for a
    background-removal tool."""
    return (1.0 - np.asarray(image).min(axis=-1)) > threshold


def _parse_background(s: str) -> np.ndarray:
    if s == "white":
        return np.ones(3)
    if s == "black":
        return np.zeros(3)
    try:
        vals = [float(v) for v in s.split(",")]
    except ValueError:
        raise DataError(f"unrecognized background: {s!r}") from None
    if len(vals) != 3:
        raise DataError("background must be 'white', 'black', or 'r,g,b'")
    return np.asarray(vals, dtype=np.float64)


def psnr(mse: float) -> float:
    if mse <= 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _json_safe(v: float):
    return "inf" if np.isinf(v) else v


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: SynthConfig) -> int:
    out = Path(cfg.out)
    if out.exists() and any(out.iterdir()) and not cfg.force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    if cfg.scenes < 1:
        raise DataError("scene count must be at least 1")
    if cfg.mode not in ("object", "scene"):
        raise DataError(f"unknown mode: {cfg.mode}")
    synth.generate_dataset(
        out,
        scenes=cfg.scenes,
        views=cfg.views,
        seed=cfg.seed,
        mode=cfg.mode,
        resolution=cfg.resolution,
        focal=cfg.focal,
        blobs_min=cfg.blobs_min,
        blobs_max=cfg.blobs_max,
        structured=cfg.structured,
        elevation_deg=cfg.elevation,
        radius=cfg.radius,
    )
    print(f"wrote {cfg.scenes} scenes to {out}")
    return 0


def cmd_train(cfg: TrainConfig) -> int:
    samples = synth.load_dataset(cfg.data)
    sample = samples[0]
    mode = sample.mode
    config = model.ModelConfig(
        layers=cfg.layers,
        d_model=cfg.d_model,
        heads=cfg.heads,
        patch=cfg.patch,
        height=sample.images.shape[1],
        width=sample.images.shape[2],
    )
    store = model.init_params(config, seed=cfg.seed, mode=mode)
    weights = LossWeights(lambda_a=cfg.lambda_a, lambda_p=cfg.lambda_p, t_max=cfg.t_max)
    settings = model.TrainSettings(
        steps=cfg.steps,
        seed=cfg.seed,
        lr=cfg.lr,
        warmup_steps=cfg.warmup,
        batch_scenes=cfg.batch_scenes,
        appearance_weight=cfg.appearance_weight,
        rotate_reference=cfg.rotate_reference,
        mode=mode,
        log_render_every=cfg.render_log_every,
    )
    store, log = model.train(store, config, samples, weights, settings)
    meta = {"mode": mode, "seed": cfg.seed, "steps": cfg.steps}
    model.save_checkpoint(cfg.out, store, config, meta)
    with open(cfg.log, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec) + "\n")
    print(f"trained {cfg.steps} steps; checkpoint at {cfg.out}, log at {cfg.log}")
    return 0


def reconstruct_views(
    store: model.ParameterStore,
    config: model.ModelConfig,
    mode: str,
    images: np.ndarray,
    *,
    seed: int,
    tau: float = 0.5,
    ransac_iterations: int = 256,
    ransac_threshold: float | None = None,
    min_inliers: int = 12,
):
    """Core of the reconstruct command: joint forward, per-view monocular
    focal estimation, mode-dependent masks, PnP per non-reference view.

    Returns (maps, cloud, K, poses, focal, per-view status list).
    """
    n = images.shape[0]
    maps = model.forward(store, config, images)

    focals = []
    for k in range(n):
        mono = model.forward(store, config, images[k:k + 1])[0]
        if mode == "object":
            fmask = foreground_mask_from_image(images[k])
        else:
            fmask = build_mask_scene(mono.opacity_map(), tau)
        focals.append(estimate_focal_single(mono.positions(), fmask))
    focal = estimate_focal_multi(focals)
    K = Intrinsics(f=focal, width=images.shape[2], height=images.shape[1])

    grid = pixel_grid(K.width, K.height)
    poses: list[SE3Pose] = [SE3Pose.identity()]
    status = [{"view": 0, "status": "reference", "inliers": None}]
    for k in range(1, n):
        if mode == "object":
            pnp_mask = foreground_mask_from_image(images[k])
        else:
            pnp_mask = build_mask_scene(maps[k].opacity_map(), tau)
        params = RansacParams(
            seed=seed + k,
            iterations=ransac_iterations,
            threshold_px=ransac_threshold,
            min_inliers=min_inliers,
        )
        try:
            pose, inliers = solve_pnp_ransac(maps[k].positions(), grid, pnp_mask, K, params)
            poses.append(pose)
            status.append({"view": k, "status": "ok", "inliers": int(inliers.sum())})
        except PnPSolverError as e:
            poses.append(SE3Pose.identity())
            status.append({"view": k, "status": f"failed: {e}", "inliers": 0})

    cloud = GaussianCloud.concatenate([m.cloud() for m in maps])
    return maps, cloud, K, poses, focal, status


def cmd_reconstruct(cfg: ReconstructConfig, image_paths: list[str]) -> int:
    if not image_paths:
        raise DataError("reconstruct needs at least one input image")
    store, config, meta = model.load_checkpoint(cfg.checkpoint)
    mode = meta.get("mode", "object")

    imgs = [imgio.read_png(p) for p in image_paths]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise DataError(f"input images have mismatched sizes: {sorted(shapes)}")
    images = np.stack(imgs)
    if images.shape[1] != config.height or images.shape[2] != config.width:
        raise DataError(
            f"image size {images.shape[1]}x{images.shape[2]} does not match "
            f"checkpoint config {config.height}x{config.width}"
        )

    maps, cloud, K, poses, focal, status = reconstruct_views(
        store, config, mode, images,
        seed=cfg.seed,
        tau=cfg.tau,
        ransac_iterations=cfg.ransac_iterations,
        ransac_threshold=cfg.ransac_threshold if cfg.ransac_threshold > 0 else None,
        min_inliers=cfg.min_inliers,
    )

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ply_write(out / "gaussians.ply", cloud)
    save_cameras(out / "cameras.json", K, poses)
    report = {"focal": focal, "mode": mode, "per_view": status}
    (out / "report.json").write_text(json.dumps(report, indent=2))

    failures = [s for s in status if str(s["status"]).startswith("failed")]
    for s in failures:
        print(f"view {s['view']}: {s['status']}", file=sys.stderr)
    print(f"reconstructed {len(poses)} views (f={focal:.3f}) into {out}")
    if failures:
        raise PnPSolverError(f"{len(failures)} view(s) failed pose solving")
    return 0


def cmd_render(cfg: RenderConfig) -> int:
    cloud = ply_read(cfg.ply)
    if cfg.camera:
        K, poses = load_cameras(cfg.camera)
        if not 0 <= cfg.view < len(poses):
            raise DataError(f"view index {cfg.view} out of range (0..{len(poses) - 1})")
        pose = poses[cfg.view]
    else:
        if cfg.focal <= 0 or cfg.width <= 0 or cfg.height <= 0:
            raise DataError("without --camera, provide --focal, --width, and --height")
        K = Intrinsics(f=cfg.focal, width=cfg.width, height=cfg.height)
        if cfg.pose:
            vals = [float(v) for v in cfg.pose.split(",")]
            if len(vals) != 16:
                raise DataError("--pose needs 16 comma-separated floats (row-major 4x4)")
            pose = SE3Pose.from_matrix(np.asarray(vals).reshape(4, 4))
        else:
            pose = SE3Pose.identity()

    bg = _parse_background(cfg.background)
    out = render(cloud, pose, K, K.height, K.width, bg)
    imgio.write_png(cfg.out, out.color)
    if cfg.depth_out:
        imgio.write_pfm(cfg.depth_out, out.depth)
    if cfg.alpha_out:
        imgio.write_pfm(cfg.alpha_out, out.alpha)
    print(f"rendered {len(cloud)} Gaussians to {cfg.out}")
    return 0


def cmd_eval_pose(cfg: EvalPoseConfig) -> int:
    if not cfg.pred or not cfg.gt:
        raise DataError("eval-pose needs --pred and --gt camera files")
    _, pred = load_cameras(cfg.pred)
    _, gt = load_cameras(cfg.gt)
    errs = pose_errors(pred, gt)
    payload = json.dumps(errs.to_dict())
    if cfg.out:
        Path(cfg.out).write_text(payload)
    print(payload)
    return 0


def cmd_eval_nvs(cfg: EvalNvsConfig) -> int:
    if not cfg.pred or not cfg.gt:
        raise DataError("eval-nvs needs --pred and --gt directories")
    pred_dir, gt_dir = Path(cfg.pred), Path(cfg.gt)
    names = sorted(p.name for p in gt_dir.glob("*.png"))
    if not names:
        raise DataError(f"no PNG files in {gt_dir}")
    mses = []
    ssims = []
    for name in names:
        pp = pred_dir / name
        if not pp.exists():
            raise DataError(f"missing prediction for {name}")
        a = imgio.read_png(pp)
        b = imgio.read_png(gt_dir / name)
        if cfg.resolution:
            a = _resize(a, cfg.resolution)
            b = _resize(b, cfg.resolution)
        if a.shape != b.shape:
            raise DataError(f"shape mismatch for {name}: {a.shape} vs {b.shape}")
        mses.append(float(np.mean((a - b) ** 2)))
        ssims.append(losses.ssim(a, b))
    result = {"psnr": _json_safe(psnr(float(np.mean(mses)))), "ssim": float(np.mean(ssims))}
    payload = json.dumps(result)
    if cfg.out:
        Path(cfg.out).write_text(payload)
    print(payload)
    return 0


def _resize(img: np.ndarray, resolution: int) -> np.ndarray:
    from PIL import Image

    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr, mode="RGB").resize((resolution, resolution), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="TOML config file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splatpose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    _add_config_flag(p)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", type=str, default=None, choices=["object", "scene"])
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--focal", type=float, default=None)
    p.add_argument("--blobs-min", dest="blobs_min", type=int, default=None)
    p.add_argument("--blobs-max", dest="blobs_max", type=int, default=None)
    p.add_argument("--structured", action="store_const", const=True, default=None)
    p.add_argument("--elevation", type=float, default=None)
    p.add_argument("--radius", type=float, default=None)
    p.add_argument("--force", action="store_const", const=True, default=None)

    p = sub.add_parser("train", help="train the reconstruction model")
    _add_config_flag(p)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--log", type=str, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--batch-scenes", dest="batch_scenes", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--d-model", dest="d_model", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--lambda-a", dest="lambda_a", type=float, default=None)
    p.add_argument("--lambda-p", dest="lambda_p", type=float, default=None)
    p.add_argument("--t-max", dest="t_max", type=int, default=None)
    p.add_argument("--appearance-weight", dest="appearance_weight", type=float, default=None)
    p.add_argument("--rotate-reference", dest="rotate_reference",
                   action="store_const", const=True, default=None)
    p.add_argument("--no-rotate-reference", dest="rotate_reference",
                   action="store_const", const=False)
    p.add_argument("--render-log-every", dest="render_log_every", type=int, default=None)

    p = sub.add_parser("reconstruct", help="pose-free reconstruction from images")
    _add_config_flag(p)
    p.add_argument("images", nargs="*", help="input view images (PNG)")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--ransac-iterations", dest="ransac_iterations", type=int, default=None)
    p.add_argument("--ransac-threshold", dest="ransac_threshold", type=float, default=None)
    p.add_argument("--min-inliers", dest="min_inliers", type=int, default=None)

    p = sub.add_parser("render", help="render a PLY scene from a camera")
    _add_config_flag(p)
    p.add_argument("--ply", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--camera", type=str, default=None)
    p.add_argument("--view", type=int, default=None)
    p.add_argument("--focal", type=float, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--pose", type=str, default=None)
    p.add_argument("--background", type=str, default=None)
    p.add_argument("--depth-out", dest="depth_out", type=str, default=None)
    p.add_argument("--alpha-out", dest="alpha_out", type=str, default=None)

    p = sub.add_parser("eval-pose", help="pose accuracy of predicted cameras")
    _add_config_flag(p)
    p.add_argument("--pred", type=str, default=None)
    p.add_argument("--gt", type=str, default=None)
    p.add_argument("--out", type=str, default=None)

    p = sub.add_parser("eval-nvs", help="PSNR/SSIM between two image directories")
    _add_config_flag(p)
    p.add_argument("--pred", type=str, default=None)
    p.add_argument("--gt", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--resolution", type=int, default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "synth":
            return cmd_synth(_merge_config(SynthConfig, args))
        if args.command == "train":
            return cmd_train(_merge_config(TrainConfig, args))
        if args.command == "reconstruct":
            return cmd_reconstruct(_merge_config(ReconstructConfig, args), args.images)
        if args.command == "render":
            return cmd_render(_merge_config(RenderConfig, args))
        if args.command == "eval-pose":
            return cmd_eval_pose(_merge_config(EvalPoseConfig, args))
        if args.command == "eval-nvs":
            return cmd_eval_nvs(_merge_config(EvalNvsConfig, args))
        raise UsageError(f"unknown command {args.command}")
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SolverError as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return 3
    except (DataError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
