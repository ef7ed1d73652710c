"""Single-stream multi-view transformer predicting per-pixel Gaussian maps.

Images are split into p x p patches, linearly embedded, tagged with learned
position embeddings plus a reference/source view embedding (the first view
is the reference and all Gaussians are predicted in its camera frame), run
through pre-norm self-attention blocks over the concatenated token sequence
of all views, and decoded back to p^2 raw Gaussians per token by a single
linear head (the only layer with a bias).

Gradients are reverse-mode through the autodiff tape; training optimizes
the geometric losses (position + ray alignment) plus a desk-scale
appearance anchor on the decoded color/opacity channels, with AdamW.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import losses as losses_mod
from .autodiff import Tensor, concat, from_value_and_grad, layer_norm
from .gsmap import GaussianMap, _logit, _softplus_inv, decode_raw_array, mean_masked_distance
from .losses import LossWeights
from .renderer import render

CHECKPOINT_MAGIC = b"SPLATCKPT1\n"


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    patch: int = 4
    height: int = 32
    width: int = 32
    q_channels: int = 14
    max_views: int = 8
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("image height and width must be divisible by the patch size")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by the head count")

    @property
    def tokens_per_view(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def token_in(self) -> int:
        return self.patch * self.patch * 3

    @property
    def token_out(self) -> int:
        return self.patch * self.patch * self.q_channels


class ParameterStore:
    """Named learnable tensors with gradient slots and AdamW decay flags."""

    def __init__(self, params: dict[str, Tensor], decay: set[str]):
        self.params = params
        self.decay = decay

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params.keys())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ParameterStore":
        out = {}
        for name, p in self.params.items():
            t = Tensor(p.data.copy(), requires_grad=True)
            out[name] = t
        return ParameterStore(out, set(self.decay))


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


def init_params(
    config: ModelConfig, seed: int, mode: str = "object", *, ray_seeded: bool = True,
    focal_hint: float | None = None,
) -> ParameterStore:
    """Initialize all weights.

    With ray_seeded=True (default), the first two position-embedding
    channels carry each patch's image coordinates and the head is wired so
    decoded positions start on their own pixel ray at the canonical depth:
    the prediction is pixel-aligned from step 0 and the network only has to
    learn the radial (depth) component. With ray_seeded=False positions
    start at a single canonical center point. Either way splat footprints
    start at roughly a pixel, which gives the pose solvers usable geometry
    from the first steps.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    decay: set[str] = set()

    def add(name: str, value: np.ndarray, decayed: bool) -> None:
        params[name] = Tensor(value, requires_grad=True)
        if decayed:
            decay.add(name)

    d = config.d_model
    add("patch_embed", _trunc_normal(rng, (config.token_in, d)), True)
    add("pos_embed", _trunc_normal(rng, (config.tokens_per_view, d)), False)
    add("e_ref", _trunc_normal(rng, (d,)), False)
    add("e_src", _trunc_normal(rng, (d,)), False)
    for i in range(config.layers):
        add(f"block{i}.ln1", np.ones(d), False)
        add(f"block{i}.wq", _trunc_normal(rng, (d, d)), True)
        add(f"block{i}.wk", _trunc_normal(rng, (d, d)), True)
        add(f"block{i}.wv", _trunc_normal(rng, (d, d)), True)
        add(f"block{i}.wo", _trunc_normal(rng, (d, d)), True)
        add(f"block{i}.ln2", np.ones(d), False)
        add(f"block{i}.w1", _trunc_normal(rng, (d, config.mlp_ratio * d)), True)
        add(f"block{i}.w2", _trunc_normal(rng, (config.mlp_ratio * d, d)), True)
    add("head_w", _trunc_normal(rng, (d, config.token_out)), True)

    z0 = 2.0 if mode == "object" else 1.0
    scale0 = 0.05 if mode == "object" else 0.025
    p = config.patch
    bias = np.zeros((p * p, config.q_channels))
    bias[:, 2] = z0
    bias[:, 7:10] = _softplus_inv(np.full(3, scale0))
    bias[:, 10] = _logit(np.asarray(0.95))

    if ray_seeded:
        f_hint = focal_hint if focal_hint is not None else 0.75 * config.width
        hp, wp = config.height // p, config.width // p
        # patch-center image coordinates, normalized to about [-1, 1]
        py, px = np.divmod(np.arange(config.tokens_per_view), wp)
        cu = (px * p + (p - 1) / 2.0) - config.width / 2.0
        cv = (py * p + (p - 1) / 2.0) - config.height / 2.0
        pos = params["pos_embed"].data
        pos[:, 0] = cu / (config.width / 2.0)
        pos[:, 1] = cv / (config.height / 2.0)
        # head reads those channels back as the ray direction at depth z0
        head = params["head_w"].data.reshape(d, p * p, config.q_channels)
        head[0, :, 0] += (config.width / 2.0) * z0 / f_hint
        head[1, :, 1] += (config.height / 2.0) * z0 / f_hint
        # per-pixel offset inside the patch via the bias
        dv, du = np.divmod(np.arange(p * p), p)
        bias[:, 0] = (du - (p - 1) / 2.0) * z0 / f_hint
        bias[:, 1] = (dv - (p - 1) / 2.0) * z0 / f_hint

    add("head_b", bias.reshape(-1), False)
    return ParameterStore(params, decay)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, H, W, 3) images -> (N, M, p*p*3) raw tokens, row-major patches."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image size {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    x = images.reshape(n, hp, patch, wp, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, hp * wp, patch * patch * c)


def unpatchify(tokens: np.ndarray, patch: int, height: int, width: int) -> np.ndarray:
    """(N, M, p*p*c) tokens -> (N, H, W, c) maps; inverse of patchify."""
    tokens = np.asarray(tokens, dtype=np.float64)
    n, m, tc = tokens.shape
    hp, wp = height // patch, width // patch
    if m != hp * wp:
        raise ValueError(f"token count {m} does not match {hp}x{wp} patches")
    c = tc // (patch * patch)
    x = tokens.reshape(n, hp, wp, patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, height, width, c)


def add_embeddings(params: ParameterStore, tokens: Tensor, view_index: int) -> Tensor:
    """Add the per-patch position embedding and the view tag (reference
    embedding for view 1, source embedding otherwise). view_index is 1-based."""
    if view_index < 1:
        raise ValueError("view_index is 1-based")
    view = params["e_ref"] if view_index == 1 else params["e_src"]
    return tokens + params["pos_embed"] + view


def block_forward(params: ParameterStore, index: int, x: Tensor, config: ModelConfig) -> Tensor:
    """One pre-norm self-attention + MLP block with residual connections."""
    d, heads = config.d_model, config.heads
    dh = d // heads
    T = x.shape[0]

    h = layer_norm(x, params[f"block{index}.ln1"])
    q = (h @ params[f"block{index}.wq"]).reshape(T, heads, dh).transpose((1, 0, 2))
    k = (h @ params[f"block{index}.wk"]).reshape(T, heads, dh).transpose((1, 0, 2))
    v = (h @ params[f"block{index}.wv"]).reshape(T, heads, dh).transpose((1, 0, 2))
    scores = (q @ k.transpose((0, 2, 1))) * (1.0 / np.sqrt(dh))
    attn = scores.softmax(axis=-1)
    ctx = (attn @ v).transpose((1, 0, 2)).reshape(T, d)
    x = x + ctx @ params[f"block{index}.wo"]

    h2 = layer_norm(x, params[f"block{index}.ln2"])
    m = (h2 @ params[f"block{index}.w1"]).gelu() @ params[f"block{index}.w2"]
    return x + m


def decode_head(params: ParameterStore, tokens: Tensor, config: ModelConfig) -> Tensor:
    """Linear decode of final tokens into raw Gaussian maps (N, H, W, q)."""
    raw = tokens @ params["head_w"] + params["head_b"]
    n_tokens = raw.shape[0]
    n_views = n_tokens // config.tokens_per_view
    x = raw.reshape(n_views, config.tokens_per_view, config.token_out)
    hp, wp = config.height // config.patch, config.width // config.patch
    x = x.reshape(n_views, hp, wp, config.patch, config.patch, config.q_channels)
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape(n_views, config.height, config.width, config.q_channels)


def forward_raw(params: ParameterStore, config: ModelConfig, images: np.ndarray) -> Tensor:
    """Full tape forward from images to raw Gaussian maps."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")
    n = images.shape[0]
    if not 1 <= n <= config.max_views:
        raise ValueError(f"view count {n} outside [1, {config.max_views}]")
    if images.shape[1] != config.height or images.shape[2] != config.width:
        raise ValueError(
            f"image size {images.shape[1]}x{images.shape[2]} does not match "
            f"config {config.height}x{config.width}"
        )

    raw_tokens = patchify(images, config.patch)
    per_view = [
        add_embeddings(params, Tensor(raw_tokens[i]) @ params["patch_embed"], i + 1)
        for i in range(n)
    ]
    x = concat(per_view, axis=0) if n > 1 else per_view[0]
    for i in range(config.layers):
        x = block_forward(params, i, x, config)
    return decode_head(params, x, config)


def forward(params: ParameterStore, config: ModelConfig, images: np.ndarray) -> list[GaussianMap]:
    """Predict one Gaussian map per input view, in the first view's frame."""
    raw = forward_raw(params, config, images)
    return [GaussianMap(raw.data[i]) for i in range(raw.data.shape[0])]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0


def adam_step(
    store: ParameterStore,
    state: AdamState,
    *,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
    decay_filter=None,
) -> None:
    """Decoupled-weight-decay Adam update with bias-corrected moments.

    decay_filter(name) -> bool selects which parameters receive weight decay
    (None decays everything).
    """
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in store.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        wd = weight_decay if (decay_filter is None or decay_filter(name)) else 0.0
        update = (m / bc1) / (np.sqrt(v / bc2) + eps) + wd * p.data
        p.data = p.data - lr * update


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, store: ParameterStore, config: ModelConfig, meta: dict | None = None) -> None:
    """Single-file checkpoint: magic, JSON manifest, then raw float64 tensors."""
    manifest = {
        "config": asdict(config),
        "meta": meta or {},
        "decay": sorted(store.decay),
        "tensors": [
            {"name": name, "shape": list(p.data.shape), "dtype": "float64"}
            for name, p in store.params.items()
        ],
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in store.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a splatpose checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (mlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    manifest = json.loads(raw[off:off + mlen].decode("utf-8"))
    off += mlen
    params: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += count * 8
        params[entry["name"]] = Tensor(data.copy(), requires_grad=True)
    config = ModelConfig(**manifest["config"])
    return ParameterStore(params, set(manifest["decay"])), config, manifest["meta"]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    steps: int
    seed: int
    lr: float = 5e-3
    warmup_steps: int = 100
    lr_final_frac: float = 0.1
    batch_scenes: int = 1
    appearance_weight: float = 1.0
    mode: str = "object"
    log_render_every: int = 1
    rotate_reference: bool = True
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01


def _lr_at(step: int, settings: TrainSettings) -> float:
    if settings.steps <= 0:
        return settings.lr
    if step < settings.warmup_steps:
        return settings.lr * (step + 1) / settings.warmup_steps
    span = max(settings.steps - settings.warmup_steps, 1)
    t = (step - settings.warmup_steps) / span
    lo = settings.lr * settings.lr_final_frac
    return lo + 0.5 * (settings.lr - lo) * (1.0 + np.cos(np.pi * t))


def _decay_matrices(name: str) -> bool:
    # gains, embeddings, and the head bias stay undecayed
    return name.endswith((".wq", ".wk", ".wv", ".wo", ".w1", ".w2")) or name in ("patch_embed", "head_w")


def _render_loss_for_sample(raw_maps: np.ndarray, sample) -> float:
    cloud = decode_raw_array(raw_maps)
    vals = []
    for k in range(sample.images.shape[0]):
        out = render(
            cloud, sample.poses[k], sample.K,
            sample.images.shape[1], sample.images.shape[2], sample.background,
        )
        vals.append(losses_mod.render_loss(out, sample.images[k]))
    return float(np.mean(vals))


def _rebase_sample(sample, start: int):
    """Cyclically reorder views so view `start` becomes the reference, and
    re-express poses and point maps in its camera frame. Valid because every
    view is equivalent under the reference-frame convention; on normalized
    orbit rigs the camera-center distances are preserved exactly."""
    from .geometry import compose, invert

    n = sample.images.shape[0]
    if start % n == 0:
        return sample
    order = [(start + j) % n for j in range(n)]
    inv_ref = invert(sample.poses[order[0]])
    poses = [compose(inv_ref, sample.poses[j]) for j in order]
    poses[0] = type(sample.poses[0]).identity()
    pointmaps = np.stack([inv_ref.apply(sample.pointmaps[j]) for j in order])
    return replace(
        sample,
        images=sample.images[order],
        depths=sample.depths[order],
        masks=sample.masks[order],
        pointmaps=pointmaps,
        poses=poses,
    )


def _scene_loss_nodes(store: ParameterStore, config: ModelConfig, sample, step: int):
    """Tape loss terms for one scene: (raw maps, l_pos, l_align, l_app)."""
    n_views = sample.images.shape[0]
    masks = [sample.masks[k] for k in range(n_views)]
    gt_points = [sample.pointmaps[k] for k in range(n_views)]

    raw = forward_raw(store, config, sample.images)
    mu = raw[..., 0:3]

    # scale-align both sides to unit mean masked distance
    mask_arr = np.stack(masks).astype(np.float64)
    count = float(mask_arr.sum())
    norms = (mu * mu).sum(axis=-1).sqrt()
    d_pred = (norms * Tensor(mask_arr)).sum() * (1.0 / count)
    s_hat = 1.0 / d_pred
    mu_scaled = mu * s_hat

    s_gt = 1.0 / mean_masked_distance(gt_points, masks)
    gt_scaled = [np.where(m[..., None], X * s_gt, 0.0) for X, m in zip(gt_points, masks)]

    aligned = mean_masked_distance([mu_scaled.data[k] for k in range(n_views)], masks)
    if abs(aligned - 1.0) > 1e-9:
        raise RuntimeError(f"scale alignment failed at step {step}: {aligned}")

    pos_val, pos_grads = losses_mod.position_loss(
        [mu_scaled.data[k] for k in range(n_views)], gt_scaled, masks
    )
    l_pos = from_value_and_grad(mu_scaled, pos_val, np.stack(pos_grads))

    align_val, align_grads = losses_mod.alignment_loss(
        [mu.data[k] for k in range(n_views)], sample.poses, gt_points, masks
    )
    l_align = from_value_and_grad(mu, align_val, np.stack(align_grads))

    # appearance anchor: decoded color toward the source pixel, opacity
    # toward 1 on the foreground and 0 elsewhere
    color = raw[..., 11:14].sigmoid()
    opac = raw[..., 10].sigmoid()
    fg = Tensor(mask_arr)
    images_t = Tensor(sample.images)
    npix = float(mask_arr.size)
    l_app = (
        ((color - images_t) ** 2).sum(axis=-1) * fg
        + (opac - 1.0) ** 2 * fg
        + opac**2 * (1.0 - fg)
    ).sum() * (1.0 / npix)
    return raw, l_pos, l_align, l_app


def train(
    store: ParameterStore,
    config: ModelConfig,
    samples: list,
    weights: LossWeights,
    settings: TrainSettings,
) -> tuple[ParameterStore, list[dict]]:
    """Staged training: position supervision until t_max, ray alignment and
    the appearance anchor throughout. Each step averages the loss over
    batch_scenes scenes; every loss component is logged per step (the render
    loss is forward-only)."""
    if not samples:
        raise ValueError("empty training set")
    rng = np.random.default_rng(settings.seed)
    state = AdamState()
    log: list[dict] = []
    order: list[int] = []
    last_render = float("nan")

    for step in range(1, settings.steps + 1):
        batch = []
        for _ in range(max(settings.batch_scenes, 1)):
            if not order:
                order = list(rng.permutation(len(samples)))
            sample = samples[order.pop()]
            if settings.rotate_reference:
                sample = _rebase_sample(sample, int(rng.integers(sample.images.shape[0])))
            batch.append(sample)

        pos_nodes, align_nodes, app_nodes = [], [], []
        first_raw = None
        for sample in batch:
            raw, l_pos, l_align, l_app = _scene_loss_nodes(store, config, sample, step)
            if first_raw is None:
                first_raw = raw
            pos_nodes.append(l_pos)
            align_nodes.append(l_align)
            app_nodes.append(l_app)
        inv_b = 1.0 / len(batch)
        l_pos = sum(pos_nodes[1:], pos_nodes[0]) * inv_b
        l_align = sum(align_nodes[1:], align_nodes[0]) * inv_b
        l_app = sum(app_nodes[1:], app_nodes[0]) * inv_b

        loss = weights.lambda_a * l_align + settings.appearance_weight * l_app
        if step <= weights.t_max:
            loss = loss + weights.lambda_p * l_pos
        if not np.isfinite(loss.data):
            raise RuntimeError(f"non-finite training loss at step {step}")

        store.zero_grad()
        loss.backward()
        adam_step(
            store, state,
            lr=_lr_at(step - 1, settings),
            beta1=settings.beta1, beta2=settings.beta2,
            weight_decay=settings.weight_decay,
            decay_filter=_decay_matrices,
        )

        if settings.log_render_every > 0 and (step - 1) % settings.log_render_every == 0:
            last_render = _render_loss_for_sample(first_raw.data, batch[0])
        pos_val = float(l_pos.data)
        align_val = float(l_align.data)
        log.append({
            "step": step,
            "l_pos": pos_val,
            "l_align": align_val,
            "l_render": last_render,
            "total": losses_mod.total_loss(step, last_render, align_val, pos_val, weights),
            "l_app": float(l_app.data),
        })
    return store, log
