"""Gaussian primitives and per-pixel Gaussian maps.

A Gaussian map stores the raw 14-channel prediction for every pixel

    [0:3]   position (reference frame, raw)
    [3:7]   rotation quaternion (w, x, y, z), normalized on decode
    [7:10]  scale, softplus on decode, clamped to [SCALE_MIN, SCALE_MAX]
    [10]    opacity, sigmoid on decode
    [11:14] color DC term, sigmoid on decode

together with decoding/encoding between raw channels and valid primitives,
the scene-scale normalization used for training and scene-mode rendering,
and binary PLY persistence of the decoded primitives.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

Q_CHANNELS = 14
SCALE_MIN = 1e-4
SCALE_MAX = 1.0

PLY_PROPERTIES = (
    "x", "y", "z",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "scale_0", "scale_1", "scale_2",
    "opacity",
    "f_dc_0", "f_dc_1", "f_dc_2",
)


class PlyFormatError(ValueError):
    """Raised on malformed PLY headers or truncated payloads."""


@dataclass(frozen=True)
class GaussianPrimitive:
    """One decoded 3D Gaussian: position, rotation, scale, opacity, color."""

    mu: np.ndarray
    r: np.ndarray
    s: np.ndarray
    o: float
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64).reshape(3))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64).reshape(4))
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.float64).reshape(3))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=np.float64).reshape(3))


@dataclass
class GaussianCloud:
    """Flat arrays of decoded primitives, the renderer's native input."""

    mu: np.ndarray  # (K, 3)
    r: np.ndarray   # (K, 4)
    s: np.ndarray   # (K, 3)
    o: np.ndarray   # (K,)
    c: np.ndarray   # (K, 3)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @staticmethod
    def from_primitives(prims: list[GaussianPrimitive]) -> "GaussianCloud":
        if not prims:
            return GaussianCloud(
                np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3))
            )
        return GaussianCloud(
            mu=np.stack([p.mu for p in prims]),
            r=np.stack([p.r for p in prims]),
            s=np.stack([p.s for p in prims]),
            o=np.array([p.o for p in prims], dtype=np.float64),
            c=np.stack([p.c for p in prims]),
        )

    def primitives(self) -> list[GaussianPrimitive]:
        return [
            GaussianPrimitive(self.mu[k], self.r[k], self.s[k], float(self.o[k]), self.c[k])
            for k in range(len(self))
        ]

    @staticmethod
    def concatenate(clouds: list["GaussianCloud"]) -> "GaussianCloud":
        return GaussianCloud(
            mu=np.concatenate([g.mu for g in clouds], axis=0),
            r=np.concatenate([g.r for g in clouds], axis=0),
            s=np.concatenate([g.s for g in clouds], axis=0),
            o=np.concatenate([g.o for g in clouds], axis=0),
            c=np.concatenate([g.c for g in clouds], axis=0),
        )


# ---------------------------------------------------------------------------
# raw-channel (de)parameterization
# ---------------------------------------------------------------------------

def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x), stable for large |x|
    return np.logaddexp(0.0, x)


def _softplus_inv(y: np.ndarray) -> np.ndarray:
    # inverse of softplus on y > 0: y + log(1 - e^-y)
    y = np.asarray(y, dtype=np.float64)
    return y + np.log1p(-np.exp(-y))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def decode_raw_array(raw: np.ndarray) -> GaussianCloud:
    """Decode raw (..., 14) channels into a flat cloud of valid primitives."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != Q_CHANNELS:
        raise ValueError(f"expected {Q_CHANNELS} channels, got {raw.shape[-1]}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw Gaussian channels contain non-finite values")
    flat = raw.reshape(-1, Q_CHANNELS)

    mu = flat[:, 0:3].copy()
    q = flat[:, 3:7]
    norms = np.linalg.norm(q, axis=1)
    r = np.zeros_like(q)
    r[:, 0] = 1.0  # identity fallback for near-zero quaternions
    ok = norms > 1e-8
    r[ok] = q[ok] / norms[ok, None]
    s = np.clip(_softplus(flat[:, 7:10]), SCALE_MIN, SCALE_MAX)
    o = _sigmoid(flat[:, 10])
    c = _sigmoid(flat[:, 11:14])
    return GaussianCloud(mu=mu, r=r, s=s, o=o, c=c)


def decode_raw(raw: np.ndarray) -> GaussianPrimitive:
    """Decode one raw 14-vector into a GaussianPrimitive."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (Q_CHANNELS,):
        raise ValueError(f"expected a {Q_CHANNELS}-vector, got shape {raw.shape}")
    cloud = decode_raw_array(raw[None, :])
    return cloud.primitives()[0]


def encode(prim: GaussianPrimitive) -> np.ndarray:
    """Inverse of decode_raw for primitives inside the activation ranges."""
    raw = np.empty(Q_CHANNELS)
    raw[0:3] = prim.mu
    raw[3:7] = prim.r
    raw[7:10] = _softplus_inv(np.clip(prim.s, SCALE_MIN, SCALE_MAX))
    raw[10] = _logit(np.clip(prim.o, 1e-12, 1 - 1e-12))
    raw[11:14] = _logit(np.clip(prim.c, 1e-12, 1 - 1e-12))
    return raw


class GaussianMap:
    """H x W grid of raw 14-channel Gaussians plus a decoded view."""

    def __init__(self, raw: np.ndarray):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 3 or raw.shape[-1] != Q_CHANNELS:
            raise ValueError(f"GaussianMap expects (H, W, {Q_CHANNELS}), got {raw.shape}")
        if not np.all(np.isfinite(raw)):
            raise ValueError("raw Gaussian map contains non-finite values")
        self.raw = raw

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape[0], self.raw.shape[1]

    def positions(self) -> np.ndarray:
        """(H, W, 3) raw position channels."""
        return self.raw[..., 0:3]

    def opacity_map(self) -> np.ndarray:
        """(H, W) decoded per-pixel opacity."""
        return _sigmoid(self.raw[..., 10])

    def cloud(self) -> GaussianCloud:
        return decode_raw_array(self.raw)


# ---------------------------------------------------------------------------
# scale normalization
# ---------------------------------------------------------------------------

def mean_masked_distance(points: list[np.ndarray], masks: list[np.ndarray]) -> float:
    """Mean distance-to-origin of all valid points across views."""
    if len(points) != len(masks):
        raise ValueError("points and masks lists must have equal length")
    total = 0.0
    count = 0
    for X, M in zip(points, masks):
        M = np.asarray(M, dtype=bool)
        sel = np.asarray(X, dtype=np.float64)[M]
        total += float(np.linalg.norm(sel, axis=-1).sum())
        count += int(M.sum())
    if count == 0:
        raise ValueError("mask union is empty; mean distance undefined")
    return total / count


def rescale_gaussians(
    maps: list[GaussianMap], masks: list[np.ndarray]
) -> tuple[list[GaussianMap], float]:
    """Normalize a multi-view prediction so the masked mean distance is 1.

    Positions and scales are multiplied by s_hat = 1 / mean_masked_distance;
    rotations, opacities, and colors are untouched.
    """
    d = mean_masked_distance([m.positions() for m in maps], masks)
    s_hat = 1.0 / d
    out = []
    for m in maps:
        raw = m.raw.copy()
        raw[..., 0:3] *= s_hat
        decoded_s = np.clip(_softplus(raw[..., 7:10]), SCALE_MIN, SCALE_MAX)
        raw[..., 7:10] = _softplus_inv(np.clip(decoded_s * s_hat, SCALE_MIN, SCALE_MAX))
        out.append(GaussianMap(raw))
    return out, s_hat


# ---------------------------------------------------------------------------
# PLY persistence
# ---------------------------------------------------------------------------

def ply_write(path: str | Path, cloud: GaussianCloud) -> None:
    """Write decoded primitives as binary little-endian PLY (float64 channels)."""
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    data = np.empty((n, Q_CHANNELS), dtype="<f8")
    data[:, 0:3] = cloud.mu
    data[:, 3:7] = cloud.r
    data[:, 7:10] = cloud.s
    data[:, 10] = cloud.o
    data[:, 11:14] = cloud.c
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def ply_read(path: str | Path) -> GaussianCloud:
    """Read a PLY written by ply_write. Unknown properties are an error."""
    blob = Path(path).read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise PlyFormatError("not a PLY file (missing magic or end_header)")
    header_lines = blob[:end].decode("ascii").splitlines()
    payload = blob[end + len(b"end_header\n"):]

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    for line in header_lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise PlyFormatError(f"unsupported element: {parts[1]}")
            count = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[1], parts[2]))
        else:
            raise PlyFormatError(f"unsupported header line: {line!r}")
    if fmt != "binary_little_endian":
        raise PlyFormatError(f"unsupported PLY format: {fmt}")
    if count is None:
        raise PlyFormatError("missing vertex element")
    names = tuple(name for _, name in props)
    for name in names:
        if name not in PLY_PROPERTIES:
            raise PlyFormatError(f"unknown PLY property: {name}")
    if names != PLY_PROPERTIES:
        raise PlyFormatError(f"expected properties {PLY_PROPERTIES}, got {names}")

    dtypes = {"double": "<f8", "float": "<f4"}
    try:
        rec = np.dtype([(name, dtypes[typ]) for typ, name in props])
    except KeyError as e:
        raise PlyFormatError(f"unsupported property type: {e}") from e
    expected = rec.itemsize * count
    if len(payload) < expected:
        raise PlyFormatError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload[:expected], dtype=rec)
    cols = np.stack([arr[name].astype(np.float64) for name in PLY_PROPERTIES], axis=1)
    return GaussianCloud(
        mu=cols[:, 0:3].copy(),
        r=cols[:, 3:7].copy(),
        s=cols[:, 7:10].copy(),
        o=cols[:, 10].copy(),
        c=cols[:, 11:14].copy(),
    )
