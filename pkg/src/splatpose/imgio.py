"""PNG and PFM image I/O.

Color images travel as 8-bit PNG; alpha and depth buffers as 32-bit float
PFM (grayscale ``Pf``, little-endian, scale -1.0, rows stored bottom-up).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def write_png(path: str | Path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] as 8-bit PNG (RGB for (H,W,3), L for (H,W))."""
    arr = np.asarray(image, dtype=np.float64)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 2:
        Image.fromarray(data, mode="L").save(path)
    elif data.ndim == 3 and data.shape[2] == 3:
        Image.fromarray(data, mode="RGB").save(path)
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {arr.shape}")


def read_png(path: str | Path) -> np.ndarray:
    """Read a PNG as float64 in [0, 1]; RGB files give (H, W, 3), L gives (H, W)."""
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=np.float64) / 255.0
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    write_png(path, np.asarray(mask, dtype=np.float64))


def read_mask_png(path: str | Path) -> np.ndarray:
    return read_png(path) > 0.5


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a (H, W) float array as grayscale PFM, little-endian, bottom-up rows."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"PFM writer expects (H, W), got shape {data.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(arr[::-1].tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a grayscale PFM into a float32 (H, W) array."""
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4:
        raise ValueError("truncated PFM header")
    magic, dims, scale_s, payload = parts
    if magic != b"Pf":
        raise ValueError(f"unsupported PFM magic: {magic!r} (only grayscale 'Pf')")
    w, h = (int(v) for v in dims.split())
    scale = float(scale_s)
    dtype = "<f4" if scale < 0 else ">f4"
    expected = w * h * 4
    if len(payload) < expected:
        raise ValueError(f"truncated PFM payload: expected {expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload[:expected], dtype=dtype).reshape(h, w)
    return np.ascontiguousarray(arr[::-1]).astype(np.float32)
