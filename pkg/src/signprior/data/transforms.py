"""Image decoding, resizing to 224x224x3 and training-time augmentation."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from ..errors import InputError
from .schema import ImageRecord

INPUT_SIZE = 224
RESIZE_MODE = "bilinear"  # align_corners=False

ROTATION_DEG = 15.0
CONTRAST_RANGE = (0.8, 1.25)
AUGMENT_P = 0.5


def _to_unit_float(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 65535.0
    if arr.dtype == bool:
        return arr.astype(np.float32)
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def load_pixels(record: ImageRecord, root=None) -> np.ndarray:
    """Decode a record to an HxWx3 float32 array in [0, 1]."""
    if record.in_memory:
        arr = np.asarray(record.source)
    else:
        path = Path(record.source)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        try:
            with Image.open(path) as im:
                im.load()
                if im.mode in ("I;16", "I;16B", "I"):
                    arr = np.asarray(im, dtype=np.uint16 if im.mode.startswith("I;16") else np.int32)
                    if arr.dtype == np.int32:
                        arr = np.clip(arr, 0, 65535).astype(np.uint16)
                elif im.mode in ("L", "RGB"):
                    arr = np.asarray(im)
                else:
                    arr = np.asarray(im.convert("RGB"))
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            raise InputError(f"image record {record.id!r}: cannot decode {path} ({exc})") from exc
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InputError(f"image record {record.id!r}: unsupported pixel layout {arr.shape}")
    return _to_unit_float(arr[:, :, :3])


def resize_bilinear(arr: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of an HxW or HxWxC array (half-pixel centers)."""
    h, w = size
    if arr.shape[:2] == (h, w):
        return arr.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    if t.ndim == 2:
        t = t[None, None]
    else:
        t = t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode=RESIZE_MODE, align_corners=False)[0]
    if arr.ndim == 2:
        return out[0].numpy()
    return out.permute(1, 2, 0).contiguous().numpy()


def preprocess(record: ImageRecord, root=None) -> np.ndarray:
    arr = load_pixels(record, root)
    out = np.clip(resize_bilinear(arr, (INPUT_SIZE, INPUT_SIZE)), 0.0, 1.0)
    if not np.isfinite(out).all():
        raise InputError(f"image record {record.id!r}: non-finite pixels")
    return out


def rotate(t: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate an HxWxC image about its center, reflecting at the border."""
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    mat = torch.tensor([[[c, -s, 0.0], [s, c, 0.0]]], dtype=torch.float32)
    x = torch.from_numpy(np.ascontiguousarray(t, dtype=np.float32)).permute(2, 0, 1)[None]
    grid = F.affine_grid(mat, list(x.shape), align_corners=False)
    y = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    return y[0].permute(1, 2, 0).contiguous().numpy()


def adjust_contrast(t: np.ndarray, factor: float) -> np.ndarray:
    mean = float(t.mean())
    return mean + factor * (t - mean)


def augment(t: np.ndarray, rng) -> np.ndarray:
    """Random rotation, horizontal flip and contrast, each applied with p=0.5.

    The draw sequence is fixed regardless of which branches fire: three gate
    draws from ``rng.random(3)``, then the angle, then the contrast factor.
    Training samples only; the caller is responsible for that.
    """
    gates = np.asarray(rng.random(3))
    angle = float(rng.uniform(-ROTATION_DEG, ROTATION_DEG))
    factor = float(rng.uniform(*CONTRAST_RANGE))
    out = t
    if gates[0] < AUGMENT_P:
        out = rotate(out, angle)
    if gates[1] < AUGMENT_P:
        out = out[:, ::-1, :]
    if gates[2] < AUGMENT_P:
        out = adjust_contrast(out, factor)
    return np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)
