"""Grad-CAM for both branches of a diagnosis model, overlays and localization scoring."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data.schema import BiModalGroup, Modality
from .data.transforms import INPUT_SIZE, resize_bilinear
from .errors import ConfigError

# Overlay colormap anchors (normalized heat -> RGB), linearly interpolated:
# 0 blue, 1/3 cyan, 2/3 yellow, 1 red.
COLORMAP_STOPS = np.array([0.0, 1 / 3, 2 / 3, 1.0])
COLORMAP_RGB = np.array([
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
])
BOX_DILATION = 2.0


@dataclass
class ActivationCapture:
    branch: str
    layer: str
    activation: torch.Tensor  # (k, h, w)
    gradient: torch.Tensor  # d score_c / d activation, same shape


@dataclass
class HeatMap:
    map: np.ndarray  # (h, w), >= 0
    class_id: int
    branch: str
    weights: np.ndarray  # (k,) pooled gradients
    raw: np.ndarray = field(default=None, repr=False)  # pre-ReLU weighted sum


def channel_weights(gradient) -> torch.Tensor:
    """Global average of the gradient over the spatial dims: (k, h, w) -> (k,)."""
    g = torch.as_tensor(gradient)
    return g.sum(dim=(-2, -1)) / (g.shape[-2] * g.shape[-1])


def cam_from_capture(cap: ActivationCapture, class_id: int) -> HeatMap:
    w = channel_weights(cap.gradient)
    raw = torch.einsum("k,khw->hw", w, cap.activation)
    return HeatMap(torch.relu(raw).numpy(), int(class_id), cap.branch, w.numpy(), raw.numpy())


def capture(model, x_f, x_o, class_id: int):
    """Forward one group through the diagnosis model and differentiate score ``c``
    with respect to each branch's last conv block output.

    Parameters are left untouched: gradients are taken with ``torch.autograd.grad``
    so no ``.grad`` fields are written.
    """
    if class_id not in (0, 1, 2):
        raise ConfigError(f"class id must be 0, 1 or 2, got {class_id!r}")
    acts = {}
    handles = []
    for b in ("F", "O"):
        enc = model.encoder(b)
        try:
            layer = enc.cam_module()
        except AttributeError as exc:
            raise ConfigError(f"encoder {b} has no capture layer {getattr(enc, 'cam_layer', None)!r}") from exc

        def hook(_m, _inp, out, b=b):
            acts[b] = out

        handles.append(layer.register_forward_hook(hook))
    was = model.training
    model.eval()
    try:
        with torch.enable_grad():
            xf = torch.as_tensor(x_f)[None] if torch.as_tensor(x_f).ndim == 3 else torch.as_tensor(x_f)
            xo = torch.as_tensor(x_o)[None] if torch.as_tensor(x_o).ndim == 3 else torch.as_tensor(x_o)
            scores = model(xf, xo)
            if set(acts) != {"F", "O"}:
                raise ConfigError("capture hook did not fire on both branches")
            grads = torch.autograd.grad(scores[0, class_id], [acts["F"], acts["O"]], allow_unused=True)
    finally:
        for hd in handles:
            hd.remove()
        model.train(was)
    out = []
    for b, g in zip(("F", "O"), grads):
        a = acts[b][0].detach()
        g = torch.zeros_like(a) if g is None else g[0].detach()
        out.append(ActivationCapture(b, model.encoder(b).cam_layer, a, g))
    return out[0], out[1], scores.detach()[0]


def gradcam(model, group_or_images, class_id: int, store=None):
    """Heat maps (fundus, OCT) for diagnosis class ``class_id``.

    Accepts either a :class:`BiModalGroup` (images are taken from ``store``) or a
    pair of CHW tensors.
    """
    if isinstance(group_or_images, BiModalGroup):
        if store is None:
            raise ConfigError("gradcam on a group needs an ImageStore")
        g = group_or_images
        x_f = torch.from_numpy(store.image(Modality.FUNDUS, g.fundus.id).transpose(2, 0, 1).copy())
        x_o = torch.from_numpy(store.image(Modality.OCT, g.oct.id).transpose(2, 0, 1).copy())
    else:
        x_f, x_o = group_or_images
    cap_f, cap_o, _ = capture(model, x_f, x_o, class_id)
    return cam_from_capture(cap_f, class_id), cam_from_capture(cap_o, class_id)


def normalize_map(m: np.ndarray):
    """Min-max to [0, 1]. Returns None for an all-zero map; a constant nonzero map maps to 0."""
    m = np.asarray(m, dtype=np.float64)
    if not np.any(m):
        return None
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def apply_colormap(v: np.ndarray) -> np.ndarray:
    return np.stack([np.interp(v, COLORMAP_STOPS, COLORMAP_RGB[:, c]) for c in range(3)], axis=-1)


def render_overlay(heat, original: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the colormapped heat map over an HxWx3 image in [0, 1].

    ``out = (1 - alpha) * original + alpha * colormap(normalized map)``; an
    all-zero map leaves the image unchanged.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    m = heat.map if isinstance(heat, HeatMap) else heat
    original = np.asarray(original, dtype=np.float64)
    norm = normalize_map(m)
    if norm is None or alpha == 0.0:
        return original.copy()
    up = np.clip(resize_bilinear(norm.astype(np.float32), original.shape[:2]), 0.0, 1.0)
    return (1.0 - alpha) * original + alpha * apply_colormap(up)


def dilate_box(box, factor=BOX_DILATION, shape=None):
    x0, y0, x1, y1 = (float(v) for v in box)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = (x1 - x0) * factor / 2, (y1 - y0) * factor / 2
    out = [cx - hw, cy - hh, cx + hw, cy + hh]
    if shape is not None:
        h, w = shape
        out = [max(out[0], 0), max(out[1], 0), min(out[2], w), min(out[3], h)]
    return out


def box_mask(boxes, shape, factor=BOX_DILATION) -> np.ndarray:
    """Union of dilated boxes; a pixel is inside when its center is."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    cy = np.arange(h) + 0.5
    cx = np.arange(w) + 0.5
    for b in boxes:
        x0, y0, x1, y1 = dilate_box(b, factor)
        rows = (cy >= y0) & (cy < y1)
        cols = (cx >= x0) & (cx < x1)
        mask |= rows[:, None] & cols[None, :]
    return mask


def localization_score(heat, boxes, image_shape=None, factor=BOX_DILATION) -> float:
    """Share of heat mass inside the union of dilated boxes; 0 for an empty map.

    ``boxes`` are in pixel coordinates of the original image of shape
    ``image_shape`` (defaults to the map's own shape); the map is upsampled
    bilinearly to that shape first.
    """
    m = np.asarray(heat.map if isinstance(heat, HeatMap) else heat, dtype=np.float32)
    shape = tuple(image_shape) if image_shape is not None else m.shape
    up = np.clip(resize_bilinear(m, shape), 0.0, None).astype(np.float64)
    total = up.sum()
    if total <= 0:
        return 0.0
    return float(up[box_mask(boxes, shape, factor)].sum() / total)


def original_size(group: BiModalGroup, manifest=None) -> tuple:
    spec = (manifest.generator or {}).get("spec") if manifest is not None else None
    if spec:
        s = int(spec["image_size"])
        return (s, s)
    return (INPUT_SIZE, INPUT_SIZE)
