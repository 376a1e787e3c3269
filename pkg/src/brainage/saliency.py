"""Gradient saliency: where the encoders look.

The age prediction is backpropagated to the output of the last block's
convolution; the per-voxel channel L2 magnitude of that gradient,
trilinearly upsampled to input resolution, is the saliency map. The top
20% of values form a mask, the busiest slice per axis is selected, and
the mask is rendered in red over an averaged structural background.
"""

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .autograd import ShapeMismatchError, Tensor
from .imaging import Modality, Volume
from .vgg8 import Checkpoint

TINT_OPACITY = 0.6
TINT_COLOR = (255.0, 0.0, 0.0)


@dataclass(frozen=True)
class GradMap:
    """Non-negative saliency field at input resolution."""

    values: np.ndarray
    modality: Modality
    layer: str = "block5.conv"


@dataclass(frozen=True)
class SaliencyMask:
    mask: np.ndarray
    kept_count: int


def gradient_map(ckpt: Checkpoint, volume, mode: str = "magnitude") -> GradMap:
    """Backprop the prediction to the block-5 conv output and upsample.

    `volume` is a Volume or a (E, E, E) array matching the checkpoint's
    input edge. mode 'magnitude' takes the channel L2 norm of the raw
    gradients; 'positive' clamps negative gradients to zero first.
    """
    if isinstance(volume, Volume):
        vox, modality = volume.voxels, volume.modality
    else:
        vox, modality = np.asarray(volume, dtype=np.float32), Modality.T1W
    e = ckpt.input_edge
    if vox.shape != (e, e, e):
        raise ShapeMismatchError(f"expected ({e}, {e}, {e}) voxels, got {vox.shape}")
    if mode not in ("magnitude", "positive"):
        raise ValueError(f"mode must be 'magnitude' or 'positive', got {mode!r}")
    model = ckpt.to_model()
    out, block5 = model.forward(Tensor(vox[None, None]), training=False, capture_block5=True)
    out.backward()
    g = block5.grad[0].astype(np.float64)
    if mode == "positive":
        g = np.maximum(g, 0.0)
    field = np.sqrt((g * g).sum(axis=0))
    return GradMap(values=trilinear_resize(field, (e, e, e)), modality=modality)


def trilinear_resize(vol: np.ndarray, target: tuple) -> np.ndarray:
    """Separable linear interpolation with half-pixel-centered sampling."""
    out = np.asarray(vol, dtype=np.float64)
    for axis in range(3):
        n_in, n_out = out.shape[axis], target[axis]
        if n_in == n_out:
            continue
        pos = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        w = pos - lo
        shape = [1, 1, 1]
        shape[axis] = n_out
        out = np.take(out, lo, axis=axis) * (1.0 - w.reshape(shape)) + np.take(
            out, hi, axis=axis
        ) * w.reshape(shape)
    return out


def top_fraction_mask(values, fraction: float = 0.2) -> SaliencyMask:
    """Keep exactly ceil(fraction*N) largest voxels; threshold ties break
    toward the lowest linear index so the count is exact."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    vals = values.values if isinstance(values, GradMap) else np.asarray(values)
    flat = vals.ravel()
    k = math.ceil(fraction * flat.size)
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return SaliencyMask(mask=mask.reshape(vals.shape), kept_count=k)


def select_slices(mask: SaliencyMask) -> tuple[int, int, int]:
    """Per axis, the slice with the most masked voxels (lowest index on ties).

    Returns (axial, coronal, sagittal) = (z, y, x) indices.
    """
    m = mask.mask
    return (
        int(np.argmax(m.sum(axis=(1, 2)))),
        int(np.argmax(m.sum(axis=(0, 2)))),
        int(np.argmax(m.sum(axis=(0, 1)))),
    )


def group_average_volume(volumes, ages, decade: int) -> np.ndarray:
    """Voxelwise mean of the volumes with age in [10*decade, 10*(decade+1))."""
    picked = [
        np.asarray(v, dtype=np.float64)
        for v, a in zip(volumes, ages)
        if 10.0 * decade <= a < 10.0 * (decade + 1)
    ]
    if not picked:
        raise ValueError(f"no volumes with age in [{10 * decade}, {10 * (decade + 1)})")
    return np.mean(picked, axis=0)


def extract_slice(vol: np.ndarray, axis: int, index: int) -> np.ndarray:
    """axis 0 = axial (fixed z), 1 = coronal (fixed y), 2 = sagittal (fixed x)."""
    return np.take(vol, index, axis=axis)


def render_overlay(background: np.ndarray, mask: np.ndarray) -> bytes:
    """Binary PPM (P6): grayscale background, masked pixels tinted red.

    The background is min-max scaled to [0, 255] (constant slices go
    black); masked pixels blend 40% gray with 60% pure red. Rounding is
    np.rint at each step, so output bytes are fully deterministic.
    """
    bg = np.asarray(background, dtype=np.float64)
    if bg.shape != mask.shape or bg.ndim != 2:
        raise ShapeMismatchError(f"background {bg.shape} and mask {mask.shape} must be equal 2-D")
    mn, mx = float(bg.min()), float(bg.max())
    gray = np.rint((bg - mn) / (mx - mn) * 255.0) if mx > mn else np.zeros_like(bg)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    for ch, tint in enumerate(TINT_COLOR):
        blended = np.rint((1.0 - TINT_OPACITY) * gray + TINT_OPACITY * tint)
        rgb[:, :, ch] = np.where(mask, blended, rgb[:, :, ch])
    h, w = bg.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + np.clip(rgb, 0, 255).astype(np.uint8).tobytes(order="C")


def save_overlay(path, background: np.ndarray, mask: np.ndarray, sidecar: dict | None = None) -> None:
    """Write the PPM plus a JSON sidecar (same name, .json suffix)."""
    with open(path, "wb") as f:
        f.write(render_overlay(background, mask))
    if sidecar is not None:
        sidecar_path = os.path.splitext(str(path))[0] + ".json"
        with open(sidecar_path, "w", encoding="utf-8") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)
            f.write("\n")
