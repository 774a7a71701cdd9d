"""Guided backpropagation, Grad-CAM, overlays and a border-energy lint."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .roi import resize_trilinear
from .tensor import GradMode, Tape, Tensor, backward

INPUT_SPACE = "input-space"
TAP_SPACE = "tap-space"


@dataclass
class ExplanationMap:
    values: np.ndarray
    resolution: str
    method: str
    class_index: int
    tap: str | None = None
    logits: np.ndarray | None = field(default=None, repr=False)

    def reduced(self) -> np.ndarray:
        """3-D view: max |value| over channels for 4-D maps."""
        v = self.values
        return np.abs(v).max(axis=0) if v.ndim == 4 else v


@dataclass
class TapPoint:
    name: str
    features: np.ndarray
    gradients: np.ndarray

    def __post_init__(self):
        if self.features.shape != self.gradients.shape:
            raise ValueError(f"tap {self.name}: features {self.features.shape} vs gradients {self.gradients.shape}")


def _class_seed(logits: np.ndarray, cls: int, scale: float) -> np.ndarray:
    if not 0 <= cls < logits.shape[-1]:
        raise ValueError(f"class index {cls} out of range for {logits.shape[-1]} classes")
    seed = np.zeros_like(logits)
    seed[..., cls] = scale
    return seed


def _single(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim == 5:
        if x.shape[0] != 1:
            raise ValueError("explanations are computed one subject at a time")
        x = x[0]
    if x.ndim != 4:
        raise ValueError(f"expected (C,D,H,W) input, got {x.shape}")
    return x


def guided_backprop(model, x, cls: int | None = None, seed_scale: float = 1.0) -> ExplanationMap:
    """Signed input gradient of the chosen pre-softmax logit with guided ReLU gates.

    ``cls`` defaults to the predicted class.
    """
    xt = Tensor(_single(x), requires_grad=True, name="input")
    with Tape(GradMode.GUIDED) as tape:
        res = model.forward(xt, train=False)
    if "relu" not in tape.ops():
        raise ValueError("guided backpropagation needs ReLU records on the tape; model has none")
    logits = res.logits.data
    c = int(np.argmax(logits.reshape(-1, logits.shape[-1])[0])) if cls is None else int(cls)
    g = backward(res.logits, tape, seed=_class_seed(logits, c, seed_scale), mode=GradMode.GUIDED)
    return ExplanationMap(g[xt], INPUT_SPACE, "guided-backprop", c, logits=logits)


def capture_tap(model, x, cls: int, tap: str, mode: GradMode = GradMode.STANDARD) -> tuple[TapPoint, np.ndarray]:
    """Forward once, backprop the class logit to the tap; returns (tap point, logits)."""
    names = tuple(model.tap_names)
    if tap not in names:
        raise KeyError(f"unknown tap {tap!r}; available: {', '.join(names)}")
    xt = Tensor(_single(x), requires_grad=True, name="input")
    with Tape(mode) as tape:
        res = model.forward(xt, train=False)
    f = res.taps[tap]
    logits = res.logits.data
    g = backward(res.logits, tape, seed=_class_seed(logits, cls, 1.0), retain=(f,))
    grad = g.get(f)
    if grad is None:
        grad = np.zeros_like(f.data)
    feats = f.data[0] if f.ndim == 5 else f.data
    grad = grad[0] if grad.ndim == 5 else grad
    return TapPoint(tap, feats, grad), logits


def gradcam_from_tap(tp: TapPoint) -> tuple[np.ndarray, np.ndarray]:
    """(alpha per channel, E = max(sum_c alpha_c F_c, 0))."""
    c = tp.features.shape[0]
    alpha = tp.gradients.reshape(c, -1).mean(axis=1)
    e = np.tensordot(alpha, tp.features, axes=(0, 0))
    return alpha, np.maximum(e, 0.0)


def gradcam(model, x, cls: int | None = None, tap: str = "res4") -> ExplanationMap:
    if tap not in tuple(model.tap_names):
        raise KeyError(f"unknown tap {tap!r}; available: {', '.join(model.tap_names)}")
    if cls is None:
        logits = model.forward(_single(x), train=False).logits.data
        cls = int(np.argmax(logits.reshape(-1, logits.shape[-1])[0]))
    tp, logits = capture_tap(model, x, int(cls), tap)
    _, e = gradcam_from_tap(tp)
    return ExplanationMap(e, TAP_SPACE, "gradcam", int(cls), tap=tap, logits=logits)


def upsample_map_to_input(m: ExplanationMap, shape) -> ExplanationMap:
    shape = tuple(int(s) for s in shape[-3:])
    v = m.values
    if v.shape[-3:] == shape:
        out = v.astype(np.float64)
    elif v.ndim == 4:
        out = np.stack([resize_trilinear(c, shape) for c in v])
    else:
        out = resize_trilinear(v, shape)
    return ExplanationMap(out, INPUT_SPACE, m.method, m.class_index, m.tap, m.logits)


# -------------------------------------------------------------- rendering

def hot_colormap(t: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp for t in [0, 1]; returns (..., 3) floats."""
    t = np.clip(t, 0.0, 1.0)
    return np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)], axis=-1)


def _window(bg: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(bg, [1, 99])
    if hi <= lo:
        return np.zeros_like(bg, dtype=np.float64)
    return np.clip((bg - lo) / (hi - lo), 0.0, 1.0)


def render_overlay(background: np.ndarray, overlay: np.ndarray, opacity: float = 0.6) -> np.ndarray:
    """Blend a 2-D map over a grayscale slice; returns (H, W, 3) uint8.

    A (C, H, W) overlay is reduced with the max of absolute values.
    """
    bg = np.asarray(background, dtype=np.float64)
    ov = np.asarray(overlay, dtype=np.float64)
    if ov.ndim == 3:
        ov = np.abs(ov).max(axis=0)
    if bg.ndim != 2 or ov.shape != bg.shape:
        raise ValueError(f"background {bg.shape} and map {ov.shape} slices must be matching 2-D arrays")
    if not 0.0 <= opacity <= 1.0:
        raise ValueError("opacity must be in [0, 1]")
    gray = _window(bg)[..., None] * np.ones(3)
    ov = np.abs(ov)
    peak = ov.max()
    t = ov / peak if peak > 0 else np.zeros_like(ov)
    alpha = (opacity * t)[..., None]
    rgb = (1 - alpha) * gray + alpha * hot_colormap(t)
    return np.round(rgb * 255.0).astype(np.uint8)


def take_slice(vol: np.ndarray, axis: int, index: int) -> np.ndarray:
    """Slice the last three axes of ``vol`` (leading channel axis kept)."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    spatial = vol.shape[-3:]
    if not 0 <= index < spatial[axis]:
        raise IndexError(f"slice index {index} out of range for axis {axis} of extent {spatial[axis]}")
    return np.take(vol, index, axis=vol.ndim - 3 + axis)


def overlay_slice(background_vol: np.ndarray, map_vol: np.ndarray, axis: int, index: int,
                  opacity: float = 0.6) -> np.ndarray:
    return render_overlay(take_slice(background_vol, axis, index), take_slice(map_vol, axis, index), opacity)


def save_png(rgb: np.ndarray, path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG", optimize=False)
    return path


# -------------------------------------------------------------- border lint

def brain_shell(mask: np.ndarray, width: int = 3) -> np.ndarray:
    """Mask voxels within ``width`` voxels of the mask boundary (boundary voxels are at distance 1)."""
    m = np.asarray(mask).astype(bool)
    dist = ndimage.distance_transform_edt(np.pad(m, 1))[1:-1, 1:-1, 1:-1]
    return m & (dist <= width)


def border_energy_fraction(m, mask: np.ndarray, width: int = 3) -> float:
    values = m.values if isinstance(m, ExplanationMap) else np.asarray(m)
    energy = np.abs(values)
    if energy.ndim == 4:
        energy = energy.sum(axis=0)
    inside = np.asarray(mask).astype(bool)
    if energy.shape != inside.shape:
        raise ValueError(f"map {energy.shape} and mask {inside.shape} differ; upsample the map first")
    total = float(energy[inside].sum())
    if total <= 0.0:
        raise ValueError("explanation map has zero energy inside the mask")
    return float(energy[brain_shell(inside, width)].sum()) / total


__all__ = [
    "ExplanationMap", "TapPoint", "guided_backprop", "capture_tap", "gradcam", "gradcam_from_tap",
    "upsample_map_to_input", "render_overlay", "overlay_slice", "take_slice", "save_png", "hot_colormap",
    "brain_shell", "border_energy_fraction",
]
