"""Preprocessing, ROI definition/extraction, augmentation and splitting."""

from __future__ import annotations

import enum
from collections import defaultdict
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volume import CHANNELS, BBox3D, VolumeSet

STD_EPS = 1e-8


class StandardizationMode(enum.Enum):
    WHOLE_IMAGE = "whole-image"
    BRAIN_MASK = "brain-mask"


def standardize(vs: VolumeSet, mode: StandardizationMode | str = StandardizationMode.BRAIN_MASK) -> VolumeSet:
    """Zero-mean / unit-variance intensities per channel.

    WHOLE_IMAGE takes statistics over every voxel, background included.
    BRAIN_MASK takes them over the mask only and leaves background at 0.
    """
    mode = StandardizationMode(mode)
    mask = vs.brain_mask.astype(bool)
    out = np.zeros_like(vs.channels)
    for c, name in enumerate(CHANNELS):
        x = vs.channels[c].astype(np.float64)
        region = x if mode is StandardizationMode.WHOLE_IMAGE else x[mask]
        mu, sd = region.mean(), region.std()
        if sd <= STD_EPS:
            raise DataError(f"{vs.subject_id}: channel {name} is near-constant over the "
                            f"{mode.value} region (std={sd:.3g})")
        if mode is StandardizationMode.WHOLE_IMAGE:
            out[c] = (x - mu) / sd
        else:
            out[c][mask] = (region - mu) / sd
    return vs.with_channels(out, meta={**vs.meta, "standardization": mode.value})


# --------------------------------------------------------------------------
# boxes


def _nonzero_box(mask: np.ndarray, what: str) -> BBox3D:
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise DataError(f"{what} must be 3-D, got shape {mask.shape}")
    if not mask.any():
        raise DataError(f"{what} is empty")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(mask.any(axis=other))
        lo.append(idx[0])
        hi.append(idx[-1])
    return BBox3D(lo, hi)


def brain_bbox(mask: np.ndarray) -> BBox3D:
    """Tightest box around every nonzero voxel."""
    return _nonzero_box(mask, "brain mask")


def tumor_bbox(mask: np.ndarray, margin: int = 10, shape=None) -> BBox3D:
    """Tumour box grown by ``margin`` voxels per side, then widened so side
    ratios match the un-margined tumour box, then clipped to the volume.

    The aspect-ratio widening is split evenly between both sides, except that
    any part that would leave the volume is moved to the opposite side.  The
    margin itself is clipped, never moved.  ``clipped`` is set on the result
    when clipping changed the intended side lengths.
    """
    base = _nonzero_box(mask, "tumor mask")
    shape = tuple(np.asarray(mask).shape if shape is None else shape)
    sides = np.array(base.shape, dtype=np.float64)
    scale = np.max((sides + 2 * margin) / sides)
    targets = [max(int(s) + 2 * margin, int(np.floor(scale * s + 0.5))) for s in sides]

    lo, hi = [], []
    clipped = False
    for axis in range(3):
        n = shape[axis]
        widen = targets[axis] - (int(sides[axis]) + 2 * margin)
        w_lo = widen // 2
        w_hi = widen - w_lo
        room_lo = base.lo[axis] - margin
        room_hi = (n - 1) - (base.hi[axis] + margin)
        if w_lo > room_lo:
            moved = min(w_lo - max(room_lo, 0), w_lo)
            w_lo -= moved
            w_hi += moved
        if w_hi > room_hi:
            moved = min(w_hi - max(room_hi, 0), w_hi)
            w_hi -= moved
            w_lo += moved
        a = base.lo[axis] - margin - w_lo
        b = base.hi[axis] + margin + w_hi
        ca, cb = max(a, 0), min(b, n - 1)
        clipped |= (ca, cb) != (a, b)
        lo.append(ca)
        hi.append(cb)
    return BBox3D(lo, hi, clipped=clipped)


# --------------------------------------------------------------------------
# resampling


def _lerp_axis(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    if n_in == 1:
        return np.repeat(a, n_out, axis=axis)
    coords = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1) if n_out > 1 else 0.0)
    i0 = np.minimum(np.floor(coords).astype(np.intp), n_in - 2)
    t = coords - i0
    shape = [1] * a.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    a0 = np.take(a, i0, axis=axis)
    a1 = np.take(a, i0 + 1, axis=axis)
    # a0 + t*(a1-a0) keeps constant signals exact
    return (a0 + t * (a1 - a0)).astype(a.dtype)


def resize_trilinear(vol: np.ndarray, target) -> np.ndarray:
    """Corner-aligned trilinear resampling of the last three axes."""
    target = (target,) * 3 if np.isscalar(target) else tuple(target)
    out = vol
    for k, n in enumerate(target):
        out = _lerp_axis(out, int(n), vol.ndim - 3 + k)
    return out if out is not vol else vol.copy()


def resize_nearest(vol: np.ndarray, target) -> np.ndarray:
    """Corner-aligned nearest-neighbour resampling (for masks)."""
    target = (target,) * 3 if np.isscalar(target) else tuple(target)
    out = vol
    for k, n in enumerate(target):
        axis = vol.ndim - 3 + k
        n_in = out.shape[axis]
        if n_in == n:
            continue
        coords = np.arange(n) * ((n_in - 1) / (n - 1) if n > 1 else 0.0)
        out = np.take(out, np.floor(coords + 0.5).astype(np.intp), axis=axis)
    return out if out is not vol else vol.copy()


def _check_box(box: BBox3D, shape) -> None:
    if any(s < 2 for s in box.shape):
        raise DataError(f"degenerate box {box.as_pairs()}: every side needs at least 2 voxels")
    if any(l < 0 for l in box.lo) or any(h >= n for h, n in zip(box.hi, shape)):
        raise DataError(f"box {box.as_pairs()} lies outside volume of shape {tuple(shape)}")


def extract_resize(vs: VolumeSet, box: BBox3D, target: int = 96) -> np.ndarray:
    """Crop every channel to ``box`` and resample to ``target``^3."""
    _check_box(box, vs.shape)
    crop = vs.channels[(slice(None),) + box.slices]
    return resize_trilinear(crop, target).astype(np.float32)


def extract_resize_mask(mask: np.ndarray, box: BBox3D, target: int = 96) -> np.ndarray:
    _check_box(box, mask.shape)
    return resize_nearest(np.asarray(mask)[box.slices], target)


def merge_labels(labels: np.ndarray) -> np.ndarray:
    """Collapse tumour compartments into one whole-tumour label."""
    return (np.asarray(labels) > 0).astype(np.uint8)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip_prob: float = 0.5
    rotation_deg: float = 20.0
    right_angle: bool = True
    right_angle_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.85, 1.15)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.gamma_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"gamma range must be positive and ordered, got {self.gamma_range}")
        if self.rotation_deg < 0:
            raise ValueError("rotation range is symmetric: give a nonnegative half-width")

    @classmethod
    def disabled(cls) -> AugmentParams:
        return cls(flip_prob=0.0, rotation_deg=0.0, right_angle=False, gamma_range=(1.0, 1.0))


@dataclass
class Augmented:
    image: np.ndarray
    label: np.ndarray | None = None
    brain: np.ndarray | None = None
    applied: dict = field(default_factory=dict)


def sagittal_flip(vol: np.ndarray) -> np.ndarray:
    """Mirror left/right (the last, x axis)."""
    return np.flip(vol, axis=-1).copy()


def _plane(axis: int, ndim: int) -> tuple[int, int]:
    spatial = [ndim - 3 + a for a in range(3) if a != axis]
    return spatial[0], spatial[1]


def rotate90(vol: np.ndarray, axis: int, k: int = 1) -> np.ndarray:
    """Rotate by k*90 degrees about spatial ``axis`` (0=z, 1=y, 2=x)."""
    return np.rot90(vol, k=k, axes=_plane(axis, vol.ndim)).copy()


def rotate(vol: np.ndarray, angle_deg: float, axis: int, order: int) -> np.ndarray:
    """Rotate about spatial ``axis``; voxels from outside the field become 0."""
    if angle_deg == 0:
        return vol.copy()
    axes = _plane(axis, 3)
    if vol.ndim == 4:
        return np.stack([ndimage.rotate(v, angle_deg, axes=axes, reshape=False, order=order,
                                        mode="constant", cval=0.0) for v in vol])
    return ndimage.rotate(vol, angle_deg, axes=axes, reshape=False, order=order, mode="constant", cval=0.0)


def gamma_transform(x: np.ndarray, gamma: float, region: np.ndarray | None) -> np.ndarray:
    """Power-law intensity change on one channel, restricted to ``region``.

    Region intensities are min-max mapped to [0, 1], raised to ``gamma``,
    mapped back, then shifted/scaled so the region keeps its original mean
    and standard deviation.
    """
    out = x.astype(np.float64)
    sel = np.ones(x.shape, bool) if region is None else region.astype(bool)
    vals = out[sel]
    if vals.size == 0:
        return x.copy()
    lo, hi = vals.min(), vals.max()
    if hi - lo <= 0:
        return x.copy()
    mu0, sd0 = vals.mean(), vals.std()
    y = ((vals - lo) / (hi - lo)) ** gamma * (hi - lo) + lo
    sd1 = y.std()
    y = (y - y.mean()) / sd1 * sd0 + mu0 if sd1 > 0 else np.full_like(y, mu0)
    out[sel] = y
    return out.astype(x.dtype)


def augment(image: np.ndarray, params: AugmentParams, rng: np.random.Generator,
            brain: np.ndarray | None = None, label: np.ndarray | None = None) -> Augmented:
    """Random flip, small rotation, optional right-angle rotation and gamma.

    Images use trilinear resampling, masks nearest neighbour.  The same
    geometric transform is applied to image, brain mask and label.
    """
    applied = {}
    img = image
    masks = {"brain": brain, "label": label}

    if params.flip_prob > 0 and rng.random() < params.flip_prob:
        img = sagittal_flip(img)
        masks = {k: None if m is None else sagittal_flip(m) for k, m in masks.items()}
        applied["flip"] = True
    if params.rotation_deg > 0:
        angle = float(rng.uniform(-params.rotation_deg, params.rotation_deg))
        axis = int(rng.integers(3))
        img = rotate(img, angle, axis, order=1)
        masks = {k: None if m is None else rotate(m, angle, axis, order=0) for k, m in masks.items()}
        applied["rotation"] = (angle, axis)
    if params.right_angle and rng.random() < params.right_angle_prob:
        axis = int(rng.integers(3))
        img = rotate90(img, axis)
        masks = {k: None if m is None else rotate90(m, axis) for k, m in masks.items()}
        applied["rot90"] = axis
    lo, hi = params.gamma_range
    if hi > lo or lo != 1.0:
        gammas = rng.uniform(lo, hi, size=img.shape[0]) if hi > lo else np.full(img.shape[0], lo)
        region = masks["brain"]
        img = np.stack([gamma_transform(img[c], float(g), region) for c, g in enumerate(gammas)])
        applied["gamma"] = [float(g) for g in gammas]
    if img is image:
        img = image.copy()
    return Augmented(img.astype(image.dtype), masks["label"], masks["brain"], applied)


# --------------------------------------------------------------------------
# splitting


@dataclass
class Split:
    train: list[str]
    val: list[str]
    test: list[str]

    def as_dict(self) -> dict[str, list[str]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def split_dataset(subjects: Mapping[str, str], fractions=(0.6, 0.2, 0.2), seed: int = 0,
                  min_per_grade: int = 5) -> Split:
    """Stratified train/val/test split.

    Validation and test counts are floored per grade; training receives the
    remainder.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three numbers summing to 1, got {tuple(fractions)}")
    by_grade: dict[str, list[str]] = defaultdict(list)
    for sid, grade in subjects.items():
        by_grade[grade].append(sid)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for grade in sorted(by_grade):
        ids = sorted(by_grade[grade])
        if len(ids) < min_per_grade:
            raise DataError(f"grade {grade} has {len(ids)} subjects; need at least {min_per_grade}")
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_val = int(np.floor(len(ids) * fractions[1]))
        n_test = int(np.floor(len(ids) * fractions[2]))
        val += ids[:n_val]
        test += ids[n_val : n_val + n_test]
        train += ids[n_val + n_test :]
    return Split(sorted(train), sorted(val), sorted(test))
