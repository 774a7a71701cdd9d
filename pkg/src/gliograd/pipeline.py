"""Subject-level wiring: standardize, pick the ROI box, extract and resize."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .io import VolumeDataset, read_volume, write_volume
from .roi import (StandardizationMode, brain_bbox, extract_resize, extract_resize_mask, standardize,
                  tumor_bbox)
from .volume import BBox3D, VolumeSet, grade_index


class RoiSource(enum.Enum):
    WHOLE_BRAIN = "whole-brain"
    TUMOR = "tumor"


class MaskSource(enum.Enum):
    MANUAL = "manual"
    PREDICTED = "predicted"


@dataclass(frozen=True)
class PreprocessConfig:
    standardization: StandardizationMode = StandardizationMode.BRAIN_MASK
    roi: RoiSource = RoiSource.TUMOR
    mask_source: MaskSource = MaskSource.MANUAL
    extent: int = 96
    margin: int = 10

    def __post_init__(self):
        object.__setattr__(self, "standardization", StandardizationMode(self.standardization))
        object.__setattr__(self, "roi", RoiSource(self.roi))
        object.__setattr__(self, "mask_source", MaskSource(self.mask_source))


def roi_box(vs: VolumeSet, cfg: PreprocessConfig, tumor_mask: np.ndarray | None) -> BBox3D:
    if cfg.roi is RoiSource.WHOLE_BRAIN:
        return brain_bbox(vs.brain_mask)
    if tumor_mask is None or not np.any(tumor_mask):
        raise DataError(f"{vs.subject_id}: tumour ROI requested but the {cfg.mask_source.value} mask is empty")
    return tumor_bbox(tumor_mask, cfg.margin, vs.shape)


def preprocess_subject(vs: VolumeSet, cfg: PreprocessConfig, seg_model=None, tile: int | None = None) -> VolumeSet:
    """Standardize the whole volume, then cut and resize the ROI to ``extent``^3."""
    std = standardize(vs, cfg.standardization)
    tumor = vs.tumor_mask
    if cfg.roi is RoiSource.TUMOR and cfg.mask_source is MaskSource.PREDICTED:
        if seg_model is None:
            raise DataError("predicted tumour masks need a segmentation checkpoint")
        from .training import segment_whole_tumor

        tumor = segment_whole_tumor(seg_model, std.channels, tile=tile, brain=vs.brain_mask)
    box = roi_box(vs, cfg, tumor)
    roi = extract_resize(std, box, cfg.extent)
    brain = extract_resize_mask(vs.brain_mask, box, cfg.extent)
    if not brain.any():
        brain = np.ones_like(brain)
    tum = None if vs.tumor_mask is None else extract_resize_mask(vs.tumor_mask, box, cfg.extent)
    meta = {**vs.meta, "roi": {"kind": cfg.roi.value, "mask_source": cfg.mask_source.value,
                               "box_lo": list(box.lo), "box_hi": list(box.hi), "clipped": box.clipped,
                               "standardization": cfg.standardization.value}}
    return VolumeSet(roi, brain, tum, vs.subject_id, vs.grade, vs.spacing, meta)


class RoiDataset:
    """Grading samples read lazily from a directory of ROI containers."""

    def __init__(self, root, subjects: list[str] | None = None):
        self.ds = VolumeDataset(root, subjects)
        for sid, g in zip(self.ds.subject_ids, self.ds.grades):
            if g is None:
                raise DataError(f"{root}/{sid}: ROI has no grade label")

    def __len__(self) -> int:
        return len(self.ds)

    @property
    def ids(self) -> list[str]:
        return self.ds.subject_ids

    def load(self, i: int):
        vs = self.ds[i]
        return vs.channels, vs.brain_mask, grade_index(vs.grade)


def preprocess_tree(src, dst, cfg: PreprocessConfig, subjects: list[str] | None = None, seg_model=None,
                    tile: int | None = None) -> list[Path]:
    ds = VolumeDataset(src, subjects)
    out = []
    for d in ds.dirs:
        vs = read_volume(d)
        out.append(write_volume(preprocess_subject(vs, cfg, seg_model, tile), Path(dst) / d.name))
    return out
