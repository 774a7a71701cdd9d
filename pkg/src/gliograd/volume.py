"""Core volume types shared by the ROI, I/O and phantom modules."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

CHANNELS = ("T1", "T1c", "T2", "FLAIR")
GRADES = ("LGG", "HGG")


def grade_index(grade: str) -> int:
    try:
        return GRADES.index(grade)
    except ValueError:
        raise DataError(f"unknown grade {grade!r}; expected one of {GRADES}") from None


@dataclass
class VolumeSet:
    """Four co-registered MRI channels plus masks for one subject.

    ``channels`` is (4, D, H, W) float32; masks are (D, H, W) uint8.
    """

    channels: np.ndarray
    brain_mask: np.ndarray
    tumor_mask: np.ndarray | None = None
    subject_id: str = "subject"
    grade: str | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        self.brain_mask = np.asarray(self.brain_mask).astype(np.uint8)
        if self.channels.ndim != 4 or self.channels.shape[0] != len(CHANNELS):
            raise DataError(f"channels must be (4, D, H, W), got {self.channels.shape}")
        if self.brain_mask.shape != self.shape:
            raise DataError(f"brain mask shape {self.brain_mask.shape} != volume shape {self.shape}")
        if not self.brain_mask.any():
            raise DataError(f"{self.subject_id}: brain mask is empty")
        if self.tumor_mask is not None:
            self.tumor_mask = np.asarray(self.tumor_mask)
            if self.tumor_mask.shape != self.shape:
                raise DataError(f"tumor mask shape {self.tumor_mask.shape} != volume shape {self.shape}")
        if self.grade is not None:
            grade_index(self.grade)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.channels.shape[1:])

    def with_channels(self, channels: np.ndarray, **changes) -> VolumeSet:
        return replace(self, channels=channels, **changes)


@dataclass(frozen=True)
class BBox3D:
    """Axis-aligned box with inclusive (low, high) voxel indices per axis."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    clipped: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"invalid box: low {self.lo} > high {self.hi}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    def contains(self, other: BBox3D) -> bool:
        return all(a <= b for a, b in zip(self.lo, other.lo)) and all(a >= b for a, b in zip(self.hi, other.hi))

    def as_pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.lo, self.hi))
