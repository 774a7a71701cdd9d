"""Synthetic multi-sequence brain phantoms with HGG-like and LGG-like tumours.

HGG-like: necrotic core, contrast-enhancing T1c rim, FLAIR-bright oedema,
and a radial displacement of the surrounding tissue (mass effect).
LGG-like: smaller, diffuse, non-enhancing blob.  Everything is a pure
function of the :class:`PhantomSpec` (including its seed).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .volume import VolumeSet

# tissue contrasts relative to the brain baseline, per channel (T1, T1c, T2, FLAIR)
_TISSUE = np.array([1.0, 1.0, 0.8, 0.9])
_VENTRICLE = np.array([-0.5, -0.5, 0.6, -0.4])
_RIM_AMPLITUDE = 1.0
_CORE_FRACTION = 0.45


@dataclass(frozen=True)
class PhantomSpec:
    extent: int = 96
    grade: str = "HGG"
    center: tuple[float, float, float] | None = None
    radii: tuple[float, float, float] = (13.0, 12.0, 12.5)
    rim_thickness: float = 2.5
    diffuse_blur: float = 2.5
    mass_effect: float = 3.0
    noise: float = 0.05
    background_offset: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.grade not in ("HGG", "LGG"):
            raise ValueError(f"grade must be HGG or LGG, got {self.grade!r}")
        if any(r <= 0 for r in self.radii):
            raise ValueError("tumour radii must be positive")

    @property
    def tumor_center(self) -> np.ndarray:
        if self.center is None:
            e = self.extent
            return np.array([0.5 * e, 0.5 * e, 0.62 * e])
        return np.asarray(self.center, dtype=np.float64)

    def as_dict(self) -> dict:
        return asdict(self)


def brain_radii(extent: int) -> np.ndarray:
    return np.array([0.40, 0.45, 0.42]) * extent


def rim_threshold(spec: PhantomSpec) -> float:
    """T1c level above which a voxel counts as rim-enhancing."""
    return spec.background_offset * _TISSUE[1] + 0.5 * _RIM_AMPLITUDE


def _grid(extent: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ax = np.arange(extent, dtype=np.float64)
    return np.meshgrid(ax, ax, ax, indexing="ij")


def _texture(coords, rng: np.random.Generator, extent: int) -> np.ndarray:
    """Smooth bounded texture: a few random low-frequency cosines (|t| <= 0.08)."""
    z, y, x = coords
    tex = np.zeros_like(z)
    n_waves = 6
    for _ in range(n_waves):
        k = rng.normal(size=3)
        k *= rng.uniform(2.0, 6.0) * 2 * np.pi / extent / np.linalg.norm(k)
        tex += np.cos(k[0] * z + k[1] * y + k[2] * x + rng.uniform(0, 2 * np.pi))
    return 0.08 * tex / n_waves


def generate_phantom(spec: PhantomSpec, subject_id: str | None = None) -> VolumeSet:
    e = spec.extent
    rng = np.random.default_rng(spec.seed)
    z, y, x = _grid(e)
    mid = (e - 1) / 2.0
    br = brain_radii(e)
    brain = (((z - mid) / br[0]) ** 2 + ((y - mid) / br[1]) ** 2 + ((x - mid) / br[2]) ** 2) <= 1.0

    c = spec.tumor_center
    r = np.asarray(spec.radii, dtype=np.float64)
    rho = np.sqrt(((z - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((x - c[2]) / r[2]) ** 2)
    tumor = rho <= 1.0
    if not tumor.any() or np.any(tumor & ~brain):
        raise DataError("tumour ellipsoid extends outside the brain mask")

    # mass effect: tissue is sampled from positions pulled back toward the tumour
    dist = np.sqrt((z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2) + 1e-6
    r_mean = float(r.mean())
    push = spec.mass_effect * np.minimum(1.0, (r_mean / dist) ** 2)
    sz, sy, sx = (z - (z - c[0]) / dist * push, y - (y - c[1]) / dist * push, x - (x - c[2]) / dist * push)

    tex = _texture((sz, sy, sx), rng, e)
    vr = np.array([0.10, 0.05, 0.04]) * e
    ventricles = np.zeros_like(z, dtype=bool)
    for side in (-1, 1):
        vc = np.array([mid, mid, mid + side * 0.07 * e])
        ventricles |= (((sz - vc[0]) / vr[0]) ** 2 + ((sy - vc[1]) / vr[1]) ** 2
                       + ((sx - vc[2]) / vr[2]) ** 2) <= 1.0
    ventricles &= ~tumor

    b = spec.background_offset
    chans = np.empty((4, e, e, e), dtype=np.float64)
    for ch in range(4):
        chans[ch] = b * _TISSUE[ch] + tex + _VENTRICLE[ch] * ventricles

    if spec.grade == "HGG":
        rim_outer = _CORE_FRACTION + spec.rim_thickness / r_mean
        core = rho < _CORE_FRACTION
        rim = (rho >= _CORE_FRACTION) & (rho <= rim_outer)
        chans[0] += -0.3 * tumor
        chans[1] += -0.4 * core + _RIM_AMPLITUDE * rim
        chans[2] += 0.7 * tumor
        chans[3] += 0.8 * tumor + 0.4 * core
    else:
        s = 1.0 / (1.0 + np.exp(-(1.0 - rho) * r_mean / spec.diffuse_blur))
        chans[0] += -0.2 * s
        chans[2] += 0.6 * s
        chans[3] += 0.6 * s

    chans += rng.normal(0.0, spec.noise, size=chans.shape)
    chans *= brain
    sid = subject_id or f"phantom-{spec.grade.lower()}-{spec.seed}"
    return VolumeSet(chans.astype(np.float32), brain.astype(np.uint8), tumor.astype(np.uint8),
                     subject_id=sid, grade=spec.grade, meta={"phantom": spec.as_dict()})


def rim_contrast(vs: VolumeSet) -> float:
    """99th-percentile T1c inside the tumour minus median T1c in the brain."""
    t1c = vs.channels[1]
    tumor = vs.tumor_mask.astype(bool)
    return float(np.percentile(t1c[tumor], 99) - np.median(t1c[vs.brain_mask.astype(bool)]))


def sample_phantom_spec(grade: str, seed: int, extent: int = 96, noise: float = 0.05,
                        background_offset: float = 1.0) -> PhantomSpec:
    """Random but valid tumour placement/size for one subject."""
    rng = np.random.default_rng([seed, 7919])
    s = extent / 96.0
    mid = (extent - 1) / 2.0
    if grade == "HGG":
        radii = rng.uniform(11.0, 15.0, size=3) * s
        mass = rng.uniform(2.0, 4.0) * s
    else:
        radii = rng.uniform(8.0, 11.5, size=3) * s
        mass = rng.uniform(0.0, 1.0) * s
    br = brain_radii(extent)
    # keep the ellipsoid well inside the brain ellipsoid
    room = np.maximum(br - radii - 3 * s, 0) / np.sqrt(3)
    center = mid + rng.uniform(-1.0, 1.0, size=3) * room * 0.8
    return PhantomSpec(extent=extent, grade=grade, center=tuple(float(v) for v in center),
                       radii=tuple(float(v) for v in radii), mass_effect=float(mass), noise=noise,
                       background_offset=background_offset, seed=int(seed))


def phantom_cohort(n: int, seed: int, extent: int = 96, noise: float = 0.05,
                   background_offset: float = 1.0) -> list[PhantomSpec]:
    """``n`` specs, grades alternating HGG/LGG (balanced), seeds derived from ``seed``."""
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
    return [sample_phantom_spec("HGG" if i % 2 == 0 else "LGG", int(seeds[i]), extent, noise, background_offset)
            for i in range(n)]
