"""Volume container, NIfTI-1 import and dataset directory helpers.

Container layout (one directory per subject)::

    meta.json           dims [D,H,W], channels, masks, spacing, dtype tags, byte order
    <channel>.raw       float32 little-endian, C order (z, y, x)
    mask_<name>.raw     uint8, C order

``meta.json`` is written with sorted keys and a trailing newline so the same
volume always produces the same bytes.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .volume import CHANNELS, VolumeSet

FORMAT = "gliograd-volume"
FORMAT_VERSION = 1
_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_volume(vs: VolumeSet, path, extra_channels: dict[str, np.ndarray] | None = None) -> Path:
    """Write ``vs`` as a container directory; returns the directory path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    masks = {"brain": vs.brain_mask}
    if vs.tumor_mask is not None:
        masks["tumor"] = vs.tumor_mask
    meta = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "dims": list(vs.shape),
        "channels": list(CHANNELS),
        "channel_dtype": "float32",
        "masks": sorted(masks),
        "mask_dtype": "uint8",
        "byte_order": "little",
        "spacing_mm": [float(s) for s in vs.spacing],
        "subject_id": vs.subject_id,
        "grade": vs.grade,
        "extra": vs.meta,
    }
    if extra_channels:
        meta["extra_channels"] = sorted(extra_channels)
    _dump_json(meta, path / "meta.json")
    for i, name in enumerate(CHANNELS):
        (path / f"{name}.raw").write_bytes(np.ascontiguousarray(vs.channels[i], dtype="<f4").tobytes())
    for name, m in masks.items():
        (path / f"mask_{name}.raw").write_bytes(np.ascontiguousarray(m, dtype="u1").tobytes())
    for name, arr in (extra_channels or {}).items():
        (path / f"{name}.raw").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def _read_raw(path: Path, label: str, dims, dtype: np.dtype) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing channel {label!r}: {path} not found")
    data = path.read_bytes()
    want = int(np.prod(dims)) * dtype.itemsize
    if len(data) != want:
        raise DataError(f"size mismatch in channel {label!r}: {len(data)} bytes, expected {want}")
    return np.frombuffer(data, dtype=dtype).reshape(dims).copy()


def read_meta(path) -> dict:
    mp = Path(path) / "meta.json"
    if not mp.exists():
        raise DataError(f"{path}: meta.json not found")
    try:
        meta = json.loads(mp.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{mp}: invalid JSON ({exc})") from None
    for key in ("dims", "channels", "channel_dtype", "mask_dtype", "byte_order"):
        if key not in meta:
            raise DataError(f"{mp}: missing field {key!r}")
    for key in ("channel_dtype", "mask_dtype"):
        if meta[key] not in _DTYPES:
            raise DataError(f"{mp}: unknown dtype {meta[key]!r}")
    if meta["byte_order"] != "little":
        raise DataError(f"{mp}: unsupported byte order {meta['byte_order']!r}")
    if len(meta["dims"]) != 3 or any(int(d) < 1 for d in meta["dims"]):
        raise DataError(f"{mp}: dims must be three positive integers, got {meta['dims']}")
    return meta


def read_volume(path) -> VolumeSet:
    path = Path(path)
    meta = read_meta(path)
    dims = tuple(int(d) for d in meta["dims"])
    if list(meta["channels"]) != list(CHANNELS):
        raise DataError(f"{path}: expected channels {list(CHANNELS)}, got {meta['channels']}")
    cdt, mdt = _DTYPES[meta["channel_dtype"]], _DTYPES[meta["mask_dtype"]]
    chans = np.stack([_read_raw(path / f"{c}.raw", c, dims, cdt) for c in CHANNELS])
    masks = {m: _read_raw(path / f"mask_{m}.raw", f"mask_{m}", dims, mdt) for m in meta.get("masks", [])}
    if "brain" not in masks:
        raise DataError(f"{path}: missing channel 'mask_brain'")
    return VolumeSet(chans, masks["brain"], masks.get("tumor"), subject_id=meta.get("subject_id", path.name),
                     grade=meta.get("grade"), spacing=tuple(meta.get("spacing_mm", (1.0, 1.0, 1.0))),
                     meta=meta.get("extra") or {})


def read_extra_channel(path, name: str) -> np.ndarray:
    meta = read_meta(path)
    return _read_raw(Path(path) / f"{name}.raw", name, tuple(meta["dims"]), _DTYPES["float32"])


def write_array(arr: np.ndarray, path, name: str = "map") -> Path:
    """Store a single float field (e.g. an explanation map) in the container style."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr, dtype=np.float32)
    _dump_json({"format": FORMAT + "-array", "format_version": FORMAT_VERSION, "shape": list(arr.shape),
                "dtype": "float32", "byte_order": "little", "name": name}, path / f"{name}.json")
    (path / f"{name}.raw").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path / f"{name}.raw"


def read_array(path, name: str = "map") -> np.ndarray:
    path = Path(path)
    meta = json.loads((path / f"{name}.json").read_text(encoding="utf-8"))
    return _read_raw(path / f"{name}.raw", name, tuple(meta["shape"]), _DTYPES["float32"])


# ---------------------------------------------------------------- NIfTI-1

_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64,
    256: np.int8, 512: np.uint16, 768: np.uint32,
}


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Minimal NIfTI-1 reader: 3D scalar volumes, returned in (z, y, x) order."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 348:
        raise DataError(f"{path}: file shorter than a NIfTI-1 header")
    endian = None
    for e in ("<", ">"):
        if struct.unpack_from(e + "i", raw, 0)[0] == 348:
            endian = e
    if endian is None:
        raise DataError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(endian + "f", raw, 108)[0])
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", raw, 112)
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d > 1 for d in dim[4 : ndim + 1]):
        raise DataError(f"{path}: unsupported NIfTI dimension code dim[0]={ndim} (dims {dim[1:ndim + 1]})")
    if datatype not in _NIFTI_DTYPES:
        raise DataError(f"{path}: unsupported NIfTI datatype code {datatype}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    n = nx * ny * nz
    if len(raw) < vox_offset + n * dt.itemsize:
        raise DataError(f"{path}: NIfTI data truncated")
    # file order is x fastest, so a C-order reshape to (z, y, x) is exact
    data = np.frombuffer(raw, dtype=dt, count=n, offset=vox_offset).reshape(nz, ny, nx)
    data = data.astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        if scl_slope != 0.0:
            data = data * np.float32(scl_slope) + np.float32(scl_inter)
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return data, spacing


def write_nifti(data: np.ndarray, path, spacing=(1.0, 1.0, 1.0), datatype: int = 16) -> Path:
    """Write a (z, y, x) volume as a single-file NIfTI-1 (used for tests and fixtures)."""
    data = np.asarray(data)
    nz, ny, nx = data.shape
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    struct.pack_into("<hh", hdr, 70, datatype, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[2], spacing[1], spacing[0], 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    payload = bytes(hdr) + np.ascontiguousarray(data, dtype=dt).tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(payload, mtime=0) if path.suffix == ".gz" else payload)
    return path


_BRATS_SUFFIX = {"T1": "t1", "T1c": "t1ce", "T2": "t2", "FLAIR": "flair"}


def _find_modality(subject_dir: Path, suffix: str) -> Path:
    for ext in (".nii.gz", ".nii"):
        hits = sorted(subject_dir.glob(f"*_{suffix}{ext}"))
        if hits:
            return hits[0]
    raise DataError(f"{subject_dir}: missing channel {suffix!r} (*_{suffix}.nii[.gz])")


def import_nifti_minimal(subject_dir, grade: str | None = None) -> VolumeSet:
    """Load a BRATS-style subject directory (``*_t1``, ``*_t1ce``, ``*_t2``, ``*_flair``, ``*_seg``).

    The brain mask is the set of voxels nonzero in any channel (skull-stripped
    inputs).  Any nonzero label in ``*_seg`` counts as tumour.
    """
    subject_dir = Path(subject_dir)
    chans, spacing = [], None
    for c in CHANNELS:
        arr, sp = read_nifti(_find_modality(subject_dir, _BRATS_SUFFIX[c]))
        if chans and arr.shape != chans[0].shape:
            raise DataError(f"{subject_dir}: channel {c} has shape {arr.shape}, expected {chans[0].shape}")
        chans.append(arr)
        spacing = spacing or sp
    stack = np.stack(chans)
    brain = (stack != 0).any(axis=0)
    tumor = None
    try:
        seg, _ = read_nifti(_find_modality(subject_dir, "seg"))
        tumor = (seg != 0).astype(np.uint8)
    except DataError:
        pass
    return VolumeSet(stack, brain, tumor, subject_id=subject_dir.name, grade=grade, spacing=spacing)


# ---------------------------------------------------------------- datasets

def list_subjects(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset directory not found")
    return sorted(p for p in root.iterdir() if (p / "meta.json").exists())


class VolumeDataset:
    """Lazy, read-only view over a directory of containers (one per subject)."""

    def __init__(self, root, subjects: list[str] | None = None):
        self.root = Path(root)
        dirs = list_subjects(self.root)
        if subjects is not None:
            by_name = {d.name: d for d in dirs}
            missing = [s for s in subjects if s not in by_name]
            if missing:
                raise DataError(f"{root}: subjects not found: {missing[:5]}")
            dirs = [by_name[s] for s in subjects]
        self.dirs = dirs
        self._meta = [read_meta(d) for d in dirs]

    def __len__(self) -> int:
        return len(self.dirs)

    def __getitem__(self, i: int) -> VolumeSet:
        return read_volume(self.dirs[i])

    @property
    def subject_ids(self) -> list[str]:
        return [m.get("subject_id", d.name) for m, d in zip(self._meta, self.dirs)]

    @property
    def grades(self) -> list[str | None]:
        return [m.get("grade") for m in self._meta]


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(obj, path)
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
