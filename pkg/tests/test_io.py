import gzip
import json
import struct

import numpy as np
import pytest

from gliograd.errors import DataError
from gliograd.io import (import_nifti_minimal, read_array, read_nifti, read_volume, write_array, write_nifti,
                         write_volume, VolumeDataset)
from gliograd.volume import CHANNELS, VolumeSet


def small_vs(seed=0, shape=(6, 7, 8)):
    rng = np.random.default_rng(seed)
    brain = np.zeros(shape, np.uint8)
    brain[1:-1, 1:-1, 1:-1] = 1
    tumor = np.zeros(shape, np.uint8)
    tumor[2:4, 2:4, 2:4] = 1
    return VolumeSet(rng.normal(size=(4,) + shape).astype(np.float32), brain, tumor, "s1", "HGG", (1.0, 1.0, 2.5),
                     {"note": "x"})


def tree_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_round_trip_is_bitwise(tmp_path):
    vs = small_vs()
    write_volume(vs, tmp_path / "a")
    back = read_volume(tmp_path / "a")
    assert back.channels.tobytes() == vs.channels.tobytes()
    assert np.array_equal(back.brain_mask, vs.brain_mask) and np.array_equal(back.tumor_mask, vs.tumor_mask)
    assert (back.subject_id, back.grade, back.spacing, back.meta) == ("s1", "HGG", (1.0, 1.0, 2.5), {"note": "x"})
    write_volume(back, tmp_path / "b")
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_raw_lengths_follow_format(tmp_path):
    vs = VolumeSet(np.zeros((4, 96, 96, 96), np.float32), np.ones((96, 96, 96)))
    write_volume(vs, tmp_path / "v")
    meta = json.loads((tmp_path / "v" / "meta.json").read_text())
    assert meta["dims"] == [96, 96, 96] and meta["channels"] == list(CHANNELS)
    total = sum((tmp_path / "v" / f"{c}.raw").stat().st_size for c in CHANNELS)
    assert total == 4 * 96**3 * 4
    assert (tmp_path / "v" / "mask_brain.raw").stat().st_size == 96**3


def test_truncated_channel_named(tmp_path):
    write_volume(small_vs(), tmp_path / "a")
    raw = tmp_path / "a" / "T2.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(DataError, match="T2"):
        read_volume(tmp_path / "a")


def test_missing_channel_and_unknown_dtype(tmp_path):
    write_volume(small_vs(), tmp_path / "a")
    (tmp_path / "a" / "FLAIR.raw").unlink()
    with pytest.raises(DataError, match="FLAIR"):
        read_volume(tmp_path / "a")
    write_volume(small_vs(), tmp_path / "b")
    meta = json.loads((tmp_path / "b" / "meta.json").read_text())
    meta["channel_dtype"] = "float16"
    (tmp_path / "b" / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DataError, match="dtype"):
        read_volume(tmp_path / "b")


def test_array_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(4, 3, 5, 2)).astype(np.float32)
    write_array(a, tmp_path, "gbp")
    np.testing.assert_array_equal(read_array(tmp_path, "gbp"), a)


def test_dataset_is_lazy_and_sorted(tmp_path):
    for i in (2, 0, 1):
        vs = small_vs(i)
        vs.subject_id = f"s{i}"
        write_volume(vs, tmp_path / f"s{i}")
    ds = VolumeDataset(tmp_path)
    assert ds.subject_ids == ["s0", "s1", "s2"] and ds.grades == ["HGG"] * 3
    assert ds[1].subject_id == "s1"
    with pytest.raises(DataError):
        VolumeDataset(tmp_path, ["nope"])


# --------------------------------------------------------------- NIfTI

def hand_header(dims, datatype, bitpix, pixdim, ndim=3):
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, ndim, *dims, *([1] * (7 - len(dims))))
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, *([1.0] * (7 - len(pixdim))))
    struct.pack_into("<f", hdr, 108, 352.0)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def test_nifti_header_fields_drive_dims_and_spacing(tmp_path):
    nx, ny, nz = 5, 4, 3
    data = np.arange(nx * ny * nz, dtype="<i2")
    (tmp_path / "a.nii").write_bytes(hand_header((nx, ny, nz), 4, 16, (0.5, 1.5, 3.0)) + data.tobytes())
    vol, spacing = read_nifti(tmp_path / "a.nii")
    assert vol.shape == (nz, ny, nx)
    assert spacing == (3.0, 1.5, 0.5)
    # x runs fastest in the file
    assert vol[0, 0, 1] == 1 and vol[0, 1, 0] == nx and vol[1, 0, 0] == nx * ny


def test_nifti_round_trip_gz(tmp_path):
    vol = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    write_nifti(vol, tmp_path / "v.nii.gz", spacing=(2.0, 1.0, 1.0))
    back, sp = read_nifti(tmp_path / "v.nii.gz")
    np.testing.assert_array_equal(back, vol)
    assert sp == (2.0, 1.0, 1.0)
    assert gzip.decompress((tmp_path / "v.nii.gz").read_bytes())[:4] == struct.pack("<i", 348)


def test_nifti_unsupported_codes(tmp_path):
    (tmp_path / "4d.nii").write_bytes(hand_header((2, 2, 2, 3), 16, 32, (1, 1, 1, 1), ndim=4) + bytes(4 * 24))
    with pytest.raises(DataError, match="dimension code"):
        read_nifti(tmp_path / "4d.nii")
    (tmp_path / "rgb.nii").write_bytes(hand_header((2, 2, 2), 128, 24, (1, 1, 1)) + bytes(3 * 8))
    with pytest.raises(DataError, match="128"):
        read_nifti(tmp_path / "rgb.nii")


def test_import_brats_style_subject(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "Brats17_X_1"
    d.mkdir()
    brain = np.zeros((6, 6, 6), bool)
    brain[1:5, 1:5, 1:5] = True
    for suffix in ("t1", "t1ce", "t2", "flair"):
        write_nifti((rng.random((6, 6, 6)) + 1) * brain, d / f"Brats17_X_1_{suffix}.nii.gz")
    seg = np.zeros((6, 6, 6), np.uint8)
    seg[2, 2, 2], seg[3, 3, 3] = 4, 2
    write_nifti(seg, d / "Brats17_X_1_seg.nii.gz", datatype=2)
    vs = import_nifti_minimal(d, grade="LGG")
    assert vs.shape == (6, 6, 6) and vs.grade == "LGG"
    np.testing.assert_array_equal(vs.brain_mask.astype(bool), brain)
    assert vs.tumor_mask.sum() == 2
    (d / "Brats17_X_1_t2.nii.gz").unlink()
    with pytest.raises(DataError, match="t2"):
        import_nifti_minimal(d)
