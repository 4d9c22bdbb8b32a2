import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from octree_nca.data import (
    DatasetManifest,
    ExtentMismatch,
    UnreadableFile,
    VolumeFormatError,
    gen_synthetic,
    load_image,
    load_mask,
    load_sample,
    load_volume,
    make_stripes2d,
    save_mask,
    save_volume,
    split_patients,
)


@settings(max_examples=25, deadline=None)
@given(
    shape=st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(1, 3)),
    u8=st.booleans(),
    seed=st.integers(0, 2**16),
)
def test_volume_round_trip(tmp_path_factory, shape, u8, seed):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, shape).astype(np.uint8) if u8 else rng.normal(size=shape).astype(np.float32)
    path = tmp_path_factory.mktemp("v") / "x.ovol"
    save_volume(arr, path)
    back = load_volume(path)
    assert back.dtype == arr.dtype and back.tobytes() == arr.tobytes() and back.shape == arr.shape
    raw = path.read_bytes()
    assert raw[:4] == b"OVOL"
    assert struct.unpack("<6I", raw[4:28])[1:5] == shape
    assert len(raw) == 28 + arr.nbytes


def test_volume_errors(tmp_path):
    p = tmp_path / "v.ovol"
    save_volume(np.zeros((2, 2, 2, 1), np.float32), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-1])
    with pytest.raises(VolumeFormatError):
        load_volume(p)
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(VolumeFormatError):
        load_volume(p)
    p.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(VolumeFormatError):
        load_volume(p)
    with pytest.raises(UnreadableFile):
        load_volume(tmp_path / "missing.ovol")
    with pytest.raises(ValueError):
        save_volume(np.zeros((2, 2, 2, 1), np.int64), p)


def test_png_scaling(tmp_path):
    arr = np.array([[0, 128, 255]], np.uint8)
    Image.fromarray(arr).save(tmp_path / "i.png")
    img = load_image(tmp_path / "i.png")
    assert img.data.shape == (1, 3, 1) and img.image_channels == 1
    assert img.data[0, 2, 0] == 1.0 and img.data[0, 0, 0] == 0.0
    assert img.data.dtype == np.float32


def test_rgb_png(tmp_path):
    Image.fromarray(np.full((2, 3, 3), 255, np.uint8)).save(tmp_path / "c.png")
    img = load_image(tmp_path / "c.png")
    assert img.data.shape == (2, 3, 3) and img.image_channels == 3


@pytest.mark.parametrize("suffix,shape", [(".png", (7, 5)), (".ovol", (4, 3, 2))])
def test_mask_round_trip(tmp_path, suffix, shape):
    mask = np.random.default_rng(0).integers(0, 4, shape).astype(np.uint8)
    save_mask(mask, tmp_path / f"m{suffix}")
    np.testing.assert_array_equal(load_mask(tmp_path / f"m{suffix}"), mask)


def test_extent_mismatch_and_unreadable(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "i.png")
    save_mask(np.zeros((4, 5), np.uint8), tmp_path / "m.png")
    with pytest.raises(ExtentMismatch):
        load_sample(tmp_path / "i.png", tmp_path / "m.png")
    (tmp_path / "junk.png").write_bytes(b"not a png")
    with pytest.raises(UnreadableFile):
        load_sample(tmp_path / "junk.png", tmp_path / "m.png")
    with pytest.raises(UnreadableFile):
        load_mask(tmp_path / "absent.png")
    # the two failure kinds are distinct
    assert not issubclass(ExtentMismatch, UnreadableFile) and not issubclass(UnreadableFile, ExtentMismatch)


def test_gen_count_zero(tmp_path):
    m = gen_synthetic("disks2d", 0, (16, 16), 0, tmp_path)
    assert m.samples == []
    assert json.loads((tmp_path / "manifest.json").read_text())["samples"] == []


@pytest.mark.parametrize("task,extents", [("disks2d", (24, 20)), ("blobs3d", (12, 12, 6)), ("stripes2d", (16, 16))])
def test_gen_deterministic(tmp_path, task, extents):
    a = gen_synthetic(task, 3, extents, 7, tmp_path / "a")
    gen_synthetic(task, 3, extents, 7, tmp_path / "b")
    for e in a.samples:
        for key in ("image", "mask"):
            assert (tmp_path / "a" / e[key]).read_bytes() == (tmp_path / "b" / e[key]).read_bytes()
    samples = DatasetManifest.read(tmp_path / "a" / "manifest.json").load()
    assert len(samples) == 3
    for s in samples:
        assert s.image.dims == extents and s.mask.shape == extents
        assert 0 <= s.image.data.min() and s.image.data.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1}


def test_gen_rejects_bad_extents(tmp_path):
    with pytest.raises(ValueError):
        gen_synthetic("blobs3d", 1, (8, 8), 0, tmp_path)
    with pytest.raises(ValueError):
        gen_synthetic("nope", 1, (8, 8), 0, tmp_path)


def test_stripes_marker_flip():
    img1, m1 = make_stripes2d(np.random.default_rng(4), (32, 32), marker=1)
    img0, m0 = make_stripes2d(np.random.default_rng(4), (32, 32), marker=0)
    np.testing.assert_array_equal(m1, 1 - m0)
    differ = np.argwhere(img1[..., 0] != img0[..., 0])
    k = 8
    assert differ.size and differ.max() < k
    np.testing.assert_array_equal(img1[:k, :k], 1.0)
    np.testing.assert_array_equal(img0[:k, :k], 0.0)


def test_patient_split():
    patients = [f"p{i}" for i in range(20)] * 2
    split = split_patients(patients)
    assert set(split) == set(patients)
    assert sum(v == "test" for v in split.values()) == 6
    assert split == split_patients(patients)


def test_manifest_split_has_no_shared_patients(tmp_path):
    m = gen_synthetic("disks2d", 10, (16, 16), 1, tmp_path)
    train = {e["patient"] for e in m.split("train")}
    test = {e["patient"] for e in m.split("test")}
    assert not train & test and len(test) == 3 and len(train) == 7
