import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from pe_advseg.data_io import (
    CorruptImage, CountMismatch, InvalidWindow, MissingSlices, PatientVolume, ShapeMismatch,
    load_dataset, load_volume, save_volume, split_patients, window_normalize,
)


def _volume(rng, n=3, shape=(16, 12), masks=True):
    slices = [rng.integers(-1024, 3072, shape).astype(np.int16) for _ in range(n)]
    ms = [rng.integers(0, 2, shape).astype(np.uint8) for _ in range(n)] if masks else None
    return PatientVolume("p1", slices, ms)


def test_encoding_offset(tmp_path):
    (tmp_path / "slices").mkdir()
    Image.fromarray(np.array([[1024, 0] * 4] * 8, dtype=np.uint16)).save(tmp_path / "slices" / "0000.png")
    vol = load_volume(tmp_path)
    assert vol.slices[0][0, 0] == 0
    assert vol.slices[0][0, 1] == -1024
    assert vol.masks is None


def test_save_offsets(tmp_path):
    s = np.full((8, 8), -1024, dtype=np.int16)
    s[0, 0] = 3071
    save_volume(PatientVolume("x", [s]), tmp_path)
    stored = np.asarray(Image.open(tmp_path / "slices" / "0000.png"))
    assert stored[0, 0] == 4095 and stored[1, 1] == 0
    assert not (tmp_path / "masks").exists()


def test_round_trip_bit_exact(tmp_path):
    vol = _volume(np.random.default_rng(0))
    save_volume(vol, tmp_path / "p1")
    back = load_volume(tmp_path / "p1")
    assert back.patient_id == "p1"
    for a, b in zip(vol.slices, back.slices):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(vol.masks, back.masks):
        np.testing.assert_array_equal(a, b)


def test_mask_nonzero_decodes_to_one(tmp_path):
    save_volume(PatientVolume("x", [np.zeros((8, 8), np.int16)]), tmp_path)
    (tmp_path / "masks").mkdir()
    m = np.zeros((8, 8), np.uint8)
    m[2, 3] = 7
    Image.fromarray(m).save(tmp_path / "masks" / "0000.png")
    assert load_volume(tmp_path).masks[0].sum() == 1


def test_missing_slice_index(tmp_path):
    vol = _volume(np.random.default_rng(1), masks=False)
    save_volume(vol, tmp_path)
    (tmp_path / "slices" / "0001.png").unlink()
    with pytest.raises(MissingSlices):
        load_volume(tmp_path)


def test_shape_mismatch(tmp_path):
    save_volume(PatientVolume("x", [np.zeros((8, 8), np.int16)]), tmp_path)
    (tmp_path / "masks").mkdir()
    Image.fromarray(np.zeros((9, 8), np.uint8)).save(tmp_path / "masks" / "0000.png")
    with pytest.raises(ShapeMismatch):
        load_volume(tmp_path)


def test_corrupt_image(tmp_path):
    (tmp_path / "slices").mkdir()
    (tmp_path / "slices" / "0000.png").write_bytes(b"not a png")
    with pytest.raises(CorruptImage):
        load_volume(tmp_path)


def test_load_dataset_sorted(tmp_path):
    rng = np.random.default_rng(3)
    for pid in ("b", "a"):
        save_volume(_volume(rng), tmp_path / pid)
    assert [v.patient_id for v in load_dataset(tmp_path)] == ["a", "b"]


def test_window_endpoints():
    v = np.array([[-1000, 400, -1500]])
    out = window_normalize(v, -1000, 400)
    assert out.tolist() == [[0.0, 1.0, 0.0]]
    with pytest.raises(InvalidWindow):
        window_normalize(v, 10, 10)


@given(st.lists(st.integers(-1024, 3071), min_size=2, max_size=50))
def test_window_monotone_and_bounded(values):
    vals = np.sort(np.array(values))
    out = window_normalize(vals[None, :])[0]
    assert np.all(np.diff(out) >= 0)
    assert out.min() >= 0 and out.max() <= 1


def test_split_counts_and_determinism():
    ids = [f"p{i}" for i in range(33)]
    s = split_patients(ids, (27, 6, 0), seed=5)
    assert (len(s.train), len(s.val), len(s.test)) == (27, 6, 0)
    assert s == split_patients(ids, (27, 6, 0), seed=5)
    with pytest.raises(CountMismatch):
        split_patients(ids, (10, 10, 10), seed=5)


@settings(max_examples=50)
@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40), st.integers(0, 2**32 - 1))
def test_split_disjoint(a, b, c, seed):
    ids = [f"id{i}" for i in range(a + b + c)]
    s = split_patients(ids, (a, b, c), seed)
    assert not set(s.train) & set(s.val)
    assert not set(s.train) & set(s.test)
    assert not set(s.val) & set(s.test)
    assert sorted(s.train + s.val + s.test) == sorted(ids)
