import numpy as np
import pytest

from sepseg.autograd import Rng
from sepseg.data import (
    CheckpointError,
    DataError,
    NiftiError,
    build_slice_dataset,
    generate_phantom,
    load_checkpoint,
    load_into_model,
    read_nifti,
    save_checkpoint,
    write_pgm,
)
from sepseg.metrics import overlap_score
from sepseg.model import ModelSpec, build_model

from conftest import make_nifti


class TestNiftiReader:
    def test_basic_int16_roundtrip(self, nifti_factory):
        data = np.arange(32, dtype=np.int16).reshape(2, 4, 4)
        vol = read_nifti(nifti_factory("v.nii", data))
        assert vol.dims == (4, 4, 2)
        np.testing.assert_array_equal(vol.voxels, data.astype(np.float32))

    def test_slope_intercept(self, nifti_factory):
        data = np.arange(32, dtype=np.int16).reshape(2, 4, 4)
        vol = read_nifti(nifti_factory("v.nii", data, slope=2.0, inter=-1000.0))
        np.testing.assert_array_equal(vol.voxels, 2.0 * data - 1000.0)

    def test_zero_slope_treated_as_one(self, nifti_factory):
        data = np.ones((1, 2, 2), dtype=np.int16) * 7
        vol = read_nifti(nifti_factory("v.nii", data, slope=0.0, inter=3.0))
        np.testing.assert_array_equal(vol.voxels, 10.0)

    def test_float32_payload(self, nifti_factory):
        data = np.random.default_rng(0).normal(size=(2, 3, 3)).astype(np.float32)
        vol = read_nifti(nifti_factory("v.nii", data, datatype=16))
        np.testing.assert_array_equal(vol.voxels, data)

    def test_big_endian_detected(self, nifti_factory):
        data = np.arange(8, dtype=np.int16).reshape(1, 2, 4)
        vol = read_nifti(nifti_factory("v.nii", data, byteorder=">"))
        np.testing.assert_array_equal(vol.voxels, data)

    def test_detached_header_rejected(self, nifti_factory):
        data = np.zeros((1, 2, 2), dtype=np.int16)
        path = nifti_factory("v.nii", data, magic=b"ni1\x00")
        with pytest.raises(NiftiError, match="detached header"):
            read_nifti(path)

    def test_bad_magic(self, nifti_factory):
        path = nifti_factory("v.nii", np.zeros((1, 2, 2), dtype=np.int16),
                             magic=b"XXXX")
        with pytest.raises(NiftiError, match="magic"):
            read_nifti(path)

    def test_unsupported_datatype(self, nifti_factory):
        path = nifti_factory("v.nii", np.zeros((1, 2, 2), dtype=np.int16),
                             datatype=64)
        with pytest.raises(NiftiError, match="datatype"):
            read_nifti(path)

    def test_truncated_payload(self, nifti_factory):
        path = nifti_factory("v.nii", np.zeros((2, 4, 4), dtype=np.int16),
                             truncate=10)
        with pytest.raises(NiftiError, match="truncated"):
            read_nifti(path)


def _volume_pair(z=5, side=32, lesion_slices=(2,)):
    rng = np.random.default_rng(0)
    img = rng.integers(-200, 300, (z, side, side)).astype(np.int16)
    mask = np.zeros((z, side, side), dtype=np.int16)
    for i in lesion_slices:
        mask[i, 8:16, 8:16] = 1
    return img, mask


class TestSliceDataset:
    def _read(self, nifti_factory, img, mask, name="0"):
        from sepseg.data import read_nifti

        v = read_nifti(nifti_factory(f"volume-{name}.nii", img))
        m = read_nifti(nifti_factory(f"segmentation-{name}.nii", mask))
        return v, m

    def test_all_filter_keeps_every_slice(self, nifti_factory):
        img, mask = _volume_pair()
        v, m = self._read(nifti_factory, img, mask)
        samples = build_slice_dataset({"0": v}, {"0": m}, resize=32)
        assert len(samples) == 5
        assert [s.slice_index for s in samples] == [0, 1, 2, 3, 4]

    def test_lesion_filter_empty_when_no_lesion(self, nifti_factory):
        img, mask = _volume_pair(lesion_slices=())
        v, m = self._read(nifti_factory, img, mask)
        samples = build_slice_dataset({"0": v}, {"0": m}, resize=32,
                                      slice_filter="lesion", neighbor_k=0)
        assert samples == []

    def test_lesion_filter_with_neighbors(self, nifti_factory):
        img, mask = _volume_pair(lesion_slices=(2,))
        v, m = self._read(nifti_factory, img, mask)
        samples = build_slice_dataset({"0": v}, {"0": m}, resize=32,
                                      slice_filter="lesion", neighbor_k=1)
        assert [s.slice_index for s in samples] == [1, 2, 3]

    def test_pipeline_value_ranges(self, nifti_factory):
        img, mask = _volume_pair()
        v, m = self._read(nifti_factory, img, mask)
        for s in build_slice_dataset({"0": v}, {"0": m}, resize=32):
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert set(np.unique(s.mask)) <= {0, 1}

    def test_missing_mask(self, nifti_factory):
        img, mask = _volume_pair()
        v, _ = self._read(nifti_factory, img, mask)
        with pytest.raises(DataError, match="'0'"):
            build_slice_dataset({"0": v}, {}, resize=32)

    def test_dim_mismatch(self, nifti_factory):
        img, _ = _volume_pair()
        v, _ = self._read(nifti_factory, img, np.zeros((5, 32, 32), dtype=np.int16))
        bad_mask = read_nifti(
            nifti_factory("segmentation-bad.nii", np.zeros((3, 32, 32), dtype=np.int16))
        )
        with pytest.raises(DataError, match="dims"):
            build_slice_dataset({"0": v}, {"0": bad_mask}, resize=32)


class TestPhantoms:
    def test_count_and_nonempty_masks(self):
        samples = generate_phantom(Rng(0, 9), 64, 8)
        assert len(samples) == 8
        for s in samples:
            assert s.mask.any()
            assert s.image.shape == (1, 64, 64)
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    def test_same_seed_bit_identical(self):
        a = generate_phantom(Rng(3, 9), 64, 4)
        b = generate_phantom(Rng(3, 9), 64, 4)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.mask, sb.mask)

    def test_area_fraction_bounds(self):
        for s in generate_phantom(Rng(1, 9), 64, 16):
            frac = s.mask.mean()
            assert 0.02 <= frac <= 0.20

    def test_self_score_is_one(self):
        for s in generate_phantom(Rng(2, 9), 64, 4):
            assert overlap_score(s.mask, s.mask) == 1.0

    def test_size_must_divide_16(self):
        with pytest.raises(ValueError):
            generate_phantom(Rng(0), 60, 2)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        model = build_model(ModelSpec(base_depth=8), Rng(0, 0))
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(model.named_parameters(), p1)
        loaded = load_checkpoint(p1)
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_restores_values_and_order(self, tmp_path):
        model = build_model(ModelSpec(base_depth=8), Rng(0, 0))
        path = tmp_path / "m.ckpt"
        save_checkpoint(model.named_parameters(), path)
        loaded = load_checkpoint(path)
        assert list(loaded) == list(model.named_parameters())
        for name, t in model.named_parameters().items():
            np.testing.assert_array_equal(loaded[name], t.data)

    def test_roundtrip_preserves_forward(self, tmp_path):
        from sepseg.autograd import Tensor
        from sepseg.model import forward

        model = build_model(ModelSpec(base_depth=8), Rng(0, 0))
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 32, 32)).astype(np.float32))
        before = forward(model, x, "infer").data.copy()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model.named_parameters(), path)
        fresh = build_model(ModelSpec(base_depth=8), Rng(99, 0))
        load_into_model(fresh, load_checkpoint(path))
        np.testing.assert_array_equal(forward(fresh, x, "infer").data, before)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"JUNK" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_flipped_payload_byte_changes_a_tensor(self, tmp_path):
        model = build_model(ModelSpec(base_depth=8), Rng(0, 0))
        path = tmp_path / "m.ckpt"
        save_checkpoint(model.named_parameters(), path)
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF  # inside the last tensor's payload
        path.write_bytes(bytes(blob))
        loaded = load_checkpoint(path)  # framing still parses
        last = list(model.named_parameters().items())[-1]
        assert not np.array_equal(loaded[last[0]], last[1].data)

    def test_truncation_detected(self, tmp_path):
        model = build_model(ModelSpec(base_depth=8), Rng(0, 0))
        path = tmp_path / "m.ckpt"
        save_checkpoint(model.named_parameters(), path)
        path.write_bytes(path.read_bytes()[:-17])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_shape_mismatch_names_first_entry(self, tmp_path):
        small = build_model(ModelSpec(base_depth=8), Rng(0, 0))
        big = build_model(ModelSpec(base_depth=16), Rng(0, 0))
        path = tmp_path / "m.ckpt"
        save_checkpoint(small.named_parameters(), path)
        with pytest.raises(CheckpointError, match="enc1"):
            load_into_model(big, load_checkpoint(path))


class TestPgm:
    def test_header_and_values(self, tmp_path):
        mask = np.array([[0, 1], [1, 0]])
        path = tmp_path / "m.pgm"
        write_pgm(mask, path)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n2 2\n255\n")
        assert blob[-4:] == bytes([0, 255, 255, 0])
