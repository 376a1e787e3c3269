import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainage.imaging import (
    MAGIC,
    BadHeaderError,
    BadMagicError,
    Modality,
    NonFiniteVoxelError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    Volume,
    crop_or_pad,
    read_nifti,
    write_nifti,
)


def handmade_nifti(dims_xyz, datatype, payload, scl_slope=0.0, scl_inter=0.0, sform=0):
    """Build header bytes field by field, independent of write_nifti."""
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    nx, ny, nz = dims_xyz
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<8f", hdr, 76, 1, 1, 1, 1, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, scl_slope, scl_inter)
    struct.pack_into("<h", hdr, 254, sform)
    if sform:
        struct.pack_into("<12f", hdr, 280, 2, 0, 0, -5, 0, 2, 0, -6, 0, 0, 2, -7)
    hdr[344:348] = MAGIC
    return bytes(hdr) + payload


def random_volume(rng, dims=None):
    dims = dims or tuple(rng.integers(1, 7, size=3))
    vox = rng.standard_normal(dims).astype(np.float32)
    affine = np.eye(4, dtype=np.float32)
    affine[:3, 3] = rng.standard_normal(3).astype(np.float32)
    return Volume(vox, affine)


class TestReadNifti:
    def test_single_voxel_identity(self):
        data = handmade_nifti((1, 1, 1), 16, struct.pack("<f", 7.0))
        v = read_nifti(data)
        assert v.dims == (1, 1, 1)
        assert v.voxels[0, 0, 0] == 7.0

    def test_int16_rescaling(self):
        # oracle: per-voxel affine rescale by hand, 100*0.5+1=51, -2*0.5+1=0
        data = handmade_nifti((2, 1, 1), 4, struct.pack("<2h", 100, -2), scl_slope=0.5, scl_inter=1.0)
        v = read_nifti(data)
        assert v.voxels.ravel().tolist() == [51.0, 0.0]

    def test_uint8_payload(self):
        data = handmade_nifti((2, 1, 1), 2, bytes([0, 255]))
        assert read_nifti(data).voxels.ravel().tolist() == [0.0, 255.0]

    def test_x_fastest_order(self):
        payload = struct.pack("<8f", *range(8))
        v = read_nifti(handmade_nifti((2, 2, 2), 16, payload))
        # (z, y, x) indexing, x fastest in the payload
        assert v.voxels[0, 0, 1] == 1.0
        assert v.voxels[0, 1, 0] == 2.0
        assert v.voxels[1, 0, 0] == 4.0

    def test_sform_affine(self):
        data = handmade_nifti((1, 1, 1), 16, struct.pack("<f", 1.0), sform=1)
        v = read_nifti(data)
        expected = np.array([[2, 0, 0, -5], [0, 2, 0, -6], [0, 0, 2, -7], [0, 0, 0, 1]], np.float32)
        assert np.array_equal(v.affine, expected)

    def test_pixdim_fallback_affine(self):
        data = handmade_nifti((1, 1, 1), 16, struct.pack("<f", 1.0), sform=0)
        assert np.array_equal(read_nifti(data).affine, np.eye(4, dtype=np.float32))

    def test_too_short_for_header(self):
        with pytest.raises(TruncatedPayloadError):
            read_nifti(b"\x00" * 100)

    def test_bad_sizeof_hdr(self):
        data = bytearray(handmade_nifti((1, 1, 1), 16, struct.pack("<f", 0.0)))
        struct.pack_into("<i", data, 0, 349)
        with pytest.raises(BadMagicError):
            read_nifti(bytes(data))

    def test_every_magic_mutation_rejected(self):
        base = bytearray(handmade_nifti((1, 1, 1), 16, struct.pack("<f", 0.0)))
        for pos in range(344, 348):
            for delta in (1, 128, 255):
                data = bytearray(base)
                data[pos] = (data[pos] + delta) % 256
                if bytes(data[344:348]) == MAGIC:
                    continue
                with pytest.raises(BadMagicError):
                    read_nifti(bytes(data))

    def test_unsupported_datatype(self):
        with pytest.raises(UnsupportedDatatypeError):
            read_nifti(handmade_nifti((1, 1, 1), 64, struct.pack("<d", 1.0)))

    def test_non_3d_rejected(self):
        data = bytearray(handmade_nifti((1, 1, 1), 16, struct.pack("<f", 0.0)))
        struct.pack_into("<h", data, 40, 4)
        with pytest.raises(UnsupportedDatatypeError):
            read_nifti(bytes(data))

    def test_truncated_payload(self):
        data = handmade_nifti((2, 2, 2), 16, struct.pack("<4f", 1, 2, 3, 4))
        with pytest.raises(TruncatedPayloadError):
            read_nifti(data)

    def test_nan_voxel_rejected(self):
        data = handmade_nifti((1, 1, 1), 16, struct.pack("<f", float("nan")))
        with pytest.raises(NonFiniteVoxelError):
            read_nifti(data)


class TestWriteNifti:
    def test_written_size(self):
        v = Volume(np.zeros((1, 1, 1), np.float32), np.eye(4, dtype=np.float32))
        assert len(write_nifti(v)) == 352 + 4

    def test_sizeof_hdr_bytes(self):
        v = Volume(np.zeros((1, 1, 1), np.float32), np.eye(4, dtype=np.float32))
        assert write_nifti(v)[0:4] == struct.pack("<i", 348)

    def test_round_trip_random_4cube(self):
        rng = np.random.default_rng(3)
        v = random_volume(rng, (4, 4, 4))
        w = read_nifti(write_nifti(v))
        assert np.array_equal(v.voxels, w.voxels)
        assert v.dims == w.dims
        assert np.array_equal(v.affine, w.affine)

    def test_round_trip_many_random_volumes(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            v = random_volume(rng)
            w = read_nifti(write_nifti(v))
            assert v.voxels.tobytes() == w.voxels.tobytes()
            assert np.array_equal(v.affine, w.affine)

    def test_modality_preserved_by_reader_arg(self):
        rng = np.random.default_rng(5)
        v = random_volume(rng)
        w = read_nifti(write_nifti(v), modality=Modality.AICBV)
        assert w.modality is Modality.AICBV


class TestVolume:
    def test_affine_bottom_row_enforced(self):
        bad = np.eye(4, dtype=np.float32)
        bad[3, 0] = 1.0
        with pytest.raises(BadHeaderError):
            Volume(np.zeros((1, 1, 1), np.float32), bad)

    def test_voxels_immutable(self):
        v = Volume(np.zeros((2, 2, 2), np.float32), np.eye(4, dtype=np.float32))
        with pytest.raises(ValueError):
            v.voxels[0, 0, 0] = 1.0


class TestCropOrPad:
    def test_identity(self):
        rng = np.random.default_rng(0)
        v = random_volume(rng, (32, 4, 4))
        w = crop_or_pad(v, (32, 4, 4))
        assert np.array_equal(v.voxels, w.voxels)

    def test_center_crop_of_ones(self):
        v = Volume(np.ones((4, 4, 4), np.float32), np.eye(4, dtype=np.float32))
        w = crop_or_pad(v, (2, 2, 2))
        assert np.array_equal(w.voxels, np.ones((2, 2, 2), np.float32))

    def test_pad_preserves_intensity_with_zero_border(self):
        # oracle: direct index mapping, 2**3 ones land in the center block
        v = Volume(np.ones((2, 2, 2), np.float32), np.eye(4, dtype=np.float32))
        w = crop_or_pad(v, (4, 4, 4))
        assert w.voxels.sum() == 8.0
        assert np.array_equal(w.voxels[1:3, 1:3, 1:3], np.ones((2, 2, 2), np.float32))
        assert w.voxels[0].sum() == 0 and w.voxels[-1].sum() == 0

    def test_odd_padding_goes_high(self):
        v = Volume(np.ones((2, 1, 1), np.float32), np.eye(4, dtype=np.float32))
        w = crop_or_pad(v, (5, 1, 1))
        assert w.voxels[:, 0, 0].tolist() == [0.0, 1.0, 1.0, 0.0, 0.0]

    def test_crop_keeps_center_subblock(self):
        vox = np.arange(5 * 5 * 5, dtype=np.float32).reshape(5, 5, 5)
        v = Volume(vox, np.eye(4, dtype=np.float32))
        w = crop_or_pad(v, (2, 2, 2))
        assert np.array_equal(w.voxels, vox[1:3, 1:3, 1:3])

    def test_affine_keeps_world_coordinates(self):
        affine = np.diag([2.0, 2.0, 2.0, 1.0]).astype(np.float32)
        v = Volume(np.ones((4, 4, 4), np.float32), affine)
        w = crop_or_pad(v, (2, 2, 2))
        # output voxel (0,0,0) was input voxel (1,1,1): world x shift = 2*1
        assert np.allclose(w.affine[:3, 3], [2.0, 2.0, 2.0])
        p = crop_or_pad(v, (6, 6, 6))
        assert np.allclose(p.affine[:3, 3], [-2.0, -2.0, -2.0])

    @settings(max_examples=30, deadline=None)
    @given(
        st.tuples(*[st.integers(1, 6)] * 3),
        st.tuples(*[st.integers(1, 6)] * 3),
        st.integers(0, 2**31),
    )
    def test_pad_then_crop_restores(self, src, bigger, seed):
        target = tuple(max(s, b) for s, b in zip(src, bigger))
        rng = np.random.default_rng(seed)
        v = random_volume(rng, src)
        back = crop_or_pad(crop_or_pad(v, target), src)
        assert np.array_equal(back.voxels, v.voxels)
        assert np.allclose(back.affine, v.affine, atol=1e-5)
