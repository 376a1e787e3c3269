"""Volumes and a minimal NIfTI-1 reader/writer.

Scope is deliberately narrow: uncompressed single-file .nii,
little-endian, exactly three spatial dimensions. Voxels are stored as a
float32 array of shape (depth, height, width); the payload on disk runs
x fastest, which is exactly numpy C order for that shape. All indexing
in this package is (z, y, x); the affine, following the file format,
maps voxel coordinates (x, y, z, 1) to world mm.
"""

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16

_PAYLOAD_DTYPES = {
    DT_UINT8: np.dtype("<u1"),
    DT_INT16: np.dtype("<i2"),
    DT_FLOAT32: np.dtype("<f4"),
}


class NiftiError(Exception):
    """Base for volume parsing/validation failures."""


class BadMagicError(NiftiError):
    pass


class BadHeaderError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedPayloadError(NiftiError):
    pass


class NonFiniteVoxelError(NiftiError):
    pass


class Modality(Enum):
    T1W = "T1w"
    AICBV = "AICBV"


@dataclass(frozen=True, eq=False)
class Volume:
    """One 3D scalar field: voxels, grid shape, world transform, modality.

    Immutable after construction; every operation returns a new Volume.
    `meta` carries provenance (normalization divisors etc.) and is not
    serialized to NIfTI.
    """

    voxels: np.ndarray
    affine: np.ndarray
    modality: Modality = Modality.T1W
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vox = np.array(self.voxels, dtype=np.float32, copy=True, order="C")
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise BadHeaderError(f"voxels must be 3-D and non-empty, got shape {vox.shape}")
        if not np.isfinite(vox).all():
            raise NonFiniteVoxelError("volume contains NaN or Inf voxels")
        aff = np.array(self.affine, dtype=np.float32, copy=True)
        if aff.shape != (4, 4):
            raise BadHeaderError(f"affine must be 4x4, got {aff.shape}")
        if not np.array_equal(aff[3], np.array([0, 0, 0, 1], dtype=np.float32)):
            raise BadHeaderError("affine bottom row must be (0, 0, 0, 1)")
        vox.setflags(write=False)
        aff.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "affine", aff)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(depth, height, width) voxel counts."""
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        return Volume(voxels, self.affine, self.modality, dict(self.meta))


def read_nifti(data: bytes, modality: Modality = Modality.T1W) -> Volume:
    """Parse an uncompressed little-endian NIfTI-1 byte string.

    Supports datatypes uint8/int16/float32, dim[0] == 3 only. Voxels are
    converted to float32 and rescaled by scl_slope/scl_inter when
    scl_slope is nonzero (slope 0 means "no scaling" per the format).
    The affine comes from the srow fields when sform_code > 0, otherwise
    a diagonal built from pixdim.
    """
    if len(data) < VOX_OFFSET:
        raise TruncatedPayloadError(f"file is {len(data)} bytes, header needs {VOX_OFFSET}")
    (sizeof_hdr,) = struct.unpack_from("<i", data, 0)
    magic = data[344:348]
    if sizeof_hdr != HEADER_SIZE or magic != MAGIC:
        raise BadMagicError(f"not a NIfTI-1 single file (sizeof_hdr={sizeof_hdr}, magic={magic!r})")
    dim = struct.unpack_from("<8h", data, 40)
    (datatype,) = struct.unpack_from("<h", data, 70)
    if datatype not in _PAYLOAD_DTYPES:
        raise UnsupportedDatatypeError(f"datatype code {datatype} not supported")
    if dim[0] != 3:
        raise UnsupportedDatatypeError(f"only 3-D volumes supported, dim[0]={dim[0]}")
    width, height, depth = dim[1], dim[2], dim[3]
    if min(width, height, depth) < 1:
        raise BadHeaderError(f"non-positive dims {(depth, height, width)}")

    pixdim = struct.unpack_from("<8f", data, 76)
    (vox_offset,) = struct.unpack_from("<f", data, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", data, 112)
    (sform_code,) = struct.unpack_from("<h", data, 254)

    offset = int(vox_offset)
    if offset < VOX_OFFSET:
        raise BadHeaderError(f"vox_offset {offset} below minimum {VOX_OFFSET}")
    dtype = _PAYLOAD_DTYPES[datatype]
    nvox = depth * height * width
    need = nvox * dtype.itemsize
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, dims imply {need}")

    vox = np.frombuffer(payload, dtype=dtype).astype(np.float32).reshape(depth, height, width)
    if scl_slope != 0.0:
        vox = vox * np.float32(scl_slope) + np.float32(scl_inter)

    if sform_code > 0:
        srow = struct.unpack_from("<12f", data, 280)
        affine = np.array(
            [srow[0:4], srow[4:8], srow[8:12], [0, 0, 0, 1]], dtype=np.float32
        )
    else:
        # pixdim of 0 is common in sloppy headers; fall back to unit spacing
        spacing = [p if p > 0 else 1.0 for p in pixdim[1:4]]
        affine = np.diag(spacing + [1.0]).astype(np.float32)
    return Volume(vox, affine, modality)


def write_nifti(v: Volume) -> bytes:
    """Serialize a Volume as float32 NIfTI-1; read_nifti inverts it bit-for-bit."""
    depth, height, width = v.dims
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, 3, width, height, depth, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, DT_FLOAT32, 32)
    spacing = [float(np.linalg.norm(v.affine[:3, i])) for i in range(3)]
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    # scl_slope 0 = no scaling, so voxels round-trip untouched
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 0.0, 0.0)
    struct.pack_into("<h", hdr, 254, 1)
    struct.pack_into("<12f", hdr, 280, *v.affine[:3].ravel().tolist())
    hdr[344:348] = MAGIC
    return bytes(hdr) + v.voxels.astype("<f4").tobytes(order="C")


def read_nifti_file(path, modality: Modality = Modality.T1W) -> Volume:
    with open(path, "rb") as f:
        return read_nifti(f.read(), modality)


def write_nifti_file(v: Volume, path) -> None:
    with open(path, "wb") as f:
        f.write(write_nifti(v))


def crop_or_pad(v: Volume, target: tuple[int, int, int]) -> Volume:
    """Center-crop or symmetrically zero-pad to `target` (depth, height, width).

    Odd differences put the extra voxel on the high-index side when
    padding and remove it from the high-index side when cropping. The
    affine translation is updated so retained voxels keep their world
    coordinates.
    """
    if min(target) < 1:
        raise BadHeaderError(f"target dims must be positive, got {target}")
    src = v.dims
    if tuple(target) == src:
        return v
    # offs[axis]: input index corresponding to output index 0 (negative when padding)
    offs = []
    for s, t in zip(src, target):
        if s >= t:
            offs.append((s - t) // 2)
        else:
            offs.append(-((t - s) // 2))
    out = np.zeros(target, dtype=np.float32)
    src_lo = [max(0, o) for o in offs]
    src_hi = [min(s, o + t) for s, t, o in zip(src, target, offs)]
    dst_lo = [sl - o for sl, o in zip(src_lo, offs)]
    dst_hi = [dl + (sh - sl) for dl, sl, sh in zip(dst_lo, src_lo, src_hi)]
    out[dst_lo[0] : dst_hi[0], dst_lo[1] : dst_hi[1], dst_lo[2] : dst_hi[2]] = v.voxels[
        src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]
    ]
    # offs is (z, y, x); the affine acts on (x, y, z)
    shift_xyz = np.array([offs[2], offs[1], offs[0]], dtype=np.float32)
    affine = np.array(v.affine, copy=True)
    affine[:3, 3] = v.affine[:3, :3] @ shift_xyz + v.affine[:3, 3]
    return Volume(out, affine, v.modality, dict(v.meta))
