"""Minimal single-file NIfTI-1 reader and writer.

Covers exactly the subset this toolkit needs: little-endian "n+1" files,
scalar 3D images, voxel sizes in pixdim, x-fastest (Fortran) data order.
Volumes are written as float32, masks as uint8; gzip-compressed files are
accepted on read. No extensions, no 4D+ images, no qform rotations (the
sform is written as a diagonal voxel-size matrix so third-party viewers
place the image sensibly).
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

from .volume import Mask, ScalarVolume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

_DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}
_CODE_FOR = {np.dtype(np.float32): 16, np.dtype(np.uint8): 2}

# NIFTI_UNITS_MM | NIFTI_UNITS_SEC
_XYZT_UNITS = 2 | 8


class NiftiFormatError(ValueError):
    """The file is not a NIfTI-1 volume this reader supports."""


def _build_header(dims, voxel_size, datatype_code, bitpix):
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype_code)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, voxel_size[0], voxel_size[1],
                     voxel_size[2], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<B", hdr, 123, _XYZT_UNITS)
    descrip = b"qsmkit"
    hdr[148:148 + len(descrip)] = descrip
    struct.pack_into("<h", hdr, 252, 0)  # qform_code: none
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner
    struct.pack_into("<4f", hdr, 280, voxel_size[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, voxel_size[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, voxel_size[2], 0.0)
    hdr[344:348] = MAGIC
    return bytes(hdr)


def _write_bytes(path, payload):
    with open(path, "wb") as fh:
        fh.write(payload)


def write_volume(volume, path):
    """Write a ScalarVolume as a float32 single-file NIfTI-1 image."""
    dims = volume.dims
    hdr = _build_header(dims, volume.voxel_size, _CODE_FOR[np.dtype(np.float32)],
                        32)
    data = volume.data.astype("<f4").ravel(order="F").tobytes()
    _write_bytes(path, hdr + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + data)


def write_mask(mask, path):
    """Write a Mask as a 0/1 uint8 single-file NIfTI-1 image."""
    hdr = _build_header(mask.dims, mask.voxel_size,
                        _CODE_FOR[np.dtype(np.uint8)], 8)
    data = mask.data.astype(np.uint8).ravel(order="F").tobytes()
    _write_bytes(path, hdr + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + data)


def _read_bytes(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def _parse(path):
    buf = _read_bytes(path)
    if len(buf) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than a NIfTI-1 header")
    magic = bytes(buf[344:348])
    if magic != MAGIC:
        raise NiftiFormatError(
            f"{path}: magic is {magic!r}, expected {MAGIC!r} "
            "(single-file NIfTI-1)")
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiFormatError(
            f"{path}: sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE} "
            "(big-endian files are not supported)")
    dim = struct.unpack_from("<8h", buf, 40)
    ndim = dim[0]
    if ndim < 1 or ndim > 3:
        raise NiftiFormatError(
            f"{path}: {ndim}-dimensional images are not supported")
    shape = tuple(max(1, d) for d in dim[1:4])
    (datatype,) = struct.unpack_from("<h", buf, 70)
    if datatype not in _DTYPE_CODES:
        raise NiftiFormatError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", buf, 76)
    voxel_size = tuple(p if p > 0 else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", buf, 108)
    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    slope, inter = struct.unpack_from("<2f", buf, 112)
    count = shape[0] * shape[1] * shape[2]
    dtype = np.dtype(_DTYPE_CODES[datatype]).newbyteorder("<")
    if len(buf) < offset + count * dtype.itemsize:
        raise NiftiFormatError(f"{path}: truncated data section")
    flat = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    arr = flat.reshape(shape, order="F").astype(np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * (slope if slope != 0.0 else 1.0) + inter
    return arr, voxel_size


def read_volume(path, unit="dimensionless"):
    """Read a single-file NIfTI-1 image (optionally gzipped) as a volume."""
    arr, voxel_size = _parse(path)
    return ScalarVolume(arr, voxel_size, unit)


def read_mask(path):
    """Read a NIfTI-1 image as a mask (nonzero means inside)."""
    arr, voxel_size = _parse(path)
    return Mask(arr != 0, voxel_size)
