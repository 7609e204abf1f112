"""Minimal single-file NIfTI-1 (``.nii``) reader and writer.

Supports uncompressed files with the ``n+1`` magic and int16, float32 or
float64 voxels (returned as float32 after ``scl_slope`` / ``scl_inter``
scaling). Big-endian files are recognised from the header and swapped.
Written files are little-endian float32 with the data at byte 352.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
DATA_OFFSET = 352
DTYPES = {4: "i2", 16: "f4", 64: "f8"}
BITPIX = {4: 16, 16: 32, 64: 64}

# (name, struct code, byte offset) for the fields this module uses
_FIELDS = {
    "sizeof_hdr": ("i", 0),
    "dim_info": ("B", 39),
    "dim": ("8h", 40),
    "intent_code": ("h", 68),
    "datatype": ("h", 70),
    "bitpix": ("h", 72),
    "pixdim": ("8f", 76),
    "vox_offset": ("f", 108),
    "scl_slope": ("f", 112),
    "scl_inter": ("f", 116),
    "xyzt_units": ("B", 123),
    "descrip": ("80s", 148),
    "qform_code": ("h", 252),
    "sform_code": ("h", 254),
    "quatern": ("3f", 256),
    "qoffset": ("3f", 268),
    "srow_x": ("4f", 280),
    "srow_y": ("4f", 296),
    "srow_z": ("4f", 312),
    "magic": ("4s", 344),
}
GEOMETRY_FIELDS = ("pixdim", "xyzt_units", "qform_code", "sform_code", "quatern", "qoffset",
                   "srow_x", "srow_y", "srow_z")


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI-1 file."""


@dataclass
class Volume4D:
    """Image data ``(nx, ny, nz, nv)`` as float32 plus geometry header fields."""

    data: np.ndarray
    geometry: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.data.shape

    @property
    def voxel_size(self):
        pix = self.geometry.get("pixdim")
        return tuple(pix[1:4]) if pix is not None else (1.0, 1.0, 1.0)

    @property
    def affine(self):
        """4x4 voxel-to-world matrix from the sform rows (voxel-size diagonal otherwise)."""
        g = self.geometry
        if g.get("sform_code", 0) > 0:
            return np.array([g["srow_x"], g["srow_y"], g["srow_z"], [0, 0, 0, 1]], dtype=float)
        return np.diag(list(self.voxel_size) + [1.0])


def _unpack(buf, name, endian):
    code, offset = _FIELDS[name]
    values = struct.unpack_from(endian + code, buf, offset)
    return values[0] if len(values) == 1 else list(values)


def read_nifti1(path):
    """Read a ``.nii`` file into a :class:`Volume4D` (3D data gains ``nv = 1``)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise NiftiError(f"{path}: gzip-compressed NIfTI is not supported; decompress it first "
                         "(e.g. 'gunzip file.nii.gz')")
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} of {HEADER_SIZE} bytes)")
    endian = None
    for candidate in ("<", ">"):
        dim0 = struct.unpack_from(candidate + "h", raw, 40)[0]
        if 1 <= dim0 <= 7:
            endian = candidate
            break
    if endian is None:
        raise NiftiError(f"{path}: dim[0] at byte 40 is not in 1..7 in either byte order")
    if _unpack(raw, "sizeof_hdr", endian) != HEADER_SIZE:
        raise NiftiError(f"{path}: sizeof_hdr at byte 0 is not {HEADER_SIZE}")
    magic = _unpack(raw, "magic", endian)
    if magic != b"n+1\x00":
        raise NiftiError(f"{path}: bad magic {magic!r} at byte 344 (need single-file 'n+1')")
    dim = _unpack(raw, "dim", endian)
    ndim = dim[0]
    if ndim > 4 or any(d < 1 for d in dim[1:ndim + 1]):
        raise NiftiError(f"{path}: unsupported dimensions {dim[:ndim + 1]} at byte 40")
    shape = tuple(dim[1:ndim + 1]) + (1,) * (4 - ndim)
    datatype = _unpack(raw, "datatype", endian)
    if datatype not in DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype} at byte 70 "
                         f"(supported: int16=4, float32=16, float64=64)")
    offset = int(_unpack(raw, "vox_offset", endian))
    if offset < HEADER_SIZE:
        raise NiftiError(f"{path}: vox_offset {offset} at byte 108 lies inside the header")
    dtype = np.dtype(endian + DTYPES[datatype])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiError(f"{path}: truncated data: need {nbytes} bytes from offset {offset}, "
                         f"file ends at byte {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    data = data.reshape(shape, order="F").astype(np.float32)
    slope = _unpack(raw, "scl_slope", endian)
    inter = _unpack(raw, "scl_inter", endian)
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        data = (data * np.float32(slope) + np.float32(inter)).astype(np.float32)
    geometry = {name: _unpack(raw, name, endian) for name in GEOMETRY_FIELDS}
    return Volume4D(data=np.ascontiguousarray(data), geometry=geometry)


def _header(shape, geometry, datatype=16, slope=1.0, inter=0.0):
    buf = bytearray(HEADER_SIZE)
    dims = [len(shape), *shape] + [1] * (7 - len(shape))
    pixdim = list(geometry.get("pixdim") or [1.0] * 8)
    pixdim[0] = pixdim[0] if pixdim[0] in (-1.0, 1.0) else 1.0
    values = {
        "sizeof_hdr": HEADER_SIZE,
        "dim": dims,
        "datatype": datatype,
        "bitpix": BITPIX[datatype],
        "pixdim": pixdim,
        "vox_offset": float(DATA_OFFSET),
        "scl_slope": slope,
        "scl_inter": inter,
        "xyzt_units": geometry.get("xyzt_units", 2),
        "qform_code": geometry.get("qform_code", 0),
        "sform_code": geometry.get("sform_code", 0),
        "quatern": geometry.get("quatern", [0.0, 0.0, 0.0]),
        "qoffset": geometry.get("qoffset", [0.0, 0.0, 0.0]),
        "srow_x": geometry.get("srow_x", [pixdim[1], 0.0, 0.0, 0.0]),
        "srow_y": geometry.get("srow_y", [0.0, pixdim[2], 0.0, 0.0]),
        "srow_z": geometry.get("srow_z", [0.0, 0.0, pixdim[3], 0.0]),
        "descrip": b"sphmicro",
        "magic": b"n+1\x00",
    }
    for name, value in values.items():
        code, offset = _FIELDS[name]
        args = value if isinstance(value, (list, tuple)) else [value]
        struct.pack_into("<" + code, buf, offset, *args)
    return bytes(buf)


def write_nifti1(volume, path):
    """Write a :class:`Volume4D` (or plain 3D/4D array) as little-endian float32."""
    if not isinstance(volume, Volume4D):
        volume = Volume4D(np.asarray(volume))
    data = np.asarray(volume.data, dtype="<f4")
    if not 1 <= data.ndim <= 4:
        raise NiftiError(f"cannot write {data.ndim}-dimensional data")
    header = _header(data.shape, volume.geometry)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00" * (DATA_OFFSET - HEADER_SIZE))
        fh.write(data.tobytes(order="F"))
    return path
