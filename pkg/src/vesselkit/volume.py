"""3D volumes and NIfTI-1 file I/O.

Volumes are held as float32 arrays of shape (nx, ny, nz) with per-axis voxel
spacing in mm. Only the NIfTI-1 subset the pipeline needs is supported:
3D images, four datatypes, little-endian, optional gzip. Orientation
matrices (qform/sform) are ignored; voxels keep file order.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, RankError, UnsupportedTypeError

VOLUME_KINDS = ("intensity", "probability", "binary-mask")

# NIfTI-1 header, 348 bytes, little-endian.
_HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert _HEADER_DTYPE.itemsize == 348

# datatype code -> numpy dtype (the supported subset)
_DTYPE_BY_CODE = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}

_KIND_TAG = "vesselkit:kind="


@dataclass(frozen=True)
class Volume3D:
    """A scalar 3D image with voxel spacing in mm.

    data holds shape (nx, ny, nz); the first axis is the file's fastest
    varying axis. kind is one of "intensity", "probability", "binary-mask".
    Instances are treated as immutable; do not write into ``data``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise RankError(f"volume data must be 3D, got {arr.ndim}D")
        if arr.size == 0:
            raise DomainError("volume has no voxels")
        object.__setattr__(self, "data", arr)
        # spacing is kept at float32 precision: that is what the NIfTI
        # header stores, and it makes read(write(v)) an exact identity
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3:
            raise DomainError(f"spacing must have 3 components, got {len(spacing)}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise DomainError(f"spacing components must be positive and finite, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        if self.kind not in VOLUME_KINDS:
            raise DomainError(f"unknown volume kind {self.kind!r}")
        if self.kind == "probability":
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise DomainError("probability volume has values outside [0, 1]")
        elif self.kind == "binary-mask":
            if not np.isin(arr, (0.0, 1.0)).all():
                raise DomainError("binary-mask volume has values outside {0, 1}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, kind: str | None = None) -> "Volume3D":
        """New volume sharing this one's spacing."""
        return Volume3D(data, self.spacing, self.kind if kind is None else kind)


def _read_raw(path: Path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        rest = f.read()
    raw = head + rest
    if head == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_nifti(path, kind: str | None = None) -> Volume3D:
    """Read a NIfTI-1 volume (.nii or .nii.gz).

    Supported datatypes: uint8, int16, float32, float64. Data is converted
    to float32 with scl_slope/scl_inter applied when the slope is nonzero.
    kind overrides the stored/inferred volume kind.
    """
    path = Path(path)
    raw = _read_raw(path)
    if len(raw) < 348:
        raise FormatError(f"{path}: file holds {len(raw)} bytes, NIfTI-1 header needs 348")
    hdr = np.frombuffer(raw[:348], dtype=_HEADER_DTYPE)[0]
    if int(hdr["sizeof_hdr"]) != 348:
        raise FormatError(
            f"{path}: sizeof_hdr at byte offset 0 is {int(hdr['sizeof_hdr'])}, expected 348"
        )
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 344")

    code = int(hdr["datatype"])
    if code not in _DTYPE_BY_CODE:
        raise UnsupportedTypeError(f"{path}: unsupported NIfTI datatype code {code}")
    voxel_dtype = _DTYPE_BY_CODE[code]

    dim = hdr["dim"]
    ndim = int(dim[0])
    if ndim < 3 or ndim > 7:
        raise RankError(f"{path}: dim[0] is {ndim}, expected 3")
    if ndim > 3 and any(int(dim[a]) != 1 for a in range(4, ndim + 1)):
        raise RankError(
            f"{path}: dim[0] is {ndim} with non-unit trailing dims, not reducible to 3D"
        )
    nx, ny, nz = (int(dim[a]) for a in (1, 2, 3))
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: non-positive dims {(nx, ny, nz)} at byte offset 40")
    spacing = tuple(float(hdr["pixdim"][a]) for a in (1, 2, 3))
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise FormatError(f"{path}: non-positive pixdim {spacing} at byte offset 76")

    nvox = nx * ny * nz
    nbytes = nvox * voxel_dtype.itemsize
    if magic == b"ni1\x00":
        img_path = path.with_suffix(".img")
        if not img_path.exists():
            raise FormatError(f"{path}: header-pair magic 'ni1' but {img_path} is missing")
        payload_src = _read_raw(img_path)
        offset = int(hdr["vox_offset"])
    else:
        payload_src = raw
        offset = int(hdr["vox_offset"])
        if offset < 352:
            raise FormatError(f"{path}: vox_offset {offset} < 352 at byte offset 108")
    if len(payload_src) < offset + nbytes:
        raise FormatError(
            f"{path}: voxel payload truncated at byte offset {len(payload_src)}, "
            f"need {offset + nbytes}"
        )
    flat = np.frombuffer(payload_src, dtype=voxel_dtype, count=nvox, offset=offset)
    arr = flat.reshape((nx, ny, nz), order="F").astype(np.float32)
    slope = float(hdr["scl_slope"])
    if slope != 0.0 and (slope, float(hdr["scl_inter"])) != (1.0, 0.0):
        arr = arr * np.float32(slope) + np.float32(hdr["scl_inter"])

    if kind is None:
        kind = _infer_kind(hdr, voxel_dtype, arr)
    return Volume3D(arr, spacing, kind)


def _infer_kind(hdr, voxel_dtype, arr) -> str:
    descrip = bytes(hdr["descrip"]).rstrip(b"\x00").decode("ascii", errors="replace")
    if _KIND_TAG in descrip:
        tagged = descrip.split(_KIND_TAG, 1)[1].split()[0]
        if tagged in VOLUME_KINDS:
            return tagged
    if voxel_dtype == np.dtype("<u1") and np.isin(arr, (0.0, 1.0)).all():
        return "binary-mask"
    return "intensity"


def write_nifti(v: Volume3D, path) -> None:
    """Write a volume as NIfTI-1; .gz suffix selects gzip compression.

    Intensity and probability volumes are stored as float32 (bit-exact
    round trip), binary masks as uint8.
    """
    path = Path(path)
    if v.kind == "binary-mask":
        payload_arr = v.data.astype(np.uint8)
        code, bitpix = 2, 8
    else:
        payload_arr = v.data.astype(np.float32)
        code, bitpix = 16, 32

    hdr = np.zeros((), dtype=_HEADER_DTYPE)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    dim = np.zeros(8, dtype=np.int16)
    dim[0] = 3
    dim[1:4] = v.dims
    dim[4:] = 1
    hdr["dim"] = dim
    hdr["datatype"] = code
    hdr["bitpix"] = bitpix
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = v.spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 0.0
    hdr["scl_inter"] = 0.0
    hdr["descrip"] = (_KIND_TAG + v.kind).encode("ascii")
    hdr["magic"] = b"n+1\x00"

    blob = hdr.tobytes() + b"\x00" * 4 + payload_arr.flatten(order="F").tobytes()
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(blob)


def normalize_intensity(v: Volume3D, p_lo: float = 1.0, p_hi: float = 99.0) -> Volume3D:
    """Rescale intensities to [0, 1] between two percentiles, clamping tails.

    A degenerate window (equal percentiles, e.g. a constant volume) maps
    everything to 0.5.
    """
    if not 0.0 <= p_lo < p_hi <= 100.0:
        raise DomainError(f"percentiles must satisfy 0 <= p_lo < p_hi <= 100, got ({p_lo}, {p_hi})")
    q_lo, q_hi = np.percentile(v.data, [p_lo, p_hi])
    if q_hi == q_lo:
        out = np.full(v.dims, 0.5, dtype=np.float32)
    else:
        out = np.clip((v.data - q_lo) / (q_hi - q_lo), 0.0, 1.0).astype(np.float32)
    return Volume3D(out, v.spacing, "intensity")
