"""Volumetric scan container and its on-disk format.

A volume file is a small UTF-8 header followed by the raw voxel payload:

    dims=D,H,W
    spacing=sz,sy,sx
    dtype=f32|i16|u8
    <blank line>
    <row-major little-endian voxels>

Intensity volumes use f32 or i16, binary masks u8.  spacing is in mm with
the slice thickness first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import VolumeHeaderError, VolumePayloadError

_DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2"), "u8": np.dtype("u1")}
_TAGS = {v: k for k, v in _DTYPES.items()}


@dataclass
class Volume:
    """3D intensity scan; data is [D,H,W], spacing (thickness, row, col) mm."""

    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be non-empty [D,H,W], got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape

    @property
    def thickness(self):
        return self.spacing[0]


@dataclass
class MaskVolume:
    """Binary ground-truth labels aligned with a Volume."""

    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise ValueError(f"mask data must be [D,H,W], got {self.data.shape}")
        bad = np.setdiff1d(np.unique(self.data), [0, 1])
        if bad.size:
            raise ValueError(f"mask values must be 0/1, found {bad.tolist()}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self):
        return self.data.shape


def write_volume(path, data, spacing):
    data = np.asarray(data)
    if data.dtype not in _TAGS:
        if data.dtype == np.bool_:
            data = data.astype(np.uint8)
        elif data.dtype.kind == "f":
            data = data.astype("<f4")
        else:
            raise ValueError(f"unsupported volume dtype {data.dtype}")
    d, h, w = data.shape
    header = (
        f"dims={d},{h},{w}\n"
        f"spacing={spacing[0]},{spacing[1]},{spacing[2]}\n"
        f"dtype={_TAGS[np.dtype(data.dtype)]}\n"
        "\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_volume_file(path):
    """Parse a volume file; returns (data, spacing)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise VolumeHeaderError(f"{path}: missing blank line after header")
    try:
        header_lines = blob[:sep].decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise VolumeHeaderError(f"{path}: header is not valid UTF-8") from exc
    fields = {}
    for line in header_lines:
        key, eq, val = line.partition("=")
        if not eq:
            raise VolumeHeaderError(f"{path}: malformed header line {line!r}")
        fields[key.strip()] = val.strip()
    for key in ("dims", "spacing", "dtype"):
        if key not in fields:
            raise VolumeHeaderError(f"{path}: header missing {key!r}")
    try:
        dims = tuple(int(v) for v in fields["dims"].split(","))
        spacing = tuple(float(v) for v in fields["spacing"].split(","))
    except ValueError as exc:
        raise VolumeHeaderError(f"{path}: unparseable dims/spacing") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeHeaderError(f"{path}: bad dims {dims}")
    if len(spacing) != 3 or min(spacing) <= 0:
        raise VolumeHeaderError(f"{path}: bad spacing {spacing}")
    if fields["dtype"] not in _DTYPES:
        raise VolumeHeaderError(f"{path}: unknown dtype {fields['dtype']!r}")
    dt = _DTYPES[fields["dtype"]]
    payload = blob[sep + 2 :]
    nbytes = int(np.prod(dims)) * dt.itemsize
    if len(payload) != nbytes:
        raise VolumePayloadError(
            f"{path}: payload has {len(payload)} bytes, header implies {nbytes}"
        )
    data = np.frombuffer(payload, dtype=dt).reshape(dims)
    return data, spacing


def load_volume(path):
    data, spacing = read_volume_file(path)
    if data.dtype == np.uint8:
        raise VolumeHeaderError(f"{path}: u8 payload is a mask, not an intensity volume")
    return Volume(data, spacing)


def load_mask(path):
    data, spacing = read_volume_file(path)
    if data.dtype != np.uint8:
        raise VolumeHeaderError(f"{path}: mask files must have dtype=u8")
    return MaskVolume(data, spacing)
