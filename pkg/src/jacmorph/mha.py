"""Reader/writer for the local single-file MetaImage format (.mha).

Supports the subset used by this project: ASCII header with ObjectType,
NDims=3, DimSize, ElementSpacing, Offset, ElementType in {MET_SHORT,
MET_FLOAT, MET_DOUBLE, MET_UCHAR}, optional ElementNumberOfChannels for
vector fields, ElementDataFile=LOCAL, followed by raw little-endian voxel
data in x-fastest order.
"""

from __future__ import annotations

import os
from typing import Union

import numpy as np

from .errors import InputError
from .grid import Image3D, Mask3D

_DTYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
    "MET_UCHAR": np.dtype("u1"),
}
_TYPE_OF_DTYPE = {
    np.dtype(np.int16): "MET_SHORT",
    np.dtype(np.float32): "MET_FLOAT",
    np.dtype(np.float64): "MET_DOUBLE",
    np.dtype(np.uint8): "MET_UCHAR",
}


def _parse_header(fh) -> dict:
    header = {}
    while True:
        line = b""
        while not line.endswith(b"\n"):
            ch = fh.read(1)
            if not ch:
                raise InputError("truncated MetaImage header")
            line += ch
        key, _, value = line.decode("ascii").partition("=")
        key = key.strip()
        header[key] = value.strip()
        if key == "ElementDataFile":
            return header


def read_mha(path: Union[str, os.PathLike]) -> tuple[np.ndarray, tuple, tuple]:
    """Read a local .mha file.

    Returns ``(array, spacing, origin)`` where the array has shape
    (nx, ny, nz) for scalar images or (nx, ny, nz, c) for multi-channel data,
    as float64.
    """
    with open(path, "rb") as fh:
        header = _parse_header(fh)
        if header.get("NDims") != "3":
            raise InputError(f"only NDims=3 supported, got {header.get('NDims')}")
        if header.get("ElementDataFile", "").upper() != "LOCAL":
            raise InputError("only ElementDataFile=LOCAL is supported")
        etype = header.get("ElementType")
        if etype not in _DTYPES:
            raise InputError(f"unsupported ElementType {etype}")
        dims = tuple(int(v) for v in header["DimSize"].split())
        spacing = tuple(float(v) for v in header.get("ElementSpacing", "1 1 1").split())
        origin = tuple(float(v) for v in header.get("Offset", "0 0 0").split())
        channels = int(header.get("ElementNumberOfChannels", "1"))
        count = dims[0] * dims[1] * dims[2] * channels
        raw = np.fromfile(fh, dtype=_DTYPES[etype], count=count)
    if raw.size != count:
        raise InputError(f"expected {count} elements, file holds {raw.size}")
    # File layout: channels fastest, then x, y, z.
    if channels > 1:
        arr = raw.reshape(dims[2], dims[1], dims[0], channels).transpose(2, 1, 0, 3)
    else:
        arr = raw.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    return np.ascontiguousarray(arr, dtype=np.float64), spacing, origin


def read_image(path) -> Image3D:
    arr, spacing, origin = read_mha(path)
    if arr.ndim != 3:
        raise InputError(f"{path} holds multi-channel data, not a scalar image")
    return Image3D(arr, spacing, origin)


def read_mask(path) -> Mask3D:
    arr, spacing, origin = read_mha(path)
    if arr.ndim != 3:
        raise InputError(f"{path} holds multi-channel data, not a mask")
    return Mask3D(arr >= 0.5, spacing, origin)


def write_mha(path, array: np.ndarray, spacing, origin, element_type: str = "MET_DOUBLE") -> None:
    """Write an (nx, ny, nz) or (nx, ny, nz, c) array as a local .mha file."""
    if element_type not in _DTYPES:
        raise InputError(f"unsupported ElementType {element_type}")
    arr = np.asarray(array)
    if arr.ndim == 3:
        channels = 1
        disk = arr.transpose(2, 1, 0)
    elif arr.ndim == 4:
        channels = arr.shape[3]
        disk = arr.transpose(2, 1, 0, 3)
    else:
        raise InputError(f"array must be 3D or 4D, got shape {arr.shape}")
    dims = arr.shape[:3]
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"DimSize = {dims[0]} {dims[1]} {dims[2]}",
        f"ElementSpacing = {spacing[0]!r} {spacing[1]!r} {spacing[2]!r}",
        f"Offset = {origin[0]!r} {origin[1]!r} {origin[2]!r}",
    ]
    if channels > 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    lines += [f"ElementType = {element_type}", "ElementDataFile = LOCAL"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(disk, dtype=_DTYPES[element_type]).tobytes())


def write_image(path, img: Image3D, element_type: str = "MET_DOUBLE") -> None:
    write_mha(path, img.data, img.spacing, img.origin, element_type)


def write_mask(path, mask: Mask3D) -> None:
    write_mha(path, mask.data.astype(np.uint8), mask.spacing, mask.origin, "MET_UCHAR")
