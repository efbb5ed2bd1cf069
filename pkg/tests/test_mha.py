"""MetaImage IO: round trips, multi-channel fields, malformed headers."""

from __future__ import annotations

import numpy as np
import pytest

from jacmorph.errors import InputError
from jacmorph.grid import Image3D, Mask3D
from jacmorph.mha import (read_image, read_mask, read_mha, write_image,
                          write_mask, write_mha)


@pytest.mark.parametrize("etype,atol", [
    ("MET_DOUBLE", 0.0),
    ("MET_FLOAT", 1e-6),
])
def test_scalar_round_trip(tmp_path, etype, atol):
    rng = np.random.default_rng(0)
    img = Image3D(rng.normal(size=(5, 4, 3)), (0.98, 0.98, 4.0), (-1.0, 2.0, 3.5))
    path = tmp_path / "img.mha"
    write_image(path, img, etype)
    back = read_image(path)
    assert back.dims == img.dims
    assert back.spacing == img.spacing and back.origin == img.origin
    assert np.allclose(back.data, img.data, atol=atol)


def test_integer_round_trip_widens_to_double(tmp_path):
    vals = np.arange(-6, 6, dtype=np.float64).reshape(3, 2, 2)
    path = tmp_path / "short.mha"
    write_mha(path, vals, (1, 1, 1), (0, 0, 0), "MET_SHORT")
    arr, _, _ = read_mha(path)
    assert arr.dtype == np.float64
    assert np.array_equal(arr, vals)


def test_mask_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    mask = Mask3D(rng.random((4, 5, 6)) < 0.5, (2.0, 2.0, 2.0))
    path = tmp_path / "mask.mha"
    write_mask(path, mask)
    back = read_mask(path)
    assert np.array_equal(back.data, mask.data)


def test_vector_field_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    field = rng.normal(size=(4, 3, 5, 3))
    path = tmp_path / "field.mha"
    write_mha(path, field, (1.0, 1.5, 2.0), (0.0, 0.0, 0.0), "MET_DOUBLE")
    arr, spacing, _ = read_mha(path)
    assert arr.shape == (4, 3, 5, 3)
    assert spacing == (1.0, 1.5, 2.0)
    assert np.array_equal(arr, field)
    header = path.read_bytes().split(b"ElementType")[0]
    assert b"ElementNumberOfChannels = 3" in header


def test_write_is_deterministic(tmp_path):
    rng = np.random.default_rng(3)
    img = Image3D(rng.normal(size=(3, 3, 3)), (1, 1, 1))
    write_image(tmp_path / "a.mha", img)
    write_image(tmp_path / "b.mha", img)
    assert (tmp_path / "a.mha").read_bytes() == (tmp_path / "b.mha").read_bytes()


def test_x_fastest_disk_order(tmp_path):
    # The raw payload must store x as the fastest-varying index.
    vals = np.arange(8, dtype=np.float64).reshape(2, 2, 2)
    path = tmp_path / "order.mha"
    write_mha(path, vals, (1, 1, 1), (0, 0, 0), "MET_DOUBLE")
    payload = path.read_bytes().split(b"ElementDataFile = LOCAL\n")[1]
    first_two = np.frombuffer(payload, dtype="<f8", count=2)
    assert first_two[0] == vals[0, 0, 0]
    assert first_two[1] == vals[1, 0, 0]


def test_reader_rejects_scalar_as_mask_channels(tmp_path):
    field = np.zeros((2, 2, 2, 3))
    path = tmp_path / "field.mha"
    write_mha(path, field, (1, 1, 1), (0, 0, 0), "MET_FLOAT")
    with pytest.raises(InputError):
        read_image(path)
    with pytest.raises(InputError):
        read_mask(path)


def test_reader_rejects_truncated_payload(tmp_path):
    img = Image3D(np.zeros((4, 4, 4)), (1, 1, 1))
    path = tmp_path / "trunc.mha"
    write_image(path, img)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(InputError):
        read_mha(path)


def test_reader_rejects_unknown_element_type(tmp_path):
    path = tmp_path / "bad.mha"
    path.write_bytes(b"ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\n"
                     b"ElementType = MET_COMPLEX\nElementDataFile = LOCAL\n"
                     b"\x00\x00\x00\x00")
    with pytest.raises(InputError):
        read_mha(path)


def test_reader_rejects_external_data_file(tmp_path):
    path = tmp_path / "ext.mha"
    path.write_bytes(b"ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\n"
                     b"ElementType = MET_FLOAT\nElementDataFile = other.raw\n")
    with pytest.raises(InputError):
        read_mha(path)
