"""Shared fixtures and an independent IDX writer for byte-level fixtures."""

import struct

import numpy as np
import pytest

from covbalance import RngStream


def write_idx_images(path, images_uint8):
    """Byte-level IDX image writer, independent of the library reader."""
    arr = np.asarray(images_uint8, dtype=np.uint8)
    m, h, w = arr.shape
    blob = struct.pack(">IIII", 2051, m, h, w) + arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def write_idx_labels(path, labels):
    arr = np.asarray(labels, dtype=np.uint8)
    blob = struct.pack(">II", 2049, arr.shape[0]) + arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


@pytest.fixture
def rng():
    return RngStream(20240801)
