"""Binary dataset files.

Layout, all little-endian::

    b"OBSLAB1\\0"
    u32 width, u32 height, u64 count
    count x u8 labels
    count * width * height x f32 pixels, row-major per image
    u64 checksum (first 8 bytes of BLAKE2b over everything above)

Generation metadata (seed, task digest) lives in a JSON sidecar
``<file>.meta.json`` so the binary layout stays fixed.
"""
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"OBSLAB1\x00"
_HEADER = struct.Struct("<IIQ")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    width: int
    height: int
    labels: np.ndarray
    images: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8).ravel()
        self.images = np.asarray(self.images, dtype=np.float32).reshape(-1, self.height, self.width)
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if np.any(self.labels > 1):
            raise DatasetError("labels must be 0 or 1")

    @property
    def count(self):
        return len(self.labels)

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.width == other.width
                and self.height == other.height
                and np.array_equal(self.labels, other.labels)
                and self.images.tobytes() == other.images.tobytes())

    @classmethod
    def from_labeled(cls, data, meta=None):
        n, h, w = np.shape(data.images)
        return cls(w, h, data.labels, data.images, dict(meta or {}))


def _checksum(blob):
    return hashlib.blake2b(blob, digest_size=8).digest()


def encode(ds):
    body = (MAGIC + _HEADER.pack(ds.width, ds.height, ds.count) + ds.labels.tobytes()
            + ds.images.astype("<f4").tobytes())
    return body + _checksum(body)


def decode(blob):
    if blob[:8] != MAGIC:
        raise DatasetError("bad magic: not an OBSLAB1 dataset")
    if len(blob) < 8 + _HEADER.size + 8:
        raise DatasetError("truncated dataset header")
    width, height, count = _HEADER.unpack_from(blob, 8)
    pos = 8 + _HEADER.size
    expect = pos + count + 4 * count * width * height + 8
    if len(blob) != expect:
        raise DatasetError(f"truncated or oversized dataset: {len(blob)} bytes, expected {expect}")
    if _checksum(blob[:-8]) != blob[-8:]:
        raise DatasetError("checksum mismatch")
    labels = np.frombuffer(blob, np.uint8, count, pos).copy()
    pixels = np.frombuffer(blob, "<f4", count * width * height, pos + count)
    return Dataset(width, height, labels, pixels.astype(np.float32).reshape(count, height, width))


def write_dataset(path, ds):
    blob = encode(ds)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    if ds.meta:
        with open(f"{path}.meta.json", "w") as fh:
            json.dump(ds.meta, fh, sort_keys=True, indent=1)


def read_dataset(path):
    with open(path, "rb") as fh:
        ds = decode(fh.read())
    meta_path = f"{path}.meta.json"
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            ds.meta = json.load(fh)
    return ds


def write_template(path, template, meta=None):
    """A template is stored as a one-image dataset with label 0."""
    t = np.asarray(template)
    write_dataset(path, Dataset(t.shape[1], t.shape[0], [0], t[None], dict(meta or {})))


def read_template(path):
    ds = read_dataset(path)
    if ds.count != 1:
        raise DatasetError(f"template file holds {ds.count} images")
    return ds.images[0].astype(float)
