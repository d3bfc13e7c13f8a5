import os
import struct

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from simulator import FrameSet

MAGIC = b'HBTF'
FORMAT_VERSION = 1
# magic, version, N, M, seed, zero padding to 64 bytes
HEADER = struct.Struct('<4sIQQQ32x')
META_SUFFIX = '.meta'


class FrameFormatError(ValueError):
    """Malformed or truncated FrameSet file."""


def ensure_parent_dir(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_metadata(path, metadata):
    """Write KEY=VALUE lines in sorted key order."""
    ensure_parent_dir(path)
    with open(path, 'w', encoding='utf-8') as handle:
        for key in sorted(metadata):
            handle.write(f"{key}={metadata[key]}\n")


def read_metadata(path):
    if not os.path.exists(path):
        return {}
    return {key: value for key, value in dotenv_values(path).items() if value is not None}


class Storage:
    def __init__(self, path):
        self.path = path

    @property
    def metadata_path(self):
        return self.path + META_SUFFIX

    def load(self):
        raise NotImplementedError

    def save(self, frameset):
        raise NotImplementedError


class BinaryFrameStorage(Storage):
    """64-byte header then little-endian float64 intensities, frame-major."""

    def load(self):
        with open(self.path, 'rb') as handle:
            header = handle.read(HEADER.size)
            if len(header) != HEADER.size:
                raise FrameFormatError(f"{self.path}: truncated header")
            magic, version, n_frames, n_pixels, seed = HEADER.unpack(header)
            if magic != MAGIC:
                raise FrameFormatError(f"{self.path}: bad magic {magic!r}")
            if version != FORMAT_VERSION:
                raise FrameFormatError(f"{self.path}: unsupported version {version}")
            payload = handle.read()
        expected = n_frames * n_pixels * 8
        if len(payload) != expected:
            raise FrameFormatError(
                f"{self.path}: expected {expected} data bytes for {n_frames}x{n_pixels}, got {len(payload)}"
            )
        frames = np.frombuffer(payload, dtype='<f8').reshape(n_frames, n_pixels).astype(np.float64)
        metadata = read_metadata(self.metadata_path)
        trial = int(metadata.pop('TRIAL', 0))
        metadata.pop('SEED', None)
        return FrameSet(frames, seed, trial, metadata)

    def save(self, frameset):
        if frameset.seed < 0:
            raise FrameFormatError("seed must be a nonnegative 64-bit integer")
        ensure_parent_dir(self.path)
        header = HEADER.pack(MAGIC, FORMAT_VERSION, frameset.frame_count, frameset.pixel_count, frameset.seed)
        with open(self.path, 'wb') as handle:
            handle.write(header)
            handle.write(np.ascontiguousarray(frameset.frames, dtype='<f8').tobytes())
        write_metadata(self.metadata_path, dict(frameset.metadata, SEED=frameset.seed, TRIAL=frameset.trial))


class CSVFrameStorage(Storage):
    """One row per frame, one column per pixel; seed and settings in the sidecar."""

    def load(self):
        if not os.path.exists(self.path):
            raise FileNotFoundError(self.path)
        frames = pd.read_csv(self.path, float_precision='round_trip').to_numpy(dtype=np.float64)
        metadata = read_metadata(self.metadata_path)
        seed = int(metadata.pop('SEED', 0))
        trial = int(metadata.pop('TRIAL', 0))
        return FrameSet(frames, seed, trial, metadata)

    def save(self, frameset):
        ensure_parent_dir(self.path)
        columns = [f"pixel_{i}" for i in range(1, frameset.pixel_count + 1)]
        pd.DataFrame(frameset.frames, columns=columns).to_csv(self.path, index=False)
        write_metadata(self.metadata_path, dict(frameset.metadata, SEED=frameset.seed, TRIAL=frameset.trial))


def save_table(df, path):
    """Write a result table; floats keep their shortest round-trip repr."""
    ensure_parent_dir(path)
    df.to_csv(path, index=False)
    return path


def get_storage(storage_type, path):
    """
    Returns a FrameSet storage for the given backend.

    Args:
        storage_type (str): 'HBTF' for the binary format or 'CSV'.
        path (str): location of the frame file.

    Raises:
        ValueError: for an unknown storage type.
    """
    if storage_type == 'HBTF':
        return BinaryFrameStorage(path)
    elif storage_type == 'CSV':
        return CSVFrameStorage(path)
    raise ValueError(f"unknown storage type {storage_type!r}; use 'HBTF' or 'CSV'")
