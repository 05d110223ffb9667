"""Run-length codec for binary mask volumes.

Runs alternate background/foreground over the C-order flattening of a
``[T, H, W]`` volume (row-major within a frame, frames concatenated). The
first run counts background pixels and may be zero. On disk the runs are
32-bit little-endian unsigned integers with no header; the volume shape is
recorded by the accompanying manifest.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


class RLEError(ValueError):
    pass


def encode(mask) -> np.ndarray:
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return np.zeros(1, dtype=np.uint32)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def decode(runs, shape, name: str = "mask") -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    total = int(np.prod(shape))
    if runs.sum() != total:
        raise RLEError(f"{name}: runs cover {int(runs.sum())} pixels, expected {total} for shape {tuple(shape)}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def to_bytes(mask) -> bytes:
    return encode(mask).astype("<u4").tobytes()


def from_bytes(raw: bytes, shape, name: str = "mask") -> np.ndarray:
    if len(raw) % 4:
        raise RLEError(f"{name}: truncated RLE stream ({len(raw)} bytes is not a multiple of 4)")
    return decode(np.frombuffer(raw, dtype="<u4"), shape, name)


def write(path, mask) -> None:
    Path(path).write_bytes(to_bytes(mask))


def read(path, shape, name: str | None = None) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise RLEError(f"{name or p}: missing RLE file {p}")
    return from_bytes(p.read_bytes(), shape, name or str(p))
