"""CT volume ingest: container i/o, normalization, resampling, framing, noise.

Volumes travel as depth-major float arrays. The on-disk container is a small
fixed header (three 32-bit dims, three 64-bit spacings, little-endian) followed
by the voxels as 32-bit floats in depth-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_HEADER = struct.Struct("<iiiddd")


@dataclass
class Volume:
    """One CT volume: data [D, H, W] and voxel spacing (mm) per axis."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-d, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume dims must all be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise ValueError(f"voxel spacing must be three positive floats, got {self.spacing}")


@dataclass
class FrameStack:
    """A volume split into T frames of K slices each: data [T, K, H, W]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"frame stack must be 4-d, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"frame stack dims must all be >= 1, got {self.data.shape}")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def slices_per_frame(self) -> int:
        return self.data.shape[1]


def write_volume(path, volume: Volume) -> None:
    """Write a volume to the binary container format."""
    d, h, w = volume.data.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(d, h, w, *volume.spacing))
        f.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    """Read a volume from the binary container format.

    Rejects malformed headers and payloads whose size disagrees with the
    declared dims.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"volume container too short for header: {len(raw)} bytes")
    d, h, w, sd, sh, sw = _HEADER.unpack_from(raw)
    if min(d, h, w) < 1:
        raise ValueError(f"volume container declares non-positive dims ({d}, {h}, {w})")
    if not (sd > 0 and sh > 0 and sw > 0):
        raise ValueError(f"volume container declares non-positive spacing ({sd}, {sh}, {sw})")
    payload = raw[_HEADER.size:]
    expected = d * h * w * 4
    if len(payload) != expected:
        raise ValueError(
            f"volume payload is {len(payload)} bytes, expected {expected} for dims ({d}, {h}, {w})"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(d, h, w).astype(np.float64)
    return Volume(data, (sd, sh, sw))


def min_max_normalize(volume: Volume) -> Volume:
    """Scale voxels to [0, 1] by the volume's min and max.

    A constant volume maps to all zeros. Non-finite voxels are rejected.
    """
    data = volume.data
    bad = np.count_nonzero(~np.isfinite(data))
    if bad:
        raise ValueError(f"volume has {bad} non-finite voxels, cannot normalize")
    lo = data.min()
    hi = data.max()
    if hi == lo:
        return Volume(np.zeros_like(data), volume.spacing)
    return Volume((data - lo) / (hi - lo), volume.spacing)


def _resample_axis(data: np.ndarray, new_size: int, axis: int) -> np.ndarray:
    """Linear resample along one axis with half-pixel sample centers."""
    old_size = data.shape[axis]
    if new_size == old_size:
        return data
    moved = np.moveaxis(data, axis, 0)
    # Sample centers of the output grid mapped into input coordinates.
    pos = (np.arange(new_size) + 0.5) * (old_size / new_size) - 0.5
    pos = np.clip(pos, 0.0, old_size - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, old_size - 1)
    frac = (pos - lo).reshape((new_size,) + (1,) * (data.ndim - 1))
    a = moved[lo]
    b = moved[hi]
    out = a + frac * (b - a)
    return np.moveaxis(out, 0, axis)


def resample(volume: Volume, depth: int, height: int, width: int) -> np.ndarray:
    """Trilinearly resample a volume to [depth, height, width]."""
    if min(depth, height, width) < 1:
        raise ValueError(f"target dims must be >= 1, got ({depth}, {height}, {width})")
    out = volume.data
    out = _resample_axis(out, depth, 0)
    out = _resample_axis(out, height, 1)
    out = _resample_axis(out, width, 2)
    return out


def partition_frames(data: np.ndarray, frames: int, slices_per_frame: int) -> FrameStack:
    """Split [D, H, W] into frames along depth. D must equal frames * slices_per_frame."""
    if data.ndim != 3:
        raise ValueError(f"expected 3-d data, got shape {data.shape}")
    d, h, w = data.shape
    if frames < 1 or slices_per_frame < 1:
        raise ValueError(f"frames and slices_per_frame must be >= 1, got {frames}, {slices_per_frame}")
    if d != frames * slices_per_frame:
        raise ValueError(
            f"depth {d} does not split into {frames} frames of {slices_per_frame} slices"
        )
    return FrameStack(data.reshape(frames, slices_per_frame, h, w))


def resample_and_frame(volume: Volume, frames: int, slices_per_frame: int,
                       height: int, width: int) -> FrameStack:
    """Resample to the target grid and split into frames of consecutive slices."""
    data = resample(volume, frames * slices_per_frame, height, width)
    return partition_frames(data, frames, slices_per_frame)


def center_crop(data: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Crop the central region with the given shape. Target must not exceed source."""
    if len(shape) != data.ndim:
        raise ValueError(f"crop shape {shape} has wrong rank for data shape {data.shape}")
    slices = []
    for axis, (have, want) in enumerate(zip(data.shape, shape)):
        if want < 1 or want > have:
            raise ValueError(f"crop size {want} invalid for axis {axis} of size {have}")
        start = (have - want) // 2
        slices.append(slice(start, start + want))
    return data[tuple(slices)]


def add_noise(stack: FrameStack, sigma: float, seed: int) -> FrameStack:
    """Add zero-mean Gaussian noise with the given sigma. sigma = 0 is the identity."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return FrameStack(stack.data.copy())
    rng = np.random.default_rng(seed)
    return FrameStack(stack.data + rng.normal(0.0, sigma, size=stack.data.shape))
