"""The dense volume container shared by images, masks and network outputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Volume:
    """Multi-channel 3D scalar field with voxel spacing in millimetres.

    ``data`` is a read-only float32 array laid out as (channels, depth, height,
    width). Construction copies and freezes the array, so a Volume can be shared
    freely between threads doing read-only work.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be (C, D, H, W) with positive sizes, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data contains NaN or Inf")
        # spacing is stored as float32 like the data, so files round-trip exactly
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive finite values, got {self.spacing}")
        arr = np.array(arr, dtype=np.float32, copy=True, order="C")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def channel(self, c: int) -> np.ndarray:
        return self.data[c]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return f"Volume(channels={self.channels}, dims={self.dims}, spacing={self.spacing})"
