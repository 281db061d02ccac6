"""
Images - 8-bit raster types shared by the compositor, metrics and file I/O

All three wrap a uint8 numpy array in (height, width[, channels]) layout and
are immutable. Conversion to the network's [0, 1] float range divides by 255;
conversion back quantizes once, rounding half up.
"""

from dataclasses import dataclass

import numpy as np


class ImageError(ValueError):
    """Raised when pixel data does not fit the raster type it is wrapped in."""


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 with round-half-up: floor(v * 255 + 0.5)."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _frozen(pixels: np.ndarray, ndim: int, channels: int | None, kind: str) -> np.ndarray:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ImageError(f"{kind} pixels must be uint8, got {arr.dtype}")
    if arr.ndim != ndim or (channels is not None and arr.shape[2] != channels):
        raise ImageError(f"{kind} expects shape (h, w{', ' + str(channels) if channels else ''}), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageError(f"{kind} dimensions must be >= 1, got {arr.shape[:2]}")
    arr = arr.view()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class RgbImage:
    """Background, composite or network input: (h, w, 3) uint8."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixels", _frozen(self.pixels, 3, 3, "RgbImage"))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def unit(self) -> np.ndarray:
        """(h, w, 3) float64 in [0, 1]."""
        return self.pixels.astype(np.float64) / 255.0

    def chw(self, dtype: type[np.floating] = np.float32) -> np.ndarray:
        """(3, h, w) network input in [0, 1]."""
        return (self.pixels.transpose(2, 0, 1).astype(np.float64) / 255.0).astype(dtype)

    @classmethod
    def from_unit(cls, values: np.ndarray) -> "RgbImage":
        return cls(quantize(values))


@dataclass(frozen=True, eq=False)
class RgbaImage:
    """Pure smoke: (h, w, 4) uint8, alpha last."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixels", _frozen(self.pixels, 3, 4, "RgbaImage"))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def rgb(self) -> RgbImage:
        return RgbImage(np.ascontiguousarray(self.pixels[:, :, :3]))

    @property
    def alpha(self) -> np.ndarray:
        """(h, w) float64 in [0, 1]."""
        return self.pixels[:, :, 3].astype(np.float64) / 255.0


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Strictly binary (h, w) uint8 labels: 1 smoke, 0 background."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen(self.labels, 2, None, "BinaryMask")
        if arr.size and arr.max() > 1:
            raise ImageError(f"BinaryMask labels must be 0 or 1, found {int(arr.max())}")
        object.__setattr__(self, "labels", arr)

    @classmethod
    def from_bool(cls, values: np.ndarray) -> "BinaryMask":
        return cls(np.asarray(values, dtype=bool).astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        h, w = self.labels.shape
        return int(h), int(w)

    def count(self) -> int:
        """Number of smoke pixels."""
        return int(self.labels.sum(dtype=np.int64))

    def to_gray(self) -> np.ndarray:
        """0/255 grayscale for PNG output."""
        return self.labels * np.uint8(255)
