"""sRGB <-> CIELAB conversion and a*-channel difference maps.

Conversions use the CIE 1976 L*a*b* formulas under the D65 white point with the
IEC 61966-2-1 piecewise sRGB transfer curve. All functions are pure and operate on
numpy arrays, so they are safe to call from any number of threads.
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DimensionMismatchError

# D65 reference white (2 degree observer), XYZ scaled to Y = 100
XN, YN, ZN = 95.047, 100.000, 108.883

# CIE f-function constants
EPSILON = 216.0 / 24389.0
KAPPA = 24389.0 / 27.0

# sRGB transfer thresholds
SRGB_DECODE_THRESHOLD = 0.04045
SRGB_ENCODE_THRESHOLD = 0.0031308
SRGB_GAMMA = 2.4

# Linear sRGB -> XYZ (D65)
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)

A_STAR_OFFSET = 128


@dataclass(frozen=True, eq=False)
class RgbImage:
    """Row-major 8-bit sRGB image, `data` has shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"RgbImage data must have shape (H, W, 3), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("RgbImage must be at least 1x1")
        if data.dtype != np.uint8:
            if np.any(data < 0) or np.any(data > 255):
                raise ValueError("RgbImage values must lie in [0, 255]")
            data = data.astype(np.uint8)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    @classmethod
    def filled(cls, height: int, width: int, rgb) -> "RgbImage":
        data = np.empty((height, width, 3), dtype=np.uint8)
        data[...] = np.asarray(rgb, dtype=np.uint8)
        return cls(data)

    def __eq__(self, other) -> bool:
        return isinstance(other, RgbImage) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabImage:
    """Float CIELAB planes, each of shape (height, width)."""

    L: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        planes = [np.asarray(p, dtype=np.float64) for p in (self.L, self.a, self.b)]
        if planes[0].ndim != 2 or any(p.shape != planes[0].shape for p in planes):
            raise ValueError("LabImage planes must be 2-D and share one shape")
        object.__setattr__(self, "L", planes[0])
        object.__setattr__(self, "a", planes[1])
        object.__setattr__(self, "b", planes[2])

    @property
    def width(self) -> int:
        return int(self.L.shape[1])

    @property
    def height(self) -> int:
        return int(self.L.shape[0])

    @property
    def shape(self) -> tuple:
        return self.L.shape


@dataclass(frozen=True, eq=False)
class AStarPlane:
    """8-bit a* plane in the offset encoding round(a* + 128), clamped to [0, 255]."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError("AStarPlane values must be 2-D")
        if values.dtype != np.uint8:
            if np.any(values < 0) or np.any(values > 255):
                raise ValueError("AStarPlane values must lie in [0, 255]")
            values = values.astype(np.uint8)
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class DiffMap:
    """Non-negative float map of per-pixel color differences (|Δa*| by default)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("DiffMap values must be 2-D")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("DiffMap values must be finite and non-negative")
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def shape(self) -> tuple:
        return self.values.shape


def _srgb_decode(c: np.ndarray) -> np.ndarray:
    return np.where(
        c <= SRGB_DECODE_THRESHOLD,
        c / 12.92,
        ((c + 0.055) / 1.055) ** SRGB_GAMMA,
    )


def _srgb_encode(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, None)
    return np.where(
        c <= SRGB_ENCODE_THRESHOLD,
        c * 12.92,
        1.055 * c ** (1.0 / SRGB_GAMMA) - 0.055,
    )


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > EPSILON, np.cbrt(t), (KAPPA * t + 16.0) / 116.0)


def _f_inv(f: np.ndarray) -> np.ndarray:
    f3 = f ** 3
    return np.where(f3 > EPSILON, f3, (116.0 * f - 16.0) / KAPPA)


def srgb_to_lab(img: RgbImage) -> LabImage:
    """Convert an 8-bit sRGB image to CIE 1976 L*a*b* (D65)."""
    linear = _srgb_decode(img.data.astype(np.float64) / 255.0)
    xyz = (linear @ _RGB_TO_XYZ.T) * 100.0
    fx = _f(xyz[..., 0] / XN)
    fy = _f(xyz[..., 1] / YN)
    fz = _f(xyz[..., 2] / ZN)
    return LabImage(
        L=116.0 * fy - 16.0,
        a=500.0 * (fx - fy),
        b=200.0 * (fy - fz),
    )


def lab_to_srgb(img: LabImage) -> RgbImage:
    """Convert CIELAB back to 8-bit sRGB; out-of-gamut channels clamp to [0, 255]."""
    fy = (img.L + 16.0) / 116.0
    fx = fy + img.a / 500.0
    fz = fy - img.b / 200.0
    y = np.where(img.L > KAPPA * EPSILON, fy ** 3, img.L / KAPPA)
    xyz = np.stack([_f_inv(fx) * XN, y * YN, _f_inv(fz) * ZN], axis=-1) / 100.0
    encoded = _srgb_encode(xyz @ _XYZ_TO_RGB.T)
    return RgbImage(np.clip(np.rint(encoded * 255.0), 0, 255).astype(np.uint8))


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero."""
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def a_star_offset(img: LabImage) -> AStarPlane:
    """Encode a* as round(a* + 128) clamped to the 8-bit range."""
    encoded = round_half_away(img.a + A_STAR_OFFSET)
    return AStarPlane(np.clip(encoded, 0, 255).astype(np.uint8))


def _check_same_shape(first, second, what: str = "twins") -> None:
    if first.shape != second.shape:
        raise DimensionMismatchError(
            f"misaligned {what}: {first.shape[1]}x{first.shape[0]} vs "
            f"{second.shape[1]}x{second.shape[0]}"
        )


def lab_a_difference(path: LabImage, healthy: LabImage) -> DiffMap:
    """|a*(path) - a*(healthy)| on unquantized float planes."""
    _check_same_shape(path, healthy)
    return DiffMap(np.abs(path.a - healthy.a))


def a_diff_map(path: RgbImage, healthy: RgbImage) -> DiffMap:
    """Pixel-wise |Δa*| between a pathological image and its healthy twin."""
    _check_same_shape(path, healthy)
    return lab_a_difference(srgb_to_lab(path), srgb_to_lab(healthy))


def delta_e76(first: LabImage, second: LabImage) -> DiffMap:
    """CIE 1976 color distance per pixel."""
    _check_same_shape(first, second)
    return DiffMap(np.sqrt(
        (first.L - second.L) ** 2 + (first.a - second.a) ** 2 + (first.b - second.b) ** 2
    ))


def color_diff_map(
    path: RgbImage,
    healthy: RgbImage,
    metric: Literal["a_star", "delta_e"] = "a_star",
) -> DiffMap:
    """Difference map under the chosen metric; a* is the erythema default."""
    if metric == "a_star":
        return a_diff_map(path, healthy)
    if metric == "delta_e":
        _check_same_shape(path, healthy)
        return delta_e76(srgb_to_lab(path), srgb_to_lab(healthy))
    raise ValueError(f"unknown difference metric: {metric!r}")


def a_star_plane(img: RgbImage) -> AStarPlane:
    """Shortcut: sRGB image straight to its offset-encoded a* plane."""
    return a_star_offset(srgb_to_lab(img))
