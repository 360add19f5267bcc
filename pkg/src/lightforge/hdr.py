"""Linear-HDR image containers, PFM file I/O, sRGB tone mapping, and
illuminant color science (blackbody locus, HSV).

All image payloads are numpy float32 arrays of shape (H, W, 3), row 0 at the
top. HDR pixels are linear relative radiance (finite, >= 0); LDR pixels are
display-referred sRGB in [0, 1].
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass

import numpy as np

# IEC 61966-2-1 sRGB encode constants.
_SRGB_LINEAR_KNEE = 0.0031308
_SRGB_LINEAR_SLOPE = 12.92
_SRGB_GAIN = 1.055
_SRGB_OFFSET = 0.055
_SRGB_EXPONENT = 1.0 / 2.4

# Column-major XYZ -> linear sRGB (D65 primaries).
XYZ_TO_SRGB = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]
)

# Planck constants (SI).
_H = 6.62607015e-34
_C = 2.99792458e8
_KB = 1.380649e-23

BLACKBODY_TEMP_MIN = 1000.0
BLACKBODY_TEMP_MAX = 20000.0


class PfmError(ValueError):
    """Malformed PFM byte stream."""


def _as_image_array(pixels, what: str) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{what} must have shape (H, W, 3), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class HdrImage:
    """Linear radiance raster. data[y, x] = (r, g, b), all finite and >= 0."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_image_array(self.data, "HdrImage")
        if not np.isfinite(arr).all():
            bad = int(np.argmax(~np.isfinite(arr).all(axis=2)))
            raise ValueError(f"HdrImage has non-finite component at pixel index {bad}")
        if (arr < 0).any():
            bad = int(np.argmax((arr < 0).any(axis=2)))
            raise ValueError(f"HdrImage has negative component at pixel index {bad}")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class LdrImage:
    """Display-referred raster; every component in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_image_array(self.data, "LdrImage")
        if not np.isfinite(arr).all():
            raise ValueError("LdrImage has non-finite component")
        if (arr < 0).any() or (arr > 1).any():
            raise ValueError("LdrImage component outside [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def srgb_encode(x: np.ndarray) -> np.ndarray:
    """Linear -> sRGB transfer on non-negative inputs, clamped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.where(
        x <= _SRGB_LINEAR_KNEE,
        _SRGB_LINEAR_SLOPE * x,
        _SRGB_GAIN * np.power(np.maximum(x, _SRGB_LINEAR_KNEE), _SRGB_EXPONENT) - _SRGB_OFFSET,
    )
    return np.clip(y, 0.0, 1.0)


def srgb_decode(y: np.ndarray) -> np.ndarray:
    """sRGB -> linear transfer (inverse of srgb_encode on [0, 1])."""
    y = np.asarray(y, dtype=np.float64)
    knee = _SRGB_LINEAR_SLOPE * _SRGB_LINEAR_KNEE
    return np.where(
        y <= knee,
        y / _SRGB_LINEAR_SLOPE,
        np.power((y + _SRGB_OFFSET) / _SRGB_GAIN, 2.4),
    )


def tone_map_srgb(img: HdrImage, frame: str | int | None = None) -> LdrImage:
    """Apply the sRGB transfer per component; values above 1 clamp to 1."""
    arr = img.data
    finite = np.isfinite(arr)
    if not finite.all():
        pixel = int(np.argmax(~finite.all(axis=2)))
        where = f"frame {frame}, pixel index {pixel}" if frame is not None else f"pixel index {pixel}"
        raise ValueError(f"tone_map_srgb: non-finite component at {where}")
    return LdrImage(srgb_encode(arr).astype(np.float32))


# --- blackbody illuminant color -------------------------------------------
#
# CIE 1931 2-degree color matching functions via the multi-lobe piecewise
# Gaussian analytic fit (Wyman, Sloan & Shirley 2013), so no data tables are
# needed. Accuracy is ample for a normalized illuminant hue.

def _lobe(lam, mu, inv_sigma_lo, inv_sigma_hi):
    t = (lam - mu) * np.where(lam < mu, inv_sigma_lo, inv_sigma_hi)
    return np.exp(-0.5 * t * t)


def cie_xyz_bar(lam_nm: np.ndarray) -> np.ndarray:
    """Approximate (x̄, ȳ, z̄) at the given wavelengths [nm]; shape (..., 3)."""
    lam = np.asarray(lam_nm, dtype=np.float64)
    x = (
        0.362 * _lobe(lam, 442.0, 0.0624, 0.0374)
        + 1.056 * _lobe(lam, 599.8, 0.0264, 0.0323)
        - 0.065 * _lobe(lam, 501.1, 0.0490, 0.0382)
    )
    y = 0.821 * _lobe(lam, 568.8, 0.0213, 0.0247) + 0.286 * _lobe(lam, 530.9, 0.0613, 0.0322)
    z = 1.217 * _lobe(lam, 437.0, 0.0845, 0.0278) + 0.681 * _lobe(lam, 459.0, 0.0385, 0.0725)
    return np.stack([x, y, z], axis=-1)


def planck_spectrum(lam_nm: np.ndarray, temperature: float) -> np.ndarray:
    """Spectral radiance of an ideal thermal emitter (arbitrary scale)."""
    lam = np.asarray(lam_nm, dtype=np.float64) * 1e-9
    return (2.0 * _H * _C**2 / lam**5) / np.expm1(_H * _C / (lam * _KB * temperature))


# the integration grid and CMF samples are temperature-independent, so the
# trapezoid weights are folded into the CMF matrix once; each call then costs
# one Planck evaluation and one matmul
_BB_LAM = np.arange(360.0, 831.0, 1.0)


def _bb_cmf_weighted() -> np.ndarray:
    global _BB_CMF_W
    try:
        return _BB_CMF_W
    except NameError:
        w = np.ones_like(_BB_LAM)
        w[0] = w[-1] = 0.5  # trapezoid rule on a uniform 1 nm grid
        _BB_CMF_W = cie_xyz_bar(_BB_LAM) * w[:, None]
        return _BB_CMF_W


def blackbody_rgb(temperature: float) -> np.ndarray:
    """Linear sRGB color of a blackbody at `temperature` K, max component 1.

    Planck spectrum integrated against the CMF fit over 360-830 nm at 1 nm
    steps, converted to linear sRGB, negatives clamped, then normalized.
    """
    if not (BLACKBODY_TEMP_MIN <= temperature <= BLACKBODY_TEMP_MAX):
        raise ValueError(
            f"temperature {temperature} K outside "
            f"[{BLACKBODY_TEMP_MIN:g}, {BLACKBODY_TEMP_MAX:g}]"
        )
    spectrum = planck_spectrum(_BB_LAM, float(temperature))
    xyz = spectrum @ _bb_cmf_weighted()
    rgb = np.maximum(XYZ_TO_SRGB @ xyz, 0.0)
    return rgb / rgb.max()


def hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    """Hexcone HSV -> RGB; h is a turn in [0, 1), s and v in [0, 1]."""
    if not (0.0 <= h < 1.0):
        raise ValueError(f"hue {h} outside [0, 1)")
    if not (0.0 <= s <= 1.0 and 0.0 <= v <= 1.0):
        raise ValueError(f"saturation/value ({s}, {v}) outside [0, 1]")
    return np.array(colorsys.hsv_to_rgb(h, s, v))


# --- PFM interchange --------------------------------------------------------
#
# Wire format: ASCII header "PF\n<width> <height>\n-1.0\n", then `height`
# rows of `width` pixels, 3 little-endian float32 each, bottom row first.

def write_pfm_array(arr: np.ndarray) -> bytes:
    """Serialize an (H, W, 3) float32 array as little-endian color PFM."""
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PFM payload must have shape (H, W, 3), got {arr.shape}")
    header = f"PF\n{arr.shape[1]} {arr.shape[0]}\n-1.0\n".encode("ascii")
    return header + np.flipud(arr).astype("<f4").tobytes()


def write_pfm(img: HdrImage) -> bytes:
    return write_pfm_array(img.data)


def _read_header_token(data: bytes, offset: int) -> tuple[bytes, int]:
    while offset < len(data) and data[offset : offset + 1].isspace():
        offset += 1
    start = offset
    while offset < len(data) and not data[offset : offset + 1].isspace():
        offset += 1
    if start == offset:
        raise PfmError(f"unexpected end of header at byte {start}")
    return data[start:offset], offset


def read_pfm_array(data: bytes) -> np.ndarray:
    """Parse a color PFM byte stream into an (H, W, 3) float32 array."""
    if len(data) < 2 or data[:2] != b"PF":
        raise PfmError(f"bad magic at byte 0: expected 'PF', got {data[:2]!r}")
    offset = 2
    try:
        wtok, offset = _read_header_token(data, offset)
        htok, offset = _read_header_token(data, offset)
        stok, offset = _read_header_token(data, offset)
        width, height = int(wtok), int(htok)
        scale = float(stok)
    except ValueError as exc:
        raise PfmError(f"bad header near byte {offset}: {exc}") from exc
    if width <= 0 or height <= 0:
        raise PfmError(f"bad dimensions {width}x{height} near byte {offset}")
    if scale == 0.0:
        raise PfmError(f"zero scale factor near byte {offset}")
    offset += 1  # single whitespace byte terminates the header
    expected = width * height * 3 * 4
    payload = data[offset : offset + expected]
    if len(payload) != expected:
        raise PfmError(
            f"truncated payload at byte {offset + len(payload)}: "
            f"expected {expected} bytes, got {len(payload)}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(payload, dtype=dtype).reshape(height, width, 3)
    arr = np.flipud(arr).astype(np.float32)
    if abs(scale) != 1.0:
        arr = arr * np.float32(abs(scale))
    return arr


def read_pfm(data: bytes) -> HdrImage:
    return HdrImage(read_pfm_array(data))
