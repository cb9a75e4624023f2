"""Fourier-optics forward model for LED-array microscopy.

A thin sample is illuminated by a planar array of quasi-monochromatic LEDs
arranged in concentric rings.  Each LED produces a tilted plane wave, which
translates the sample spectrum across the objective pupil; the pupil applies
an amplitude-only transmission mask, and mutually incoherent LEDs add in
intensity at the detector.  A signed illumination pattern is realized as two
physical captures (positive and negative weights) that are subtracted after
independent detector noise.

Conventions used throughout:

* grids are square with power-of-two side length,
* transforms are unitary with the DC bin at index ``n // 2`` in both axes;
  spatial arrays use the same centered indexing,
* frequency coordinates are integer pixels, one pixel = 1 / (grid_n * dx)
  cycles per meter, so the pupil radius in pixels is
  ``na * grid_n * dx / wavelength``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as _sfft

from .errors import DimensionError, GeometryError, UnsupportedSizeError, ValidationError

_FFT_WORKERS = 2


class Plane(enum.Enum):
    OBJECT = "object"
    FOURIER = "fourier"


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ComplexField:
    """Square complex field, either a sample transmission or its spectrum."""

    data: np.ndarray
    plane: Plane
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        a = self.data
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"field must be square 2D, got shape {a.shape}")
        if not _is_pow2(a.shape[0]):
            raise UnsupportedSizeError(f"grid side {a.shape[0]} is not a power of two")
        if not np.iscomplexobj(a):
            raise ValidationError("field data must be complex")
        if self.validate and not np.all(np.isfinite(a)):
            raise ValidationError("field contains non-finite values")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


class FieldKind(enum.Enum):
    BRIGHT_FIELD = "bright"
    DARK_FIELD = "dark"


@dataclass(frozen=True)
class LedRing:
    """Ring of evenly spaced LEDs at one illumination polar angle."""

    polar_angle_deg: float
    count: int
    azimuth_offset_deg: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.polar_angle_deg < 90.0:
            raise GeometryError(
                f"ring polar angle must be in [0, 90) deg, got {self.polar_angle_deg}"
            )
        if self.count < 1:
            raise GeometryError(f"ring count must be >= 1, got {self.count}")
        if self.polar_angle_deg == 0.0 and self.count != 1:
            raise GeometryError("the axial ring (0 deg) must contain exactly one LED")


@dataclass(frozen=True)
class Led:
    """One LED: integer spectrum shift in frequency pixels plus bookkeeping."""

    index: int
    ring: int
    polar_deg: float
    azimuth_deg: float
    shift_px: tuple[int, int]  # (x, y)
    field_kind: FieldKind


@dataclass(frozen=True)
class MicroscopeConfig:
    """Imaging geometry: objective, sampling and the LED array layout."""

    wavelength: float = 522e-9
    na: float = 0.2
    grid_n: int = 256
    dx: float = 0.25e-6
    sensor_n: int = 64
    led_rings: tuple[LedRing, ...] = (
        LedRing(0.0, 1),
        LedRing(16.37, 12),
        LedRing(34.30, 12),
    )

    def __post_init__(self):
        if self.wavelength <= 0 or self.dx <= 0:
            raise ValidationError("wavelength and dx must be positive")
        if not 0 < self.na < 1:
            raise ValidationError(f"na must be in (0, 1), got {self.na}")
        if not _is_pow2(self.grid_n):
            raise UnsupportedSizeError(f"grid_n {self.grid_n} is not a power of two")
        r = self.pupil_radius_px
        if not 1.0 <= r < self.grid_n / 2:
            raise GeometryError(
                f"pupil radius {r:.2f} px outside [1, grid_n/2) for grid_n={self.grid_n}"
            )
        if self.sensor_n < 1 or self.grid_n % self.sensor_n != 0:
            raise GeometryError(
                f"sensor_n {self.sensor_n} must divide grid_n {self.grid_n}"
            )
        object.__setattr__(self, "led_rings", tuple(self.led_rings))

    @property
    def pupil_radius_px(self) -> float:
        return self.na * self.grid_n * self.dx / self.wavelength

    @property
    def block(self) -> int:
        """Side length of the sensor integration block in grid pixels."""
        return self.grid_n // self.sensor_n

    @property
    def n_leds(self) -> int:
        return sum(ring.count for ring in self.led_rings)


def build_led_array(config: MicroscopeConfig) -> list[Led]:
    """Enumerate LEDs ring by ring, ascending azimuth within each ring.

    The spectrum shift of an LED at polar angle theta and azimuth phi is
    ``round(grid_n * dx * sin(theta) * (cos(phi), sin(phi)) / wavelength)``
    frequency pixels.  An LED is bright-field iff sin(theta) <= na.
    """
    leds: list[Led] = []
    k_scale = config.grid_n * config.dx / config.wavelength
    for ring_idx, ring in enumerate(config.led_rings):
        sin_t = math.sin(math.radians(ring.polar_angle_deg))
        kind = FieldKind.BRIGHT_FIELD if sin_t <= config.na else FieldKind.DARK_FIELD
        for j in range(ring.count):
            phi_deg = ring.azimuth_offset_deg + 360.0 * j / ring.count
            phi = math.radians(phi_deg)
            sx = round(k_scale * sin_t * math.cos(phi))
            sy = round(k_scale * sin_t * math.sin(phi))
            leds.append(
                Led(
                    index=len(leds),
                    ring=ring_idx,
                    polar_deg=ring.polar_angle_deg,
                    azimuth_deg=phi_deg % 360.0,
                    shift_px=(int(sx), int(sy)),
                    field_kind=kind,
                )
            )
    return leds


def pupil_support(config: MicroscopeConfig) -> np.ndarray:
    """Boolean disk of radius ``pupil_radius_px`` on the centered frequency grid."""
    n = config.grid_n
    ax = np.arange(n) - n // 2
    ky, kx = np.meshgrid(ax, ax, indexing="ij")
    return (kx * kx + ky * ky) <= config.pupil_radius_px**2


@dataclass
class PhysicalParams:
    """Trainable physical layer: signed LED weights and amplitude pupil mask.

    ``led_weights`` lie in [-1, 1]; ``pupil`` lies in [0, 1] on the support
    disk and is exactly zero outside it.
    """

    led_weights: np.ndarray
    pupil: np.ndarray
    pupil_support: np.ndarray

    def validate(self):
        if self.led_weights.ndim != 1:
            raise DimensionError("led_weights must be a vector")
        if self.pupil.shape != self.pupil_support.shape:
            raise DimensionError("pupil and pupil_support shapes differ")
        if np.any(self.led_weights < -1) or np.any(self.led_weights > 1):
            raise ValidationError("led_weights outside [-1, 1]")
        if np.any(self.pupil < 0) or np.any(self.pupil > 1):
            raise ValidationError("pupil outside [0, 1]")
        if np.any(self.pupil[~self.pupil_support] != 0):
            raise ValidationError("pupil nonzero outside support")

    def copy(self) -> "PhysicalParams":
        return PhysicalParams(
            led_weights=self.led_weights.copy(),
            pupil=self.pupil.copy(),
            pupil_support=self.pupil_support.copy(),
        )


# -- transforms ---------------------------------------------------------------


def _check_square_pow2(a: np.ndarray):
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"expected square trailing axes, got shape {a.shape}")
    if not _is_pow2(a.shape[-1]):
        raise UnsupportedSizeError(f"grid side {a.shape[-1]} is not a power of two")


def _fft2c(a: np.ndarray) -> np.ndarray:
    """Unitary centered 2D FFT over the trailing two axes."""
    x = _sfft.ifftshift(a, axes=(-2, -1))
    x = _sfft.fft2(x, axes=(-2, -1), norm="ortho", workers=_FFT_WORKERS)
    return _sfft.fftshift(x, axes=(-2, -1))


def _ifft2c(a: np.ndarray) -> np.ndarray:
    """Unitary centered 2D inverse FFT over the trailing two axes."""
    x = _sfft.ifftshift(a, axes=(-2, -1))
    x = _sfft.ifft2(x, axes=(-2, -1), norm="ortho", workers=_FFT_WORKERS)
    return _sfft.fftshift(x, axes=(-2, -1))


def fft2(f: ComplexField) -> ComplexField:
    """Forward transform; maps an object-plane field to its centered spectrum."""
    _check_square_pow2(f.data)
    return ComplexField(_fft2c(f.data), Plane.FOURIER, validate=False)


def ifft2(F: ComplexField) -> ComplexField:
    """Inverse transform; exact inverse of :func:`fft2` to rounding error."""
    _check_square_pow2(F.data)
    return ComplexField(_ifft2c(F.data), Plane.OBJECT, validate=False)


def shift_spectrum(spectrum: np.ndarray, shift_px: tuple[int, int]) -> np.ndarray:
    """Circularly shift a centered spectrum by ``-shift_px``.

    The frequency bin at ``shift_px`` (x, y) relative to DC moves to the DC
    position, i.e. the returned array is the spectrum seen through a pupil
    centered on that illumination angle.
    """
    sx, sy = shift_px
    return np.roll(spectrum, shift=(-sy, -sx), axis=(-2, -1))


def coherent_intensity(
    spectrum: ComplexField | np.ndarray,
    pupil: np.ndarray,
    shift_px: tuple[int, int],
) -> np.ndarray:
    """Intensity image formed by a single LED: |ifft2(shifted spectrum * pupil)|^2."""
    s = spectrum.data if isinstance(spectrum, ComplexField) else spectrum
    if s.shape != pupil.shape:
        raise DimensionError(f"spectrum {s.shape} vs pupil {pupil.shape}")
    g = _ifft2c(shift_spectrum(s, shift_px) * pupil)
    return g.real**2 + g.imag**2


def downsample_to_sensor(field: np.ndarray, sensor_n: int) -> np.ndarray:
    """Block-mean integration onto the sensor grid.

    Each sensor pixel is the mean of its (grid_n / sensor_n)^2 block, so
    sum(out) * block_area == sum(in).
    """
    n = field.shape[-1]
    if field.shape[-2] != n:
        raise DimensionError(f"field must be square, got {field.shape}")
    if sensor_n < 1 or n % sensor_n != 0:
        raise DimensionError(f"sensor_n {sensor_n} does not divide grid {n}")
    b = n // sensor_n
    lead = field.shape[:-2]
    blocks = field.reshape(*lead, sensor_n, b, sensor_n, b)
    return blocks.mean(axis=(-3, -1))


def upsample_adjoint(image: np.ndarray, grid_n: int) -> np.ndarray:
    """Exact adjoint of :func:`downsample_to_sensor`.

    Spreads each sensor-pixel value uniformly over its source block divided
    by the block size.
    """
    s = image.shape[-1]
    if image.shape[-2] != s:
        raise DimensionError(f"image must be square, got {image.shape}")
    if grid_n % s != 0:
        raise DimensionError(f"grid {grid_n} not divisible by sensor {s}")
    b = grid_n // s
    out = np.repeat(np.repeat(image, b, axis=-2), b, axis=-1)
    return out / (b * b)


def add_detector_noise(image: np.ndarray, sigma_frac: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise with std = sigma_frac * max(image).

    The noise scale is relative to the per-capture maximum, so a zero image
    stays exactly zero.  ``sigma_frac == 0`` returns the input unchanged and
    draws nothing from ``rng``.
    """
    if sigma_frac < 0:
        raise ValidationError(f"sigma_frac must be >= 0, got {sigma_frac}")
    if sigma_frac == 0:
        return image
    scale = sigma_frac * max(float(image.max()), 0.0)
    noise = rng.standard_normal(image.shape)
    return image + scale * noise.astype(image.dtype, copy=False)


def capture_from_intensities(
    intensities: np.ndarray,
    weights: np.ndarray,
    sigma_frac: float,
    rng: np.random.Generator,
    split_captures: bool = True,
) -> np.ndarray:
    """Combine per-LED sensor intensities into one signed capture.

    With ``split_captures`` the positive- and negative-weight sums are noised
    independently and subtracted, modeling two physical exposures; otherwise
    a single signed sum receives one noise draw.
    """
    w = np.asarray(weights, dtype=intensities.dtype)
    if w.shape[0] != intensities.shape[0]:
        raise DimensionError(
            f"{w.shape[0]} weights vs {intensities.shape[0]} LED intensities"
        )
    flat = intensities.reshape(w.shape[0], -1)
    if split_captures:
        pos = (np.where(w > 0, w, 0) @ flat).reshape(intensities.shape[1:])
        neg = (np.where(w < 0, -w, 0) @ flat).reshape(intensities.shape[1:])
        pos = add_detector_noise(pos, sigma_frac, rng)
        neg = add_detector_noise(neg, sigma_frac, rng)
        return pos - neg
    signed = (w @ flat).reshape(intensities.shape[1:])
    return add_detector_noise(signed, sigma_frac, rng)


def forward_capture(
    obj: ComplexField,
    params: PhysicalParams,
    config: MicroscopeConfig,
    noise_sigma_frac: float,
    rng: np.random.Generator,
    leds: list[Led] | None = None,
    split_captures: bool = True,
) -> np.ndarray:
    """Simulate one detector capture of ``obj`` under the current physical layer.

    Per LED the shifted spectrum is filtered by the pupil, back-transformed,
    squared, and block-averaged onto the sensor; LED images then combine per
    :func:`capture_from_intensities`.
    """
    if obj.plane is not Plane.OBJECT:
        raise ValidationError("forward_capture expects an object-plane field")
    if not np.all(np.isfinite(obj.data)):
        raise ValidationError("object contains non-finite values")
    if obj.data.shape[0] != config.grid_n:
        raise DimensionError(
            f"object grid {obj.data.shape[0]} != config grid_n {config.grid_n}"
        )
    if leds is None:
        leds = build_led_array(config)
    if len(leds) != params.led_weights.shape[0]:
        raise DimensionError(
            f"{len(leds)} LEDs vs {params.led_weights.shape[0]} weights"
        )
    spectrum = _fft2c(obj.data)
    real_dtype = np.real(spectrum).dtype
    intensities = np.zeros((len(leds), config.sensor_n, config.sensor_n), real_dtype)
    for i, led in enumerate(leds):
        if params.led_weights[i] == 0:
            continue  # zero-weight LEDs contribute nothing to either capture
        full = coherent_intensity(spectrum, params.pupil, led.shift_px)
        intensities[i] = downsample_to_sensor(full, config.sensor_n)
    return capture_from_intensities(
        intensities, params.led_weights, noise_sigma_frac, rng, split_captures
    )
