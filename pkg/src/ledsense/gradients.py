"""Analytic adjoints of the physical layer, plus a finite-difference checker.

The capture is linear in the LED weights and quadratic in the pupil, so both
gradients have closed forms; the finite-difference checker certifies them on
small instances rather than relying on an autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, ValidationError
from .optics import (
    ComplexField,
    Led,
    PhysicalParams,
    _fft2c,
    _ifft2c,
    coherent_intensity,
    downsample_to_sensor,
    shift_spectrum,
    upsample_adjoint,
)


@dataclass
class PhysicalGradients:
    """Loss gradients for the physical layer; d_pupil is zero off support."""

    d_weights: np.ndarray
    d_pupil: np.ndarray


def _as_array(spectrum) -> np.ndarray:
    return spectrum.data if isinstance(spectrum, ComplexField) else spectrum


def grad_wrt_weights(
    object_spectrum: ComplexField | np.ndarray,
    pupil: np.ndarray,
    leds: Sequence[Led],
    upstream: np.ndarray,
) -> np.ndarray:
    """d(loss)/d(weight_i) = <upstream, downsampled LED intensity_i>.

    Because the capture is linear in the weights, the result is independent
    of the current weight values.
    """
    if len(leds) == 0:
        raise ValidationError("LED list is empty")
    spec = _as_array(object_spectrum)
    sensor_n = upstream.shape[-1]
    out = np.empty(len(leds), dtype=upstream.dtype)
    for i, led in enumerate(leds):
        intensity = coherent_intensity(spec, pupil, led.shift_px)
        out[i] = np.vdot(upstream, downsample_to_sensor(intensity, sensor_n))
    return out


def grad_wrt_pupil(
    object_spectrum: ComplexField | np.ndarray,
    params: PhysicalParams,
    leds: Sequence[Led],
    upstream: np.ndarray,
) -> np.ndarray:
    """Chain rule through |ifft2(shifted spectrum * pupil)|^2 for each LED.

    Returns sum_i w_i * 2 Re{conj(S_i) * fft2(u * g_i)} masked to the pupil
    support, where S_i is the shifted spectrum, g_i the coherent field and
    u the upsampling adjoint of ``upstream``.
    """
    spec = _as_array(object_spectrum)
    if spec.shape != params.pupil.shape:
        raise DimensionError(f"spectrum {spec.shape} vs pupil {params.pupil.shape}")
    grid_n = spec.shape[0]
    u = upsample_adjoint(upstream, grid_n)
    acc = np.zeros_like(params.pupil)
    for i, led in enumerate(leds):
        w = params.led_weights[i]
        if w == 0:
            continue
        s_i = shift_spectrum(spec, led.shift_px)
        g_i = _ifft2c(s_i * params.pupil)
        t_i = _fft2c(u * g_i)
        acc += w * 2.0 * (s_i.conj() * t_i).real
    acc[~params.pupil_support] = 0.0
    return acc


def physical_gradients(
    object_spectrum: ComplexField | np.ndarray,
    params: PhysicalParams,
    leds: Sequence[Led],
    upstream: np.ndarray,
) -> PhysicalGradients:
    """Both parameter-group gradients for one sample."""
    return PhysicalGradients(
        d_weights=grad_wrt_weights(object_spectrum, params.pupil, leds, upstream),
        d_pupil=grad_wrt_pupil(object_spectrum, params, leds, upstream),
    )


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    eps: float,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between central differences of ``f`` and ``analytic``.

    ``coords`` restricts the check to a subset of flat coordinates (all by
    default).  Relative error per coordinate uses max(|analytic_i|, 1e-12)
    as denominator.
    """
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    if x.shape != analytic.shape:
        raise DimensionError(f"x {x.shape} vs analytic {analytic.shape}")
    flat_idx = range(x.size) if coords is None else coords
    worst = 0.0
    for i in flat_idx:
        xp = x.copy()
        xp.flat[i] += eps
        fp = float(f(xp))
        xm = x.copy()
        xm.flat[i] -= eps
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValidationError(f"f returned a non-finite value at coordinate {i}")
        cd = (fp - fm) / (2 * eps)
        rel = abs(cd - analytic.flat[i]) / max(abs(analytic.flat[i]), 1e-12)
        worst = max(worst, rel)
    return worst
