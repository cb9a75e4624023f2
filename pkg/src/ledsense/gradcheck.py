"""Finite-difference certification of the physical-layer gradients.

Runs on small random instances (16x16 grid, 5 LEDs) in float64: the two
parameter-group gradients against central differences, plus the full chain
through the CNN per LED weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradients import finite_difference_check, grad_wrt_pupil, grad_wrt_weights
from .nn import init_params
from .optics import (
    ComplexField,
    LedRing,
    MicroscopeConfig,
    PhysicalParams,
    Plane,
    _fft2c,
    build_led_array,
    forward_capture,
    pupil_support,
)

WEIGHT_TOL = 1e-4
PUPIL_TOL = 1e-4
CHAIN_TOL = 1e-3


@dataclass
class CheckRow:
    group: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def micro_config(grid_n: int = 16, sensor_n: int = 8) -> MicroscopeConfig:
    """Tiny geometry whose pupil fits the decimation window (radius 3 px)."""
    wavelength = 520e-9
    na = 0.25
    dx = 3.0 * wavelength / (na * grid_n)  # pupil radius exactly 3 px
    return MicroscopeConfig(
        wavelength=wavelength,
        na=na,
        grid_n=grid_n,
        dx=dx,
        sensor_n=sensor_n,
        led_rings=(LedRing(0.0, 1), LedRing(20.0, 4)),
    )


def random_instance(rng: np.random.Generator, config: MicroscopeConfig):
    """Random complex object, feasible physical params, random upstream."""
    n = config.grid_n
    obj = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    obj = ComplexField(obj / np.abs(obj).max(), Plane.OBJECT)
    support = pupil_support(config)
    pupil = np.where(support, rng.uniform(0.2, 1.0, (n, n)), 0.0)
    weights = rng.uniform(-1, 1, config.n_leds)
    params = PhysicalParams(led_weights=weights, pupil=pupil, pupil_support=support)
    upstream = rng.standard_normal((config.sensor_n, config.sensor_n))
    return obj, params, upstream


def run_gradcheck(
    n_instances: int = 20,
    seed: int = 0,
    fault_scale: float = 1.0,
    include_chain: bool = True,
    n_pupil_coords: int = 10,
) -> list[CheckRow]:
    """Certify both parameter groups (and optionally the CNN chain).

    ``fault_scale`` multiplies the analytic gradients before comparison; it
    exists so that a deliberately broken gradient is seen to fail.
    """
    config = micro_config()
    leds = build_led_array(config)
    rng = np.random.default_rng(seed)
    no_noise = np.random.default_rng(0)

    worst_w = 0.0
    worst_p = 0.0
    for _ in range(n_instances):
        obj, params, upstream = random_instance(rng, config)
        spectrum = _fft2c(obj.data)

        def loss_of_weights(w):
            p = PhysicalParams(w, params.pupil, params.pupil_support)
            cap = forward_capture(obj, p, config, 0.0, no_noise, leds=leds)
            return float(np.sum(upstream * cap))

        analytic_w = grad_wrt_weights(spectrum, params.pupil, leds, upstream) * fault_scale
        worst_w = max(
            worst_w,
            finite_difference_check(loss_of_weights, params.led_weights, analytic_w, 1e-4),
        )

        def loss_of_pupil(pflat):
            p = PhysicalParams(params.led_weights, pflat.reshape(params.pupil.shape),
                               params.pupil_support)
            cap = forward_capture(obj, p, config, 0.0, no_noise, leds=leds)
            return float(np.sum(upstream * cap))

        analytic_p = grad_wrt_pupil(spectrum, params, leds, upstream) * fault_scale
        support_coords = np.flatnonzero(params.pupil_support.ravel())
        coords = rng.choice(support_coords, size=n_pupil_coords, replace=False)
        worst_p = max(
            worst_p,
            finite_difference_check(
                loss_of_pupil, params.pupil.ravel(), analytic_p.ravel(), 1e-4, coords=coords
            ),
        )

    rows = [
        CheckRow("led_weights", n_instances, worst_w, WEIGHT_TOL),
        CheckRow("pupil", n_instances, worst_p, PUPIL_TOL),
    ]
    if include_chain:
        rows.append(
            CheckRow("chain_led_weights", 1, chain_check(seed, fault_scale), CHAIN_TOL)
        )
    return rows


def chain_check(seed: int = 0, fault_scale: float = 1.0) -> float:
    """End-to-end d(loss)/d(weight) vs central differences through the CNN."""
    config = micro_config()
    leds = build_led_array(config)
    rng = np.random.default_rng(seed + 1)
    obj, params, _ = random_instance(rng, config)
    model = init_params(seed, sensor_n=config.sensor_n, dtype=np.float64)
    label = 1
    no_noise = np.random.default_rng(0)

    def loss_of_weights(w):
        p = PhysicalParams(w, params.pupil, params.pupil_support)
        cap = forward_capture(obj, p, config, 0.0, no_noise, leds=leds)
        probs = model.forward_batch(cap[None])[0]
        return float(-np.log(probs[label]))

    cap = forward_capture(obj, params, config, 0.0, no_noise, leds=leds)
    model.zero_grad()
    _, input_grad = model.backward_batch(cap[None], np.array([label]))
    spectrum = _fft2c(obj.data)
    analytic = grad_wrt_weights(spectrum, params.pupil, leds, input_grad[0]) * fault_scale
    return finite_difference_check(loss_of_weights, params.led_weights, analytic, 1e-4)
