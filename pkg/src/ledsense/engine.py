"""Batched capture engine used by the training loop.

The pupil has small frequency support (diameter 2*floor(R)+1 pixels), so the
block-averaged sensor intensity per LED can be computed on the sensor lattice
through a decimation identity instead of full-grid transforms: for block
factor b and window size w = grid_n / b,

    blockmean_b(|ifft2(S)|^2) = (1/b^4) * sum_{a,d in [0,b)} |ifft_w(S_win * E_ad)|^2

where S_win is the central w x w window of the (shifted, pupil-masked)
spectrum and E_ad are the sub-pixel phase ramps exp(2i pi (a kx + d ky) / n).
The identity is exact whenever the pupil support fits inside the window; the
engine verifies this and otherwise falls back to the reference full-grid
path.  Either way the results match :mod:`ledsense.optics` to rounding error
(certified by tests).

Instances are not thread-safe; use one engine per training run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft as _sfft

from .optics import (
    Led,
    MicroscopeConfig,
    PhysicalParams,
    _FFT_WORKERS,
    _fft2c,
    capture_from_intensities,
    coherent_intensity,
    downsample_to_sensor,
)
from . import gradients as _gradients

_LED_CHUNK = 6


@dataclass
class BatchAux:
    """Per-batch byproducts the backward pass needs."""

    spectra: np.ndarray | None = None  # (B, N, N); kept only on the fallback path
    led_idx: np.ndarray | None = None  # LEDs covered by led_intensities
    led_intensities: np.ndarray | None = None  # (B, len(led_idx), s, s)
    pupil_led_idx: np.ndarray | None = None  # LEDs covered by windows
    windows: np.ndarray | None = None  # (B, len(pupil_led_idx), w, w) raw spectra


class CaptureEngine:
    def __init__(
        self,
        config: MicroscopeConfig,
        leds: list[Led],
        dtype=np.complex64,
        cache_samples: int = 0,
        cache_budget_bytes: float = 3e9,
    ):
        self.config = config
        self.leds = leds
        self.cdtype = np.dtype(dtype)
        self.rdtype = np.dtype(np.float32 if self.cdtype == np.complex64 else np.float64)
        n, s, b = config.grid_n, config.sensor_n, config.block
        self.n, self.s, self.b = n, s, b
        support_width = 2 * math.floor(config.pupil_radius_px) + 1
        self.fast = support_width <= s
        if self.fast:
            centered = np.arange(-(s // 2), s - s // 2)
            base = _sfft.ifftshift(centered) + n // 2
            self._row_idx = np.stack([(base + led.shift_px[1]) % n for led in leds])
            self._col_idx = np.stack([(base + led.shift_px[0]) % n for led in leds])
            k_u = _sfft.ifftshift(centered).astype(float)
            ramps = [np.exp(2j * np.pi * a * k_u / n).astype(self.cdtype) for a in range(b)]
            self.E = np.stack([ry[:, None] * rx[None, :] for ry in ramps for rx in ramps])
            self.Ec = self.E.conj().copy()
            self._buf = np.empty((_LED_CHUNK, b * b, s, s), self.cdtype)

        # optional per-sample LED intensity cache (fixed-pupil regimes only)
        self._cache = None
        self._cache_leds: np.ndarray | None = None
        self._n_cache_samples = cache_samples
        self._cache_budget = cache_budget_bytes

    def enable_cache(self, led_idx: np.ndarray) -> bool:
        """Cache per-sample sensor intensities for the given LEDs, budget allowing."""
        led_idx = np.asarray(led_idx, dtype=int)
        est = self._n_cache_samples * led_idx.size * self.s * self.s * 4
        if self._n_cache_samples == 0 or est > self._cache_budget:
            self._cache = None
            return False
        self._cache = np.empty((self._n_cache_samples, led_idx.size, self.s, self.s), self.rdtype)
        self._cache_valid = np.zeros(self._n_cache_samples, bool)
        self._cache_leds = led_idx
        return True

    # -- spectra and windows ----------------------------------------------

    def spectra(self, objects: np.ndarray) -> np.ndarray:
        """Centered spectra of a (B, N, N) object stack."""
        return _fft2c(np.ascontiguousarray(objects, dtype=self.cdtype))

    def windows(self, spectrum: np.ndarray, led_idx: np.ndarray) -> np.ndarray:
        """Central windows of the per-LED shifted spectra, unshifted layout."""
        return np.stack(
            [spectrum[np.ix_(self._row_idx[i], self._col_idx[i])] for i in led_idx]
        )

    def pupil_window(self, pupil: np.ndarray) -> np.ndarray:
        """Pupil restricted to the central window, unshifted layout."""
        n, s = self.n, self.s
        c0 = n // 2 - s // 2
        return _sfft.ifftshift(pupil[c0 : c0 + s, c0 : c0 + s]).astype(self.rdtype)

    def embed_window(self, win_u: np.ndarray) -> np.ndarray:
        """Place an unshifted window array back on the centered full grid."""
        n, s = self.n, self.s
        c0 = n // 2 - s // 2
        out = np.zeros((n, n), win_u.dtype)
        out[c0 : c0 + s, c0 : c0 + s] = _sfft.fftshift(win_u)
        return out

    # -- forward --------------------------------------------------------------

    def _intensities_from_products(self, prods: np.ndarray) -> np.ndarray:
        """(k, w, w) masked spectrum windows -> (k, s, s) centered intensities."""
        k, s, b = prods.shape[0], self.s, self.b
        out = np.empty((k, s, s), self.rdtype)
        for c0 in range(0, k, _LED_CHUNK):
            c1 = min(c0 + _LED_CHUNK, k)
            buf = self._buf[: c1 - c0]
            np.multiply(prods[c0:c1, None], self.E[None], out=buf)
            g = _sfft.ifft2(buf, axes=(-2, -1), norm="ortho",
                            workers=_FFT_WORKERS, overwrite_x=True)
            out[c0:c1] = np.add.reduce(g.real**2 + g.imag**2, axis=1)
        out *= 1.0 / float(b) ** 4
        return _sfft.fftshift(out, axes=(-2, -1))

    def _intensities_reference(self, spectrum, pupil, led_idx) -> np.ndarray:
        out = np.empty((led_idx.size, self.s, self.s), self.rdtype)
        for j, i in enumerate(led_idx):
            full = coherent_intensity(spectrum, pupil, self.leds[i].shift_px)
            out[j] = downsample_to_sensor(full, self.s)
        return out

    def forward_batch(
        self,
        objects: np.ndarray | None,
        params: PhysicalParams,
        sigma_frac: float,
        rng: np.random.Generator,
        need_weight_grads: bool = False,
        need_pupil_grads: bool = False,
        sample_indices: np.ndarray | None = None,
        spectra: np.ndarray | None = None,
    ) -> tuple[np.ndarray, BatchAux]:
        """Sensor captures for a batch, plus whatever the backward pass needs.

        LEDs with exactly zero weight are skipped unless weight gradients are
        requested.  ``sample_indices`` keys the intensity cache; the cache is
        bypassed automatically while the pupil is being trained.
        """
        if objects is None and spectra is None and self._cache is None:
            raise ValueError("need objects or spectra")
        B = len(sample_indices) if sample_indices is not None else (
            objects.shape[0] if objects is not None else spectra.shape[0]
        )
        weights = np.asarray(params.led_weights)
        nonzero = np.flatnonzero(weights != 0)
        led_idx = np.arange(len(self.leds)) if need_weight_grads else nonzero
        aux = BatchAux(led_idx=led_idx, pupil_led_idx=nonzero)
        captures = np.empty((B, self.s, self.s), self.rdtype)

        use_cache = (
            self._cache is not None
            and sample_indices is not None
            and not need_pupil_grads
            and np.array_equal(led_idx, self._cache_leds)
        )
        pupil_win_u = self.pupil_window(params.pupil) if self.fast else None
        if need_pupil_grads and self.fast:
            aux.windows = np.empty((B, nonzero.size, self.s, self.s), self.cdtype)
            sel = np.searchsorted(led_idx, nonzero)
        if need_weight_grads:
            aux.led_intensities = np.empty((B, led_idx.size, self.s, self.s), self.rdtype)

        for bi in range(B):
            intens = None
            if use_cache:
                si = sample_indices[bi]
                if self._cache_valid[si]:
                    intens = self._cache[si]
            if intens is None:
                if spectra is None:
                    spectra = self.spectra(objects)
                if self.fast:
                    raw = self.windows(spectra[bi], led_idx)
                    intens = self._intensities_from_products(raw * pupil_win_u)
                    if need_pupil_grads:
                        aux.windows[bi] = raw[sel]
                else:
                    intens = self._intensities_reference(spectra[bi], params.pupil, led_idx)
                if use_cache:
                    si = sample_indices[bi]
                    self._cache[si] = intens
                    self._cache_valid[si] = True
            if need_weight_grads:
                aux.led_intensities[bi] = intens
            captures[bi] = capture_from_intensities(
                intens, weights[led_idx], sigma_frac, rng
            )
        if need_pupil_grads and not self.fast:
            aux.spectra = spectra
        return captures, aux

    # -- backward -------------------------------------------------------------

    def weight_grads(self, aux: BatchAux, upstream: np.ndarray) -> np.ndarray:
        """Sum over the batch of <upstream_b, intensity_{b,i}> per LED."""
        if aux.led_intensities is None:
            raise ValueError("forward_batch was not asked for weight gradients")
        return np.einsum(
            "bnij,bij->n", aux.led_intensities, upstream, dtype=np.float64
        )

    def pupil_grad(
        self,
        aux: BatchAux,
        upstream: np.ndarray,
        params: PhysicalParams,
    ) -> np.ndarray:
        """Batch-summed d(loss)/d(pupil) on the full centered grid."""
        if not self.fast:
            acc = np.zeros_like(params.pupil)
            for bi in range(upstream.shape[0]):
                acc += _gradients.grad_wrt_pupil(
                    aux.spectra[bi], params, self.leds, upstream[bi]
                )
            return acc
        if aux.windows is None:
            raise ValueError("forward_batch was not asked for pupil gradients")
        b = self.b
        w_sel = np.asarray(params.led_weights)[aux.pupil_led_idx]
        pupil_win_u = self.pupil_window(params.pupil)
        acc_win = np.zeros((self.s, self.s), np.float64)
        scale = 2.0 / float(b) ** 4
        for bi in range(upstream.shape[0]):
            u_nat = _sfft.ifftshift(upstream[bi]).astype(self.rdtype)
            raws = aux.windows[bi]
            for c0 in range(0, raws.shape[0], _LED_CHUNK):
                c1 = min(c0 + _LED_CHUNK, raws.shape[0])
                m = c1 - c0
                buf = self._buf[:m]
                np.multiply((raws[c0:c1] * pupil_win_u)[:, None], self.E[None], out=buf)
                g = _sfft.ifft2(buf, axes=(-2, -1), norm="ortho",
                                workers=_FFT_WORKERS, overwrite_x=True)
                np.multiply(g, u_nat[None, None], out=g)
                t = _sfft.fft2(g, axes=(-2, -1), norm="ortho",
                               workers=_FFT_WORKERS, overwrite_x=True)
                # sum_p E_p * conj(T_p) = conj(q) with q = sum_p conj(E_p) T_p,
                # and Re(raw * conj(q)) = raw.re q.re + raw.im q.im
                np.multiply(t, self.Ec[None], out=t)
                q = t.sum(axis=1)
                raw = raws[c0:c1]
                re_part = raw.real * q.real + raw.imag * q.imag
                acc_win += scale * np.einsum("n,nij->ij", w_sel[c0:c1], re_part)
        grad = self.embed_window(acc_win)
        grad[~params.pupil_support] = 0.0
        return grad
