"""Exponential sine sweep generation and sweep deconvolution."""
from __future__ import annotations

import numpy as np
from scipy import fft as spfft
from scipy import signal as sps

from .audio import SAMPLE_RATE, Waveform


def ess_rate(f1: float, f2: float, duration: float) -> float:
    """Time constant L of the sweep: instantaneous frequency is f1 * exp(t / L)."""
    return duration / np.log(f2 / f1)


def generate_ess(f1: float, f2: float, duration: float, rate: int = SAMPLE_RATE,
                 fade: float = 0.01) -> tuple[Waveform, Waveform]:
    """Exponential sine sweep from ``f1`` to ``f2`` Hz and its inverse filter.

    The inverse filter is the time-reversed sweep with a +6 dB/octave
    amplitude envelope, scaled so that ``sweep * inverse`` has unit gain
    across the swept band. Short raised-cosine fades (``fade`` seconds)
    limit the ringing caused by switching the sweep on and off.
    """
    if not 0 < f1 < f2 < rate / 2:
        raise ValueError(f"need 0 < f1 < f2 < rate/2, got f1={f1}, f2={f2}, rate={rate}")
    n = int(round(duration * rate))
    if n < 2:
        raise ValueError("sweep duration too short")
    t = np.arange(n) / rate
    L = ess_rate(f1, f2, duration)
    sweep = np.sin(2 * np.pi * f1 * L * (np.exp(t / L) - 1.0))

    n_fade = min(int(round(fade * rate)), n // 4)
    if n_fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_fade) / n_fade)
        sweep[:n_fade] *= ramp
        sweep[n - n_fade :] *= ramp[::-1]

    inverse = sweep[::-1] * np.exp(-t / L)

    # unit gain over the central part of the band
    nfft = spfft.next_fast_len(2 * n)
    H = np.abs(np.fft.rfft(sweep, nfft) * np.fft.rfft(inverse, nfft))
    freqs = np.fft.rfftfreq(nfft, 1 / rate)
    band = (freqs >= 2 * f1) & (freqs <= f2 / 2)
    inverse /= np.median(H[band])
    return Waveform(sweep, rate), Waveform(inverse, rate)


def deconvolve_sweep(recording: Waveform, inverse_filter: Waveform, length: int | None = None) -> Waveform:
    """Linear impulse response from a recorded sweep.

    The recording is convolved with the inverse filter; lag zero sits at
    ``len(inverse_filter) - 1``. Harmonic distortion products land at
    negative lags and are discarded; the ``length`` taps from lag zero are
    returned (default: recording length minus sweep length plus one).
    """
    if len(recording) == 0 or len(inverse_filter) == 0:
        raise ValueError("empty recording or inverse filter")
    if recording.rate != inverse_filter.rate:
        raise ValueError("recording and inverse filter sample rates differ")
    zero_lag = len(inverse_filter) - 1
    if length is None:
        length = max(len(recording) - len(inverse_filter) + 1, 1)
    full = sps.fftconvolve(recording.samples, inverse_filter.samples)
    taps = full[zero_lag : zero_lag + length]
    if taps.size < length:
        taps = np.pad(taps, (0, length - taps.size))
    return Waveform(taps, recording.rate)


def peak_to_sidelobe_db(pulse: np.ndarray, guard: int) -> float:
    """Peak magnitude over the largest magnitude farther than ``guard`` samples away."""
    mag = np.abs(pulse)
    peak = int(np.argmax(mag))
    outside = np.concatenate([mag[: max(peak - guard, 0)], mag[peak + guard + 1 :]])
    return float(20 * np.log10(mag[peak] / outside.max()))


def normalized_correlation(a: np.ndarray, b: np.ndarray) -> float:
    n = min(a.size, b.size)
    a, b = a[:n], b[:n]
    return float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))
