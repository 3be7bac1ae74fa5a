"""Waveform container, STFT/iSTFT, RMS scaling, convolution and WAV I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be mono (1-D), got shape {samples.shape}")
        if self.rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains NaN or Inf")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.rate

    def rms_dbfs(self) -> float:
        return rms_dbfs(self.samples)


@dataclass(frozen=True)
class StftConfig:
    """Framing parameters. Times are in seconds, ``fft_size`` in samples."""

    frame_len: float = 0.032
    hop: float = 0.016
    fft_size: int = 512
    window: str = "hann"
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")
        if not 0 < self.hop <= self.frame_len:
            raise ValueError("need 0 < hop <= frame_len")
        if self.fft_size < self.win_samples:
            raise ValueError("fft_size must cover the frame length")

    @property
    def win_samples(self) -> int:
        return int(round(self.frame_len * self.rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop * self.rate))

    @property
    def n_freq(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop_samples + 1

    def window_array(self) -> np.ndarray:
        win = sps.get_window("hann", self.win_samples, fftbins=True)
        # zero-pad the window to fft_size, centered (same convention as torch.stft)
        left = (self.fft_size - self.win_samples) // 2
        out = np.zeros(self.fft_size)
        out[left : left + self.win_samples] = win
        return out

    @classmethod
    def from_samples(cls, win: int, hop: int, fft_size: int | None = None, rate: int = SAMPLE_RATE):
        return cls(frame_len=win / rate, hop=hop / rate, fft_size=fft_size or win, rate=rate)


@dataclass(frozen=True)
class ComplexSpectrogram:
    values: np.ndarray  # complex, (T, F)
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[1] != self.config.n_freq:
            raise ValueError(
                f"expected (T, {self.config.n_freq}) spectrogram, got {values.shape}"
            )
        object.__setattr__(self, "values", values.astype(np.complex128))

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag

    @property
    def shape(self):
        return self.values.shape


def stft(w: Waveform, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    """Center-padded (reflect) Hann STFT; returns T x F with T = L // hop + 1."""
    cfg = cfg or StftConfig(rate=w.rate)
    if w.rate != cfg.rate:
        raise ValueError(f"rate mismatch: waveform {w.rate} vs config {cfg.rate}")
    x = w.samples
    if x.size == 0:
        raise ValueError("cannot take the STFT of an empty waveform")
    pad = cfg.fft_size // 2
    if x.size <= pad:
        raise ValueError(f"waveform too short for reflect padding ({x.size} <= {pad})")
    xp = np.pad(x, pad, mode="reflect")
    hop = cfg.hop_samples
    n_frames = cfg.n_frames(x.size)
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.fft_size)[::hop][:n_frames]
    spec = np.fft.rfft(frames * cfg.window_array(), axis=-1)
    return ComplexSpectrogram(spec, cfg)


def _window_envelope(cfg: StftConfig, n_frames: int) -> np.ndarray:
    win_sq = cfg.window_array() ** 2
    hop = cfg.hop_samples
    env = np.zeros(cfg.fft_size + hop * (n_frames - 1))
    for t in range(n_frames):
        env[t * hop : t * hop + cfg.fft_size] += win_sq
    return env


def istft(S: ComplexSpectrogram, length: int | None = None) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Raises if the squared-window envelope vanishes anywhere inside the
    reconstructed span (the window/hop pair is not invertible).
    """
    cfg = S.config
    n_frames = S.shape[0]
    hop = cfg.hop_samples
    pad = cfg.fft_size // 2
    frames = np.fft.irfft(S.values, n=cfg.fft_size, axis=-1) * cfg.window_array()
    out = np.zeros(cfg.fft_size + hop * (n_frames - 1))
    for t in range(n_frames):
        out[t * hop : t * hop + cfg.fft_size] += frames[t]
    env = _window_envelope(cfg, n_frames)

    if length is None:
        length = hop * (n_frames - 1)
    span = slice(pad, pad + length)
    if out[span].size < length:
        raise ValueError(f"spectrogram with {n_frames} frames cannot produce {length} samples")
    if np.min(env[span]) < 1e-10:
        raise ValueError("window/hop combination violates the overlap-add condition")
    return Waveform(out[span] / env[span], cfg.rate)


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def rms_dbfs(x: np.ndarray, floor: float = 1e-12) -> float:
    return 20.0 * np.log10(max(rms(x), floor))


def scale_to_rms(w: Waveform, target_dbfs: float) -> Waveform:
    level = rms(w.samples)
    if level == 0.0:
        raise ValueError("cannot rescale an all-zero waveform")
    gain = 10.0 ** (target_dbfs / 20.0) / level
    return Waveform(w.samples * gain, w.rate)


def convolve(w: Waveform, h) -> Waveform:
    """Linear convolution with an impulse response, truncated to ``len(w)``.

    ``h`` may be a :class:`Waveform` or anything with ``taps`` and ``rate``
    attributes (e.g. an RIR record).
    """
    taps = np.asarray(getattr(h, "taps", getattr(h, "samples", None)), dtype=np.float64)
    if h.rate != w.rate:
        raise ValueError(f"rate mismatch: signal {w.rate} Hz vs filter {h.rate} Hz")
    y = sps.oaconvolve(w.samples, taps, mode="full")[: len(w)]
    return Waveform(y, w.rate)


def read_wav(path: str | Path) -> Waveform:
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, w: Waveform, pcm16: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = w.samples.astype(np.float32)
    wavfile.write(path, w.rate, data)
    return path
