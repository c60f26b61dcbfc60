"""Signal-processing primitives on the differentiation path.

Every operation that can sit between the perturbation and a loss works on
float64 torch tensors so gradients come from autograd. Operations accept an
``AudioClip`` or a tensor of shape ``(..., n_samples)`` and return the same kind.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np
import torch

from .audio_io import AudioClip
from .errors import DspError

DTYPE = torch.float64

PIPELINE_RATE = 16000
ENERGY_FLOOR = 1e-10

# one-third octave bands
N_BANDS = 15
LOWEST_CENTER_HZ = 150.0

Signal = Union[AudioClip, torch.Tensor]


def as_tensor(signal: Signal) -> torch.Tensor:
    if isinstance(signal, AudioClip):
        return torch.from_numpy(signal.samples).to(DTYPE)
    return signal


@dataclass(frozen=True)
class FeatureConfig:
    """Log-mel front-end: 25 ms / 10 ms Hann frames at 16 kHz."""
    rate: int = PIPELINE_RATE
    window: int = 400
    hop: int = 160
    nfft: int = 512
    n_mels: int = 40
    f_min: float = 20.0
    f_max: float = 7600.0
    energy_floor: float = ENERGY_FLOOR

    def __post_init__(self):
        if self.rate <= 0 or self.window < 2 or self.hop < 1 or self.n_mels < 1:
            raise DspError(f"invalid feature configuration: {self}")
        if self.nfft < self.window:
            raise DspError(f"nfft {self.nfft} is smaller than window {self.window}")
        if not 0 <= self.f_min < self.f_max <= self.rate / 2:
            raise DspError(f"invalid mel range [{self.f_min}, {self.f_max}] at {self.rate} Hz")

    def n_frames(self, n_samples: int) -> int:
        return frame_count(n_samples, self.window, self.hop)


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT values, shape ``(..., frames, nfft // 2 + 1)``."""
    values: torch.Tensor
    window: int
    hop: int
    nfft: int
    rate: int

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[-2])

    @property
    def n_bins(self) -> int:
        return int(self.values.shape[-1])

    def bin_frequency(self, b: int) -> float:
        return b * self.rate / self.nfft

    def power(self) -> torch.Tensor:
        return self.values.real ** 2 + self.values.imag ** 2


@dataclass(frozen=True)
class FeatureMap:
    """Real log-energies, shape ``(..., frames, mels)``."""
    values: torch.Tensor

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[-2])

    @property
    def n_bins(self) -> int:
        return int(self.values.shape[-1])


@dataclass(frozen=True)
class OctaveBandMatrix:
    weights: torch.Tensor              # (15, nfft // 2 + 1), 0/1
    center_frequencies: np.ndarray     # Hz, increasing


def frame_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        return 0
    return 1 + (n_samples - window) // hop


def hann_window(length: int) -> torch.Tensor:
    """Symmetric Hann window, zero at both ends."""
    if length < 2:
        raise DspError(f"window length must be at least 2, got {length}")
    return torch.hann_window(length, periodic=False, dtype=DTYPE)


def frames(x: torch.Tensor, window: int, hop: int) -> torch.Tensor:
    """Non-centered framing: ``(..., n) -> (..., M, window)``."""
    if x.shape[-1] < window:
        raise DspError(f"signal of {x.shape[-1]} samples is shorter than one window ({window})")
    return x.unfold(-1, window, hop)


def stft(
    signal: Signal,
    window: int = 400,
    hop: int = 160,
    nfft: int = 512,
    rate: int = PIPELINE_RATE,
) -> Spectrogram:
    """Hann-windowed STFT without center padding (frame m starts at m * hop)."""
    if nfft < window:
        raise DspError(f"nfft {nfft} is smaller than window {window}")
    if isinstance(signal, AudioClip):
        rate = signal.rate
    x = as_tensor(signal)
    values = torch.fft.rfft(frames(x, window, hop) * hann_window(window), n=nfft, dim=-1)
    return Spectrogram(values=values, window=window, hop=hop, nfft=nfft, rate=rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    nfft: int,
    rate: int,
    n_mels: int,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> torch.Tensor:
    """Triangular filters with centers equally spaced on the mel scale, ``(n_mels, B)``."""
    f_max = rate / 2 if f_max is None else f_max
    if not 0 <= f_min < f_max <= rate / 2:
        raise DspError(f"invalid frequency range [{f_min}, {f_max}] at {rate} Hz")
    if n_mels < 1:
        raise DspError(f"n_mels must be at least 1, got {n_mels}")
    return _mel_filterbank(nfft, rate, n_mels, float(f_min), float(f_max)).clone()


@lru_cache(maxsize=16)
def _mel_filterbank(nfft: int, rate: int, n_mels: int, f_min: float, f_max: float) -> torch.Tensor:
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(nfft // 2 + 1) * rate / nfft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return torch.from_numpy(weights).to(DTYPE)


def log_mel(x: torch.Tensor, config: FeatureConfig) -> torch.Tensor:
    """Tensor core of log_mel_features: ``(..., n) -> (..., M, n_mels)``."""
    spec = stft(x, config.window, config.hop, config.nfft, config.rate)
    fb = _mel_filterbank(config.nfft, config.rate, config.n_mels, config.f_min, config.f_max)
    energies = spec.power() @ fb.T
    return torch.log(torch.clamp(energies, min=config.energy_floor))


def log_mel_features(signal: Signal, config: FeatureConfig | None = None) -> FeatureMap:
    config = config or FeatureConfig()
    if isinstance(signal, AudioClip) and signal.rate != config.rate:
        raise DspError(f"clip rate {signal.rate} Hz does not match feature rate {config.rate} Hz")
    return FeatureMap(log_mel(as_tensor(signal), config))


def third_octave_matrix(nfft: int, rate: int) -> OctaveBandMatrix:
    """15 one-third octave bands, centers 150 * 2**(k/3) Hz, rectangular bin membership."""
    centers = LOWEST_CENTER_HZ * 2.0 ** (np.arange(N_BANDS) / 3.0)
    lower = centers * 2.0 ** (-1.0 / 6.0)
    upper = centers * 2.0 ** (1.0 / 6.0)
    if rate / 2 <= upper[-1]:
        raise DspError(f"rate {rate} Hz cannot hold the highest band edge {upper[-1]:.1f} Hz")

    freqs = np.arange(nfft // 2 + 1) * rate / nfft
    weights = ((freqs[None, :] >= lower[:, None]) & (freqs[None, :] < upper[:, None])).astype(np.float64)
    empty = np.flatnonzero(weights.sum(axis=1) == 0)
    if empty.size:
        raise DspError(
            f"nfft {nfft} too small at {rate} Hz: band centered at {centers[empty[0]]:.1f} Hz has no bins"
        )
    return OctaveBandMatrix(weights=torch.from_numpy(weights).to(DTYPE), center_frequencies=centers)


def resample_linear(signal: Signal, target_rate: int, rate: int | None = None) -> Signal:
    """Linear interpolation at positions t * rate / target_rate.

    Output length is floor(n * target_rate / rate). For tensors the source rate
    must be given explicitly.
    """
    if target_rate <= 0:
        raise DspError(f"target rate must be positive, got {target_rate}")
    is_clip = isinstance(signal, AudioClip)
    if is_clip:
        rate = signal.rate
    if rate is None or rate <= 0:
        raise DspError("source rate is required to resample a tensor")

    x = as_tensor(signal)
    n = int(x.shape[-1])
    if n == 0:
        raise DspError("cannot resample an empty clip")

    if rate == target_rate:
        y = x
    else:
        lo, hi, frac = _interp_plan(n, rate, target_rate)
        y = x[..., lo] * (1.0 - frac) + x[..., hi] * frac

    if is_clip:
        return AudioClip(np.clip(y.detach().numpy(), -1.0, 1.0), target_rate)
    return y


@lru_cache(maxsize=32)
def _interp_plan(n: int, rate: int, target_rate: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    length = (n * target_rate) // rate
    pos = np.arange(length, dtype=np.float64) * rate / target_rate
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    return torch.from_numpy(lo), torch.from_numpy(hi), torch.from_numpy(frac).to(DTYPE)


def overlap_add(frames_: torch.Tensor, hop: int) -> torch.Tensor:
    """Sum ``(..., M, L)`` frames placed hop apart into ``(..., (M - 1) * hop + L)``."""
    m, length = int(frames_.shape[-2]), int(frames_.shape[-1])
    total = (m - 1) * hop + length if m else 0
    idx = (torch.arange(m)[:, None] * hop + torch.arange(length)[None, :]).reshape(-1)
    out = frames_.new_zeros(frames_.shape[:-2] + (total,))
    return out.index_add(-1, idx, frames_.reshape(frames_.shape[:-2] + (-1,)))

