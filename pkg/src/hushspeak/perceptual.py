"""Perceptual losses and imperceptibility measures.

STFT loss, STOI score and STOI loss are torch functions of the degraded
waveform so their gradients come from autograd. The STOI pipeline is split in
two: ``stoi_reference`` does everything that depends only on the clean signal
(silent-frame decision, clean envelopes, clean segment statistics) and
``stoi_terms`` evaluates a degraded signal against it. The silent-frame pattern
is therefore fixed by the clean signal and never depends on the perturbation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Union

import numpy as np
import torch

from .audio_io import AudioClip
from .dsp import (
    DTYPE,
    PIPELINE_RATE,
    FeatureConfig,
    Signal,
    as_tensor,
    frames,
    overlap_add,
    resample_linear,
    stft,
    third_octave_matrix,
)
from .errors import PerceptualError

logger = logging.getLogger(__name__)

# Analysis constants of the STOI reference design.
STOI_RATE = 10000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
N_ENV = 30
DYN_RANGE_DB = 40.0
CLIP_BETA_DB = -15.0
CLIP_FACTOR = 1.0 + 10.0 ** (-CLIP_BETA_DB / 20.0)
# score reported when too few non-silent frames remain for one envelope window
SHORT_CLIP_SCORE = 1e-5

DEFAULT_LAMBDA = 0.1
MSE_UNIT = 1e-6

# centered envelope norms below this fraction of the raw norm count as zero variance
_DEGENERATE_RTOL = 1e-10

ArrayLike = Union[AudioClip, np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class PHLWeights:
    """Weights of the hybrid objective: alpha*L_arc + beta*L_stft + gamma*L_stoi."""
    alpha: float = 1.0
    beta: float = 0.005
    gamma: float = 0.01
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lam"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise PerceptualError(f"weight {name} must be finite and non-negative, got {value}")

    def without_perceptual(self) -> "PHLWeights":
        return replace(self, beta=0.0, gamma=0.0)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma, "lam": self.lam}


@dataclass(frozen=True)
class EnvelopeMatrix:
    """One-third octave band envelopes X_j(m), shape (15, M)."""
    values: torch.Tensor
    window: int = N_ENV

    @property
    def n_bands(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[1])

    def vectors(self) -> torch.Tensor:
        """Envelope vectors over ``window`` consecutive frames: (M - window + 1, 15, window)."""
        if self.n_frames < self.window:
            raise PerceptualError(
                f"{self.n_frames} frames is fewer than the {self.window}-frame envelope window"
            )
        return self.values.unfold(1, self.window, 1).transpose(0, 1)


def _pair(clean: Signal, degraded: Signal, rate: int) -> tuple[torch.Tensor, torch.Tensor, int, bool]:
    is_clip = isinstance(clean, AudioClip)
    if is_clip != isinstance(degraded, AudioClip):
        raise PerceptualError("clean and degraded must both be clips or both be tensors")
    if is_clip:
        if clean.rate != degraded.rate:
            raise PerceptualError(f"rate mismatch: {clean.rate} Hz vs {degraded.rate} Hz")
        rate = clean.rate
    x, y = as_tensor(clean), as_tensor(degraded)
    if x.shape[-1] != y.shape[-1]:
        raise PerceptualError(f"length mismatch: {x.shape[-1]} vs {y.shape[-1]} samples")
    return x, y, rate, is_clip


def _out(value: torch.Tensor, is_clip: bool):
    return float(value.detach()) if is_clip else value


# --- STFT loss ---

def stft_loss(clean: Signal, degraded: Signal, rate: int = PIPELINE_RATE, config: FeatureConfig | None = None):
    """l2 norm of the complex spectrogram difference, per batch item for tensors."""
    config = config or FeatureConfig()
    x, y, rate, is_clip = _pair(clean, degraded, rate)
    # STFT is linear, so STFT(y) - STFT(x) = STFT(y - x)
    diff = stft(y - x, config.window, config.hop, config.nfft, rate).values
    value = torch.linalg.vector_norm(torch.view_as_real(diff), dim=(-3, -2, -1))
    return _out(value, is_clip)


# --- STOI ---

def _periodic_hann(length: int) -> torch.Tensor:
    # constant overlap-add at 50% hop
    return torch.hann_window(length, periodic=True, dtype=DTYPE)


def _keep_frames(clean: torch.Tensor) -> np.ndarray:
    """Frames whose energy is within DYN_RANGE_DB of the loudest clean frame."""
    with torch.no_grad():
        windowed = frames(clean, STOI_FRAME, STOI_HOP) * _periodic_hann(STOI_FRAME)
        norms = torch.linalg.vector_norm(windowed, dim=-1).numpy()
    if not np.any(norms > 0):
        raise PerceptualError("clean signal is entirely silent")
    with np.errstate(divide="ignore"):
        energies = 20.0 * np.log10(norms)
    return energies > energies.max() - DYN_RANGE_DB


def _drop_frames(x: torch.Tensor, keep: np.ndarray) -> torch.Tensor:
    windowed = frames(x, STOI_FRAME, STOI_HOP) * _periodic_hann(STOI_FRAME)
    return overlap_add(windowed[torch.from_numpy(np.flatnonzero(keep))], STOI_HOP)


def remove_silent_frames(clean: Signal, degraded: Signal, rate: int = STOI_RATE):
    """Drop frames that are more than 40 dB below the loudest clean frame from both signals."""
    x, y, rate, is_clip = _pair(clean, degraded, rate)
    if rate != STOI_RATE:
        raise PerceptualError(f"silent-frame removal runs at {STOI_RATE} Hz, got {rate} Hz")
    keep = _keep_frames(x)
    xs, ys = _drop_frames(x, keep), _drop_frames(y, keep)
    if is_clip:
        return (
            AudioClip(np.clip(xs.detach().numpy(), -1.0, 1.0), rate),
            AudioClip(np.clip(ys.detach().numpy(), -1.0, 1.0), rate),
        )
    return xs, ys


def _envelopes(x: torch.Tensor) -> torch.Tensor:
    power = stft(x, STOI_FRAME, STOI_HOP, STOI_NFFT, STOI_RATE).power()
    energy = (power @ _band_weights().T).T
    # sqrt with a zero subgradient where a band is exactly empty
    return torch.where(energy > 0, torch.sqrt(energy.clamp_min(1e-300)), torch.zeros_like(energy))


@lru_cache(maxsize=1)
def _band_weights() -> torch.Tensor:
    return third_octave_matrix(STOI_NFFT, STOI_RATE).weights


def band_envelopes(clip: Signal) -> EnvelopeMatrix:
    if isinstance(clip, AudioClip) and clip.rate != STOI_RATE:
        raise PerceptualError(f"band envelopes are computed at {STOI_RATE} Hz, got {clip.rate} Hz")
    x = as_tensor(clip)
    if x.shape[-1] < STOI_FRAME:
        raise PerceptualError(f"clip of {x.shape[-1]} samples is shorter than one frame")
    return EnvelopeMatrix(_envelopes(x))


@dataclass
class StoiReference:
    """Clean-side state of the STOI computation for one clip."""
    rate: int
    n_samples: int
    keep: np.ndarray               # kept 10 kHz frames
    envelopes: torch.Tensor        # (15, M) clean envelopes after silent-frame removal
    # the segment statistics are None when M < N_ENV
    segments: Optional[torch.Tensor] = None          # (S, 15, N_ENV)
    segment_norms: Optional[torch.Tensor] = None     # (S, 15, 1)
    centered: Optional[torch.Tensor] = None          # (S, 15, N_ENV), mean removed
    centered_norms: Optional[torch.Tensor] = None    # (S, 15)

    @property
    def too_short(self) -> bool:
        return self.segments is None


def _to_stoi_rate(x: torch.Tensor, rate: int) -> torch.Tensor:
    return x if rate == STOI_RATE else resample_linear(x, STOI_RATE, rate=rate)


def stoi_reference(clean: Signal, rate: int = PIPELINE_RATE) -> StoiReference:
    if isinstance(clean, AudioClip):
        rate = clean.rate
    x = as_tensor(clean).detach()
    if x.dim() != 1:
        raise PerceptualError("STOI works on one clip at a time")
    if not torch.any(x != 0):
        raise PerceptualError("clean signal is entirely silent")

    x10 = _to_stoi_rate(x, rate)
    keep = _keep_frames(x10)
    env = EnvelopeMatrix(_envelopes(_drop_frames(x10, keep)))
    if env.n_frames < N_ENV:
        logger.warning(
            "only %d non-silent frames, fewer than the %d STOI needs; scoring %g",
            env.n_frames, N_ENV, SHORT_CLIP_SCORE,
        )
        return StoiReference(rate=rate, n_samples=int(x.shape[-1]), keep=keep, envelopes=env.values)
    segments = env.vectors()
    centered = segments - segments.mean(dim=-1, keepdim=True)
    return StoiReference(
        rate=rate,
        n_samples=int(x.shape[-1]),
        keep=keep,
        envelopes=env.values,
        segments=segments,
        segment_norms=torch.linalg.vector_norm(segments, dim=-1, keepdim=True),
        centered=centered,
        centered_norms=torch.linalg.vector_norm(centered, dim=-1),
    )


def stoi_terms(ref: StoiReference, degraded: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(STOI score, mean |X - X'| over bands and frames) for a degraded tensor."""
    if degraded.shape[-1] != ref.n_samples:
        raise PerceptualError(f"length mismatch: {ref.n_samples} vs {degraded.shape[-1]} samples")

    y_env = _envelopes(_drop_frames(_to_stoi_rate(degraded, ref.rate), ref.keep))
    env_l1 = (ref.envelopes - y_env).abs().mean()
    if ref.too_short:
        return env_l1.new_tensor(SHORT_CLIP_SCORE), env_l1

    y = EnvelopeMatrix(y_env).vectors()
    y_norms = torch.linalg.vector_norm(y, dim=-1, keepdim=True)
    scale = torch.where(
        y_norms > 0, ref.segment_norms / torch.where(y_norms > 0, y_norms, torch.ones_like(y_norms)), 0.0
    )
    # normalized to the clean energy, then limited relative to the clean envelope
    y_limited = torch.minimum(y * scale, ref.segments * CLIP_FACTOR)
    y_centered = y_limited - y_limited.mean(dim=-1, keepdim=True)
    y_centered_norms = torch.linalg.vector_norm(y_centered, dim=-1)

    valid = (ref.centered_norms > _DEGENERATE_RTOL * ref.segment_norms[..., 0]) & (
        y_centered_norms > _DEGENERATE_RTOL * torch.linalg.vector_norm(y_limited, dim=-1)
    )
    if not torch.any(valid):
        raise PerceptualError("every envelope correlation is degenerate (zero variance)")
    denom = torch.where(valid, ref.centered_norms * y_centered_norms, torch.ones_like(y_centered_norms))
    corr = torch.where(valid, (ref.centered * y_centered).sum(dim=-1) / denom, torch.zeros_like(denom))
    score = corr.sum() / valid.sum()
    return score, env_l1


def stoi_score(clean: Signal, degraded: Signal, rate: int = PIPELINE_RATE):
    """Short-time objective intelligibility of ``degraded`` against ``clean``."""
    x, y, rate, is_clip = _pair(clean, degraded, rate)
    score, _ = stoi_terms(stoi_reference(x, rate), y)
    return _out(score, is_clip)


def stoi_loss_from_reference(ref: StoiReference, degraded: torch.Tensor, lam: float = DEFAULT_LAMBDA) -> torch.Tensor:
    score, env_l1 = stoi_terms(ref, degraded)
    return (1.0 - score) ** 2 + lam * env_l1


def stoi_loss(clean: Signal, degraded: Signal, lam: float = DEFAULT_LAMBDA, rate: int = PIPELINE_RATE):
    """(1 - STOI)^2 + lam * mean l1 distance between clean and degraded band envelopes."""
    if lam < 0:
        raise PerceptualError(f"lambda must be non-negative, got {lam}")
    x, y, rate, is_clip = _pair(clean, degraded, rate)
    return _out(stoi_loss_from_reference(stoi_reference(x, rate), y, lam), is_clip)


# --- imperceptibility measures ---

def _samples(x: ArrayLike) -> np.ndarray:
    if isinstance(x, AudioClip):
        return x.samples
    if isinstance(x, torch.Tensor):
        return x.detach().numpy().astype(np.float64)
    return np.asarray(x, dtype=np.float64).reshape(-1)


def snr_db(clean: ArrayLike, noise: ArrayLike) -> float:
    x, n = _samples(clean), _samples(noise)
    if x.size != n.size:
        raise PerceptualError(f"length mismatch: {x.size} vs {n.size} samples")
    signal_energy = float(np.sum(x ** 2))
    noise_energy = float(np.sum(n ** 2))
    if noise_energy == 0.0:
        raise PerceptualError("zero noise energy")
    if signal_energy == 0.0:
        raise PerceptualError("zero clean energy")
    return 10.0 * float(np.log10(signal_energy / noise_energy))


def mse(clean: ArrayLike, protected: ArrayLike) -> float:
    """Mean squared sample difference, reported in units of 1e-6."""
    x, y = _samples(clean), _samples(protected)
    if x.size != y.size:
        raise PerceptualError(f"length mismatch: {x.size} vs {y.size} samples")
    if x.size == 0:
        return 0.0
    return float(np.mean((y - x) ** 2)) / MSE_UNIT
