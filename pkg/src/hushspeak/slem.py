"""Error-minimizing perturbations for speaker data protection.

The encoder is frozen; only the perturbation is optimized, by signed-gradient
descent on ``alpha*L_arc + beta*L_stft + gamma*L_stoi`` with projection onto the
epsilon box restricted to the high-amplitude mask. Items in a batch have
independent objectives, so a batch is optimized jointly through the gradient of
the summed per-item losses.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .audio_io import (
    DEFAULT_PATCH_LENGTH,
    AudioClip,
    DatasetManifest,
    ManifestEntry,
    crop_fixed_patch,
    read_wav,
    write_manifest,
    write_wav,
)
from .dsp import DTYPE, FeatureConfig, log_mel
from .encoder import DEFAULT_MARGIN, DEFAULT_SCALE, EncoderParams, aam_loss, embed
from .errors import NonFiniteGradientError, PerceptualError, SlemError
from .perceptual import PHLWeights, StoiReference, mse, snr_db, stft_loss, stoi_loss_from_reference, stoi_reference

logger = logging.getLogger(__name__)

LOG_NAME = "protection.log"
LOG_COLUMNS = ("path", "initial_loss", "final_loss", "linf", "snr_db", "mse_e6", "source")
ZERO_NOISE = "zero-noise"

COMPONENTS = ("arc", "stft", "stoi")


class ProtectionMode(str, Enum):
    SAMPLE = "sample"
    SPEAKER = "speaker"


class NoiseKind(str, Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class SlemConfig:
    epsilon: float = 0.005
    steps: int = 100
    step_size: Optional[float] = None      # None: epsilon / 10
    mask_keep_fraction: float = 0.5
    patch_length: int = DEFAULT_PATCH_LENGTH
    weights: PHLWeights = field(default_factory=PHLWeights)
    mode: ProtectionMode = ProtectionMode.SAMPLE
    plain_slem: bool = False
    batch_size: int = 16
    margin: float = DEFAULT_MARGIN
    scale: float = DEFAULT_SCALE

    def __post_init__(self):
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise SlemError(f"epsilon must be finite and non-negative, got {self.epsilon}")
        if self.steps < 0:
            raise SlemError(f"steps must be non-negative, got {self.steps}")
        if self.step_size is not None and not self.step_size > 0:
            raise SlemError(f"step size must be positive, got {self.step_size}")
        if not 0.0 <= self.mask_keep_fraction <= 1.0:
            raise SlemError(f"mask keep fraction must lie in [0, 1], got {self.mask_keep_fraction}")
        if self.patch_length < 1 or self.batch_size < 1:
            raise SlemError(f"invalid patch length {self.patch_length} or batch size {self.batch_size}")
        object.__setattr__(self, "mode", ProtectionMode(self.mode))

    @property
    def eta(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 10.0

    @property
    def effective_weights(self) -> PHLWeights:
        return self.weights.without_perceptual() if self.plain_slem else self.weights


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted loss components."""
    arc: float
    stft: float
    stoi: float

    def weighted(self, weights: PHLWeights) -> float:
        return weights.alpha * self.arc + weights.beta * self.stft + weights.gamma * self.stoi


@dataclass
class Perturbation:
    delta: np.ndarray
    epsilon: float
    mask: np.ndarray
    source_kind: ProtectionMode
    source_id: str
    rate: int
    label: int
    initial_loss: float = math.nan
    final_loss: float = math.nan
    elapsed_ms: float = 0.0

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64).reshape(-1)
        self.mask = np.asarray(self.mask, dtype=np.float64).reshape(-1)
        if self.delta.shape != self.mask.shape:
            raise SlemError(f"delta has {self.delta.size} samples, mask has {self.mask.size}")
        if self.delta.size and float(np.max(np.abs(self.delta))) > self.epsilon:
            raise SlemError(f"perturbation exceeds its bound {self.epsilon}")
        if np.any(self.delta[self.mask == 0] != 0):
            raise SlemError("perturbation is non-zero outside its mask")

    @property
    def linf(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0

    @property
    def source(self) -> str:
        if self.source_kind is ProtectionMode.SPEAKER:
            return f"speaker:{self.source_id}"
        return self.source_id


# --- mask and projection ---

def amplitude_mask(clip: Union[AudioClip, np.ndarray], q: float) -> np.ndarray:
    """Ones at the ceil(q*n) samples of largest magnitude, lower index first on ties."""
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise SlemError("cannot mask an empty clip")
    if not 0.0 <= q <= 1.0:
        raise SlemError(f"mask keep fraction must lie in [0, 1], got {q}")
    k = int(math.ceil(round(q * x.size, 9)))
    mask = np.zeros(x.size, dtype=np.float64)
    mask[np.argsort(-np.abs(x), kind="stable")[:k]] = 1.0
    return mask


def project(delta, epsilon: float, mask):
    """Clamp to [-epsilon, epsilon] and zero outside the mask; numpy or torch in, same out."""
    if isinstance(delta, torch.Tensor):
        return torch.clamp(delta, -epsilon, epsilon) * torch.as_tensor(mask, dtype=delta.dtype)
    return np.clip(np.asarray(delta, dtype=np.float64), -epsilon, epsilon) * np.asarray(mask, dtype=np.float64)


# --- objective ---

def _references(clean: torch.Tensor, rate: int) -> List[Optional[StoiReference]]:
    """STOI references per batch item; None drops the STOI term for that item only."""
    refs: List[Optional[StoiReference]] = []
    for i in range(clean.shape[0]):
        try:
            refs.append(stoi_reference(clean[i], rate))
        except PerceptualError as exc:
            logger.warning("batch item %d: dropping the STOI term (%s)", i, exc)
            refs.append(None)
    return refs


def _stoi_losses(refs: List[Optional[StoiReference]], protected: torch.Tensor, lam: float) -> torch.Tensor:
    return torch.stack([
        protected.new_zeros(()) if ref is None else stoi_loss_from_reference(ref, protected[i], lam)
        for i, ref in enumerate(refs)
    ])


def _objective(
    params: EncoderParams,
    clean: torch.Tensor,
    delta: torch.Tensor,
    labels: torch.Tensor,
    refs: Optional[List[Optional[StoiReference]]],
    weights: PHLWeights,
    features: FeatureConfig,
    margin: float,
    scale: float,
    full: bool = False,
) -> Tuple[torch.Tensor, Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Per-item totals ``(B,)`` and unweighted components; zero-weight components are skipped unless ``full``."""
    protected = clean + delta
    zero = clean.new_zeros(clean.shape[0])
    arc = stft = stoi = zero
    if full or weights.alpha:
        arc = aam_loss(params, embed(params, log_mel(protected, features)), labels, margin, scale, reduction="none")
    if full or weights.beta:
        stft = stft_loss(clean, protected, features.rate, features)
    if full or weights.gamma:
        stoi = _stoi_losses(refs, protected, weights.lam)
    total = weights.alpha * arc + weights.beta * stft + weights.gamma * stoi
    return total, (arc, stft, stoi)


def _single(params: EncoderParams, clean_patch, delta) -> Tuple[torch.Tensor, torch.Tensor, FeatureConfig]:
    features = params.config.feature_config()
    if isinstance(clean_patch, AudioClip):
        if clean_patch.rate != features.rate:
            raise SlemError(f"clip rate {clean_patch.rate} Hz, pipeline expects {features.rate} Hz")
        clean_patch = clean_patch.samples
    clean = torch.as_tensor(np.asarray(clean_patch, dtype=np.float64)).reshape(1, -1)
    d = torch.as_tensor(np.asarray(delta, dtype=np.float64)).reshape(1, -1)
    if clean.shape != d.shape:
        raise SlemError(f"delta has {d.shape[-1]} samples, patch has {clean.shape[-1]}")
    return clean.to(DTYPE), d.to(DTYPE), features


def total_loss(
    params: EncoderParams,
    clean_patch: Union[AudioClip, np.ndarray],
    delta: np.ndarray,
    label: int,
    weights: Optional[PHLWeights] = None,
    margin: float = DEFAULT_MARGIN,
    scale: float = DEFAULT_SCALE,
) -> Tuple[float, LossBreakdown]:
    weights = weights or PHLWeights()
    clean, d, features = _single(params, clean_patch, delta)
    labels = torch.tensor([label], dtype=torch.long)
    with torch.no_grad():
        total, (arc, stft, stoi) = _objective(
            params, clean, d, labels, _references(clean, features.rate), weights, features, margin, scale, full=True
        )
    return float(total[0]), LossBreakdown(float(arc[0]), float(stft[0]), float(stoi[0]))


def _delta_grad(
    params: EncoderParams,
    clean: torch.Tensor,
    delta: torch.Tensor,
    labels: torch.Tensor,
    refs: Optional[List[Optional[StoiReference]]],
    weights: PHLWeights,
    features: FeatureConfig,
    margin: float,
    scale: float,
) -> Tuple[torch.Tensor, torch.Tensor]:
    d = delta.detach().clone().requires_grad_(True)
    totals, components = _objective(params, clean, d, labels, refs, weights, features, margin, scale)
    if not totals.requires_grad:
        return torch.zeros_like(d), totals.detach()
    (grad,) = torch.autograd.grad(totals.sum(), d, retain_graph=True)
    if not torch.isfinite(grad).all():
        for name, value in zip(COMPONENTS, components):
            if value.requires_grad:
                (g,) = torch.autograd.grad(value.sum(), d, retain_graph=True)
                if not torch.isfinite(g).all():
                    raise NonFiniteGradientError(name)
        raise NonFiniteGradientError("total")
    return grad, totals.detach()


def loss_grad_wrt_delta(
    params: EncoderParams,
    clean_patch: Union[AudioClip, np.ndarray],
    delta: np.ndarray,
    label: int,
    weights: Optional[PHLWeights] = None,
    margin: float = DEFAULT_MARGIN,
    scale: float = DEFAULT_SCALE,
) -> np.ndarray:
    """Exact reverse-mode gradient of total_loss with respect to ``delta``."""
    weights = weights or PHLWeights()
    clean, d, features = _single(params, clean_patch, delta)
    refs = _references(clean, features.rate) if weights.gamma else None
    labels = torch.tensor([label], dtype=torch.long)
    grad, _ = _delta_grad(params, clean, d, labels, refs, weights, features, margin, scale)
    return grad[0].numpy()


# --- generation ---

def generate_batch(
    params: EncoderParams,
    clips: Sequence[AudioClip],
    labels: Sequence[int],
    config: SlemConfig,
    source_ids: Optional[Sequence[str]] = None,
    source_kind: ProtectionMode = ProtectionMode.SAMPLE,
) -> List[Perturbation]:
    """Signed-gradient descent from zero for a batch of clips, one perturbation each."""
    if len(clips) != len(labels):
        raise SlemError(f"{len(clips)} clips for {len(labels)} labels")
    if not clips:
        return []
    features = params.config.feature_config()
    for clip in clips:
        if clip.rate != features.rate:
            raise SlemError(f"clip rate {clip.rate} Hz, pipeline expects {features.rate} Hz")
    source_ids = list(source_ids) if source_ids is not None else [""] * len(clips)

    started = time.perf_counter()
    patches = [crop_fixed_patch(c, config.patch_length) for c in clips]
    masks_np = np.stack([amplitude_mask(p, config.mask_keep_fraction) for p in patches])
    clean = torch.from_numpy(np.stack([p.samples for p in patches])).to(DTYPE)
    masks = torch.from_numpy(masks_np)
    labels_t = torch.tensor([int(label) for label in labels], dtype=torch.long)
    weights = config.effective_weights
    refs = _references(clean, features.rate) if weights.gamma else None

    def grad_at(d):
        return _delta_grad(params, clean, d, labels_t, refs, weights, features, config.margin, config.scale)

    delta = torch.zeros_like(clean)
    steps = config.steps if config.epsilon > 0 else 0
    if steps:
        grad, initial = grad_at(delta)
    else:
        with torch.no_grad():
            initial, _ = _objective(params, clean, delta, labels_t, refs, weights, features, config.margin, config.scale)
    for step in range(steps):
        if step:
            grad, current = grad_at(delta)
            logger.debug("step %d/%d: mean loss %.6f", step, steps, float(current.mean()))
        delta = project(delta - config.eta * torch.sign(grad), config.epsilon, masks)
    with torch.no_grad():
        final, _ = _objective(params, clean, delta, labels_t, refs, weights, features, config.margin, config.scale)

    elapsed_ms = 1000.0 * (time.perf_counter() - started) / len(clips)
    logger.info(
        "optimized %d clip(s): mean loss %.4f -> %.4f, %.0f ms per clip",
        len(clips), float(initial.mean()), float(final.mean()), elapsed_ms,
    )
    return [
        Perturbation(
            delta=delta[i].numpy(),
            epsilon=config.epsilon,
            mask=masks_np[i],
            source_kind=source_kind,
            source_id=source_ids[i],
            rate=features.rate,
            label=int(labels[i]),
            initial_loss=float(initial[i]),
            final_loss=float(final[i]),
            elapsed_ms=elapsed_ms,
        )
        for i in range(len(clips))
    ]


def _generate_batched(params, clips, labels, config, source_ids, source_kind) -> List[Perturbation]:
    out: List[Perturbation] = []
    for start in range(0, len(clips), config.batch_size):
        stop = start + config.batch_size
        out.extend(generate_batch(params, clips[start:stop], labels[start:stop], config, source_ids[start:stop], source_kind))
    return out


def generate_sample_wise(
    params: EncoderParams,
    clip: AudioClip,
    label: int,
    config: SlemConfig,
    source_id: str = "",
) -> Perturbation:
    return generate_batch(params, [clip], [label], config, [source_id])[0]


def generate_speaker_wise(
    params: EncoderParams,
    clips: Sequence[AudioClip],
    labels: Sequence[int],
    config: SlemConfig,
) -> Dict[int, Perturbation]:
    """One perturbation per speaker from its representative clip, mask included."""
    labels = [int(label) for label in labels]
    if len(set(labels)) != len(labels):
        raise SlemError("duplicate speaker among representatives")
    perts = _generate_batched(params, list(clips), labels, config, [str(label) for label in labels], ProtectionMode.SPEAKER)
    return dict(zip(labels, perts))


def apply(clip: AudioClip, perturbation: Perturbation) -> AudioClip:
    """Add delta to the clip prefix (delta truncated for short clips), clamped to [-1, 1]."""
    if clip.rate != perturbation.rate:
        raise SlemError(f"clip rate {clip.rate} Hz, perturbation made at {perturbation.rate} Hz")
    out = clip.samples.copy()
    n = min(out.size, perturbation.delta.size)
    out[:n] = np.clip(out[:n] + perturbation.delta[:n], -1.0, 1.0)
    return AudioClip(out, clip.rate)


def select_representatives(manifest: DatasetManifest) -> Dict[int, ManifestEntry]:
    """First utterance of each speaker, in manifest order."""
    return {label: group[0] for label, group in manifest.by_speaker().items()}


def random_perturbation(
    clip: AudioClip,
    epsilon: float,
    rng: np.random.Generator,
    mask_keep_fraction: float = 0.5,
    patch_length: int = DEFAULT_PATCH_LENGTH,
    kind: NoiseKind = NoiseKind.UNIFORM,
    source_id: str = "",
    label: int = 0,
) -> Perturbation:
    """Random control noise at the same bound over the same masked patch."""
    patch = crop_fixed_patch(clip, patch_length)
    mask = amplitude_mask(patch, mask_keep_fraction)
    if NoiseKind(kind) is NoiseKind.UNIFORM:
        noise = rng.uniform(-epsilon, epsilon, size=len(patch))
    else:
        noise = np.clip(rng.normal(0.0, epsilon / 2.0, size=len(patch)), -epsilon, epsilon)
    return Perturbation(
        delta=project(noise, epsilon, mask),
        epsilon=epsilon,
        mask=mask,
        source_kind=ProtectionMode.SAMPLE,
        source_id=source_id,
        rate=clip.rate,
        label=label,
    )


# --- corpus protection ---

@dataclass
class ProtectionRecord:
    path: str
    initial_loss: Optional[float]
    final_loss: Optional[float]
    linf: float
    snr_db: Optional[float]     # None when the perturbation is all zero
    mse_e6: float
    source: str


@dataclass
class ProtectionReport:
    out_dir: Path
    manifest_path: Path
    log_path: Path
    records: List[ProtectionRecord] = field(default_factory=list)
    perturbations: List[Perturbation] = field(default_factory=list)


def _mirror_path(out_dir: Path, entry: ManifestEntry) -> Path:
    if Path(entry.path).is_absolute():
        raise SlemError(f"cannot mirror absolute manifest path {entry.path}")
    return out_dir / entry.path


def _record(entry: ManifestEntry, clip: AudioClip, protected: AudioClip, pert: Perturbation, with_loss: bool) -> ProtectionRecord:
    n = min(len(clip), pert.delta.size)
    clean, out = clip.samples[:n], protected.samples[:n]
    snr: Optional[float] = None
    if np.any(out != clean):
        if np.any(clean != 0):
            snr = snr_db(clean, out - clean)
        else:
            logger.warning("%s: source is silent, SNR is -inf", entry.path)
            snr = -math.inf
    return ProtectionRecord(
        path=entry.path,
        initial_loss=pert.initial_loss if with_loss else None,
        final_loss=pert.final_loss if with_loss else None,
        linf=pert.linf,
        snr_db=snr,
        mse_e6=mse(clean, out),
        source=pert.source,
    )


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6g}"


def write_protection_log(path: Union[str, Path], records: Sequence[ProtectionRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in records:
            writer.writerow([
                r.path,
                _fmt(r.initial_loss),
                _fmt(r.final_loss),
                _fmt(r.linf),
                ZERO_NOISE if r.snr_db is None else _fmt(r.snr_db),
                _fmt(r.mse_e6),
                r.source,
            ])
    return path


def _write_mirror(
    manifest: DatasetManifest,
    clips: Sequence[AudioClip],
    perts: Sequence[Perturbation],
    out_dir: Path,
    manifest_name: str,
    with_loss: bool,
) -> ProtectionReport:
    records = []
    for entry, clip, pert in zip(manifest.entries, clips, perts):
        protected = apply(clip, pert)
        write_wav(_mirror_path(out_dir, entry), protected)
        records.append(_record(entry, clip, protected, pert, with_loss))
    manifest_path = write_manifest(out_dir / manifest_name, manifest.entries)
    log_path = write_protection_log(out_dir / LOG_NAME, records)
    return ProtectionReport(out_dir, manifest_path, log_path, records, list(perts))


def protect_corpus(
    params: EncoderParams,
    manifest: DatasetManifest,
    out_dir: Union[str, Path],
    config: SlemConfig,
    manifest_name: str = "train.csv",
) -> ProtectionReport:
    """Protect every manifest utterance and write the mirror, manifest copy and protection log."""
    out_dir = Path(out_dir)
    for entry in manifest.entries:
        _mirror_path(out_dir, entry)
    clips = [read_wav(manifest.resolve(e)) for e in manifest.entries]

    if config.mode is ProtectionMode.SAMPLE:
        perts = _generate_batched(
            params, clips, manifest.labels, config, [e.path for e in manifest.entries], ProtectionMode.SAMPLE
        )
    else:
        reps = select_representatives(manifest)
        speakers = sorted(reps)
        by_speaker = generate_speaker_wise(
            params, [read_wav(manifest.resolve(reps[s])) for s in speakers], speakers, config
        )
        perts = [by_speaker[e.label] for e in manifest.entries]

    logger.info("protected %d utterances (%s-wise) into %s", len(clips), config.mode.value, out_dir)
    return _write_mirror(manifest, clips, perts, out_dir, manifest_name, with_loss=True)


def random_corpus(
    manifest: DatasetManifest,
    out_dir: Union[str, Path],
    epsilon: float,
    seed: int,
    mask_keep_fraction: float = 0.5,
    patch_length: int = DEFAULT_PATCH_LENGTH,
    kind: NoiseKind = NoiseKind.UNIFORM,
    manifest_name: str = "train.csv",
) -> ProtectionReport:
    """Random-noise control corpus, seeded, in manifest order."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    clips = [read_wav(manifest.resolve(e)) for e in manifest.entries]
    perts = [
        random_perturbation(clip, epsilon, rng, mask_keep_fraction, patch_length, kind, e.path, e.label)
        for e, clip in zip(manifest.entries, clips)
    ]
    return _write_mirror(manifest, clips, perts, out_dir, manifest_name, with_loss=False)
