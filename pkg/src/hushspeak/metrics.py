"""Verification scoring, EER / minDCF and imperceptibility audits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from .audio_io import DEFAULT_PATCH_LENGTH, AudioClip, DatasetManifest, TrialList, read_patch, read_wav
from .dsp import DTYPE, FeatureConfig, log_mel
from .encoder import Embedding, EncoderParams, embed
from .errors import MetricsError, PerceptualError
from .perceptual import mse, snr_db, stoi_score

logger = logging.getLogger(__name__)

AUDIT_COLUMNS = ("path", "snr_db", "mse_e6", "stoi")
ZERO_NOISE = "zero-noise"


@dataclass
class ScoreSet:
    target_scores: np.ndarray
    nontarget_scores: np.ndarray

    def __post_init__(self):
        self.target_scores = np.asarray(self.target_scores, dtype=np.float64).reshape(-1)
        self.nontarget_scores = np.asarray(self.nontarget_scores, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.target_scores)) and np.all(np.isfinite(self.nontarget_scores))):
            raise MetricsError("scores must be finite")

    def require_both(self) -> None:
        if self.target_scores.size == 0 or self.nontarget_scores.size == 0:
            raise MetricsError("need at least one target and one non-target score")


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise MetricsError(f"p_target must lie in (0, 1), got {self.p_target}")
        if not (self.c_miss > 0 and self.c_fa > 0):
            raise MetricsError(f"costs must be positive, got c_miss={self.c_miss} c_fa={self.c_fa}")

    @property
    def normalizer(self) -> float:
        return min(self.c_miss * self.p_target, self.c_fa * (1.0 - self.p_target))


# --- scoring ---

def cosine_score(e1: Embedding, e2: Embedding) -> float:
    if e1.dim != e2.dim:
        raise MetricsError(f"embedding dimensions differ: {e1.dim} vs {e2.dim}")
    return float(np.clip(np.dot(e1.values, e2.values), -1.0, 1.0))


def score_trials(
    params: EncoderParams,
    trials: TrialList,
    feature_config: Optional[FeatureConfig] = None,
    patch_length: int = DEFAULT_PATCH_LENGTH,
    batch_size: int = 64,
) -> ScoreSet:
    """Embed each unique trial path once, then cosine-score every trial."""
    if not any(t.is_same_speaker for t in trials.trials) or all(t.is_same_speaker for t in trials.trials):
        raise MetricsError("trial list needs both same-speaker and different-speaker trials")
    feature_config = feature_config or params.config.feature_config()

    paths = trials.unique_paths()
    cache: Dict[str, Embedding] = {}
    for start in range(0, len(paths), batch_size):
        chunk = paths[start:start + batch_size]
        patches = np.stack([read_patch(trials.resolve(p), patch_length, rate=feature_config.rate).samples for p in chunk])
        with torch.no_grad():
            emb = embed(params, log_mel(torch.from_numpy(patches).to(DTYPE), feature_config)).numpy()
        cache.update((p, Embedding(e)) for p, e in zip(chunk, emb))
    logger.debug("embedded %d unique trial paths", len(cache))

    targets, nontargets = [], []
    for t in trials.trials:
        score = cosine_score(cache[t.path_a], cache[t.path_b])
        (targets if t.is_same_speaker else nontargets).append(score)
    return ScoreSet(targets, nontargets)


# --- error rates ---

def _sweep(scores: ScoreSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (sorted unique scores plus -inf/+inf), FRR (targets < t), FAR (non-targets >= t)."""
    scores.require_both()
    tar = np.sort(scores.target_scores)
    non = np.sort(scores.nontarget_scores)
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([tar, non])), [np.inf]])
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return thresholds, frr, far


def eer(scores: ScoreSet) -> float:
    """Equal error rate in percent, interpolated where FRR - FAR changes sign."""
    _, frr, far = _sweep(scores)
    diff = frr - far
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        return 100.0 * float(frr[i])
    d0, d1 = diff[i - 1], diff[i]
    w = d0 / (d0 - d1)
    return 100.0 * float(frr[i - 1] + w * (frr[i] - frr[i - 1]))


def min_dcf(scores: ScoreSet, params: Optional[DcfParams] = None) -> float:
    params = params or DcfParams()
    _, frr, far = _sweep(scores)
    dcf = params.c_miss * frr * params.p_target + params.c_fa * far * (1.0 - params.p_target)
    return float(np.min(dcf)) / params.normalizer


def det_points(scores: ScoreSet) -> List[Tuple[float, float]]:
    """(FAR, FRR) at every threshold of the sweep, FAR decreasing."""
    _, frr, far = _sweep(scores)
    return [(float(a), float(r)) for a, r in zip(far, frr)]


# --- imperceptibility audit ---

@dataclass
class AuditRecord:
    path: str
    snr_db: Optional[float]     # None for an unperturbed file
    mse_e6: float
    stoi: float


@dataclass
class AuditReport:
    records: List[AuditRecord] = field(default_factory=list)

    @property
    def mean_snr_db(self) -> Optional[float]:
        """Mean over files with a defined SNR; None when no file was perturbed."""
        values = [r.snr_db for r in self.records if r.snr_db is not None]
        return float(np.mean(values)) if values else None

    @property
    def mean_mse_e6(self) -> float:
        return float(np.mean([r.mse_e6 for r in self.records])) if self.records else math.nan

    @property
    def mean_stoi(self) -> float:
        return float(np.mean([r.stoi for r in self.records])) if self.records else math.nan


def audit_report(
    clean_dir: Union[str, Path],
    protected_dir: Union[str, Path],
    manifest: DatasetManifest,
    patch_length: int = DEFAULT_PATCH_LENGTH,
) -> AuditReport:
    """SNR, MSE and STOI of every protected file against its clean counterpart, over the patch."""
    clean_dir, protected_dir = Path(clean_dir), Path(protected_dir)
    report = AuditReport()
    for entry in manifest.entries:
        clean = read_wav(clean_dir / entry.path)
        protected = read_wav(protected_dir / entry.path)
        if len(clean) != len(protected):
            raise MetricsError(f"{entry.path}: length mismatch ({len(clean)} vs {len(protected)} samples)")
        if clean.rate != protected.rate:
            raise MetricsError(f"{entry.path}: rate mismatch ({clean.rate} vs {protected.rate} Hz)")

        x = clean.samples[:patch_length]
        y = protected.samples[:patch_length]
        try:
            snr: Optional[float] = snr_db(x, y - x)
        except PerceptualError:
            if np.any(y != x):
                raise
            snr = None
        report.records.append(
            AuditRecord(
                path=entry.path,
                snr_db=snr,
                mse_e6=mse(x, y),
                stoi=stoi_score(AudioClip(x, clean.rate), AudioClip(y, clean.rate)),
            )
        )
    logger.info("audited %d files", len(report.records))
    return report


def _fmt(value: Optional[float]) -> str:
    return ZERO_NOISE if value is None else f"{value:.6g}"


def write_audit_csv(path: Union[str, Path], report: AuditReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(AUDIT_COLUMNS)
        for r in report.records:
            writer.writerow([r.path, _fmt(r.snr_db), _fmt(r.mse_e6), _fmt(r.stoi)])
        writer.writerow(["MEAN", _fmt(report.mean_snr_db), _fmt(report.mean_mse_e6), _fmt(report.mean_stoi)])
    return path
