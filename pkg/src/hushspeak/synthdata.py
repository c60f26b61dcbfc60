"""Deterministic synthetic multi-speaker corpus.

Each speaker is a harmonic source at its own fundamental, shaped by three
resonances and a spectral tilt; utterances differ in vibrato, syllable-rate
amplitude modulation, pitch contour and noise.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .audio_io import AudioClip, ManifestEntry, Trial, write_manifest, write_trials, write_wav
from .errors import SynthError

logger = logging.getLogger(__name__)

F0_LOW_HZ = 90.0
F0_SPACING_HZ = 6.0
N_F0_SLOTS = 29   # 90, 96, ..., 258 Hz
PEAK = 0.5

FORMANT_RANGES_HZ = ((300.0, 900.0), (900.0, 2300.0), (2300.0, 3300.0))
FORMANT_BANDWIDTHS_HZ = (80.0, 120.0, 160.0)
TILT_RANGE_DB = (-9.0, -3.0)

MANIFEST_NAME = "train.csv"
TRIALS_NAME = "trials.txt"


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 20
    utterances_per_speaker: int = 30
    duration_s: float = 2.0
    rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_speakers <= N_F0_SLOTS:
            raise SynthError(f"n_speakers must lie in [2, {N_F0_SLOTS}], got {self.n_speakers}")
        if self.utterances_per_speaker < 2:
            raise SynthError(f"need at least 2 utterances per speaker, got {self.utterances_per_speaker}")
        if self.duration_s <= 0 or self.rate <= 0:
            raise SynthError(f"invalid duration {self.duration_s} s or rate {self.rate} Hz")
        if self.seed < 0:
            raise SynthError(f"seed must be non-negative, got {self.seed}")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.rate))

    @property
    def n_heldout(self) -> int:
        return max(2, int(round(0.2 * self.utterances_per_speaker)))

    @property
    def n_train(self) -> int:
        return self.utterances_per_speaker - self.n_heldout


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    f0: float
    formants: Tuple[float, float, float]
    tilt_db_per_octave: float


def synth_speaker_profile(speaker_id: int, seed: int) -> SpeakerProfile:
    """Fundamental from a seeded permutation of 6 Hz-spaced slots; resonances and tilt per (seed, id)."""
    if not 0 <= speaker_id < N_F0_SLOTS:
        raise SynthError(f"speaker id must lie in [0, {N_F0_SLOTS}), got {speaker_id}")
    slot = int(np.random.default_rng(seed).permutation(N_F0_SLOTS)[speaker_id])
    rng = np.random.default_rng([seed, speaker_id])
    formants = tuple(float(rng.uniform(lo, hi)) for lo, hi in FORMANT_RANGES_HZ)
    return SpeakerProfile(
        speaker_id=speaker_id,
        f0=F0_LOW_HZ + F0_SPACING_HZ * slot,
        formants=formants,
        tilt_db_per_octave=float(rng.uniform(*TILT_RANGE_DB)),
    )


def _spectral_gain(profile: SpeakerProfile, freqs: np.ndarray) -> np.ndarray:
    resonance = 0.05 + sum(
        1.0 / (1.0 + ((freqs - fc) / bw) ** 2) for fc, bw in zip(profile.formants, FORMANT_BANDWIDTHS_HZ)
    )
    octaves = np.log2(np.maximum(freqs, F0_LOW_HZ) / F0_LOW_HZ)
    return resonance * 10.0 ** (profile.tilt_db_per_octave * octaves / 20.0)


def synth_utterance(profile: SpeakerProfile, utterance_id: int, spec: CorpusSpec) -> AudioClip:
    n, rate = spec.n_samples, spec.rate
    rng = np.random.default_rng([spec.seed, profile.speaker_id, utterance_id])
    t = np.arange(n) / rate

    # pitch: slow utterance contour plus vibrato
    contour = rng.uniform(-0.04, 0.04) * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 2 * np.pi))
    vibrato = 0.015 * np.sin(2 * np.pi * rng.uniform(4.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
    f_inst = profile.f0 * (1.0 + contour + vibrato)
    phase = 2 * np.pi * np.cumsum(f_inst) / rate

    n_harmonics = max(1, int(0.45 * rate / (profile.f0 * 1.06)))
    h = np.arange(1, n_harmonics + 1)
    amps = _spectral_gain(profile, h * profile.f0)
    offsets = rng.uniform(0, 2 * np.pi, size=n_harmonics)
    voiced = (amps[:, None] * np.sin(h[:, None] * phase[None, :] + offsets[:, None])).sum(axis=0)

    # resonance-shaped noise
    spectrum = np.fft.rfft(rng.standard_normal(n))
    noise = np.fft.irfft(spectrum * _spectral_gain(profile, np.fft.rfftfreq(n, 1.0 / rate)), n=n)
    noise *= 0.1 * np.std(voiced) / max(np.std(noise), 1e-12)

    # syllable-rate amplitude modulation
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
    y = envelope * (voiced + noise)
    return AudioClip(PEAK * y / np.max(np.abs(y)), rate)


def _utterance_path(speaker: int, utterance: int) -> str:
    return f"wav/spk{speaker:02d}/utt{utterance:03d}.wav"


def _balanced_trials(heldout: Dict[int, List[str]], seed: int) -> List[Trial]:
    targets = [
        Trial(True, a, b) for paths in heldout.values() for a, b in itertools.combinations(paths, 2)
    ]
    cross = [
        (a, b)
        for s1, s2 in itertools.combinations(sorted(heldout), 2)
        for a in heldout[s1]
        for b in heldout[s2]
    ]
    picks = np.sort(np.random.default_rng([seed, len(cross)]).choice(len(cross), size=len(targets), replace=False))
    return targets + [Trial(False, *cross[i]) for i in picks]


def build_corpus(spec: CorpusSpec, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Write all WAVs, the train manifest and the balanced held-out trial list."""
    if spec.n_train < 1:
        raise SynthError(
            f"{spec.utterances_per_speaker} utterances per speaker leave none for training "
            f"after {spec.n_heldout} held out"
        )
    out_dir = Path(out_dir)
    train: List[ManifestEntry] = []
    heldout: Dict[int, List[str]] = {}

    for speaker in range(spec.n_speakers):
        profile = synth_speaker_profile(speaker, spec.seed)
        logger.debug("speaker %d: f0 %.0f Hz, formants %s", speaker, profile.f0, profile.formants)
        for utterance in range(spec.utterances_per_speaker):
            rel = _utterance_path(speaker, utterance)
            write_wav(out_dir / rel, synth_utterance(profile, utterance, spec))
            if utterance < spec.n_train:
                train.append(ManifestEntry(rel, speaker))
            else:
                heldout.setdefault(speaker, []).append(rel)

    manifest_path = write_manifest(out_dir / MANIFEST_NAME, train)
    trials_path = write_trials(out_dir / TRIALS_NAME, _balanced_trials(heldout, spec.seed))
    logger.info(
        "wrote %d speakers x %d utterances to %s", spec.n_speakers, spec.utterances_per_speaker, out_dir
    )
    return manifest_path, trials_path
