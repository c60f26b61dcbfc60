"""Test signal builders."""

import numpy as np

from hushspeak.audio_io import AudioClip
from hushspeak.encoder import EncoderConfig
from hushspeak.synthdata import CorpusSpec, synth_speaker_profile, synth_utterance

# small encoder so gradient and training tests stay fast
TINY_ENCODER = EncoderConfig(n_mels=40, channels=8, embedding_dim=8, seed=3)


def speechlike(speaker: int = 0, utterance: int = 0, duration_s: float = 0.5, seed: int = 0) -> AudioClip:
    """Non-silent harmonic test clip at 16 kHz."""
    spec = CorpusSpec(duration_s=duration_s, seed=seed)
    return synth_utterance(synth_speaker_profile(speaker, seed), utterance, spec)


def noisy(clip: AudioClip, level: float, seed: int = 0) -> AudioClip:
    rng = np.random.default_rng(seed)
    return AudioClip(np.clip(clip.samples + level * rng.standard_normal(len(clip)), -1.0, 1.0), clip.rate)


def burst(duration_s: float = 2.0, burst_s: float = 0.15, freq: float = 200.0, rate: int = 16000) -> AudioClip:
    """A short tone followed by digital silence."""
    samples = np.zeros(int(duration_s * rate))
    n = int(burst_s * rate)
    samples[:n] = 0.5 * np.sin(2 * np.pi * freq * np.arange(n) / rate)
    return AudioClip(samples, rate)
