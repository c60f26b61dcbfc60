"""Waveform files, dataset manifests and trial lists.

WAV I/O is PCM 16-bit mono only and bit-exact: samples are integers divided by
32768, and writing clamps to the int16 range. No resampling happens here.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np

from .errors import (
    AudioIOError,
    AudioWriteError,
    ManifestError,
    MissingAudioError,
    TrialListError,
    TruncatedHeaderError,
    UnsupportedChannelsError,
    UnsupportedEncodingError,
)

PathLike = Union[str, Path]

PCM_SCALE = 32768.0
DEFAULT_PATCH_LENGTH = 32000


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with amplitudes in [-1, 1]."""
    samples: np.ndarray
    rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise AudioIOError("clip contains non-finite samples")
        if samples.size and float(np.max(np.abs(samples))) > 1.0:
            raise AudioIOError("clip samples must lie within [-1, 1]")
        if int(self.rate) <= 0:
            raise AudioIOError(f"sample rate must be positive, got {self.rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "rate", int(self.rate))

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return len(self) / self.rate


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int


@dataclass
class DatasetManifest:
    """Ordered (path, speaker label) pairs; labels are contiguous 0..S-1."""
    entries: List[ManifestEntry] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)
    # original speaker id for each contiguous label
    speaker_ids: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def n_speakers(self) -> int:
        return len({e.label for e in self.entries})

    @property
    def labels(self) -> List[int]:
        return [e.label for e in self.entries]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.base_dir / p

    def by_speaker(self) -> dict[int, List[ManifestEntry]]:
        groups: dict[int, List[ManifestEntry]] = {}
        for e in self.entries:
            groups.setdefault(e.label, []).append(e)
        return groups


@dataclass(frozen=True)
class Trial:
    is_same_speaker: bool
    path_a: str
    path_b: str


@dataclass
class TrialList:
    trials: List[Trial] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.trials)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def unique_paths(self) -> List[str]:
        seen: dict[str, None] = {}
        for t in self.trials:
            seen.setdefault(t.path_a, None)
            seen.setdefault(t.path_b, None)
        return list(seen)


# --- WAV ---

def read_wav(path: PathLike) -> AudioClip:
    path = Path(path)
    if not path.is_file():
        raise MissingAudioError(f"audio file not found: {path}")

    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as e:
        msg = str(e)
        if "unknown format" in msg or "sample width" in msg:
            raise UnsupportedEncodingError(f"{path}: non-PCM encoding ({msg})") from e
        raise TruncatedHeaderError(f"{path}: truncated or malformed header ({msg})") from e
    except (EOFError, struct.error) as e:
        raise TruncatedHeaderError(f"{path}: truncated header") from e

    if channels != 1:
        raise UnsupportedChannelsError(f"{path}: unsupported channel count {channels}")
    if width != 2:
        raise UnsupportedEncodingError(f"{path}: unsupported sample width {8 * width} bits")

    usable = len(raw) - (len(raw) % 2)
    ints = np.frombuffer(raw[:usable], dtype="<i2")
    return AudioClip(ints.astype(np.float64) / PCM_SCALE, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    """Quantize [-1, 1] floats to int16; 1.0 clamps to 32767."""
    scaled = np.rint(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    return np.clip(scaled, -32768, 32767).astype("<i2")


def write_wav(path: PathLike, clip: AudioClip) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with wave.open(str(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(clip.rate)
            w.writeframes(to_pcm16(clip.samples).tobytes())
    except OSError as e:
        raise AudioWriteError(f"cannot write {path}: {e}") from e


def crop_fixed_patch(clip: AudioClip, length_samples: int = DEFAULT_PATCH_LENGTH) -> AudioClip:
    """Prefix of the clip, or the clip repeated cyclically when it is too short."""
    if length_samples <= 0:
        raise AudioIOError(f"patch length must be positive, got {length_samples}")
    if len(clip) == 0:
        raise AudioIOError("cannot crop an empty clip")
    if len(clip) == length_samples:
        return clip
    return AudioClip(np.resize(clip.samples, length_samples), clip.rate)


# --- manifests ---

def _content_lines(path: Path) -> Iterable[tuple[int, str]]:
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield number, line


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")

    entries: List[ManifestEntry] = []
    remap: dict[int, int] = {}
    seen: set[str] = set()

    for number, line in _content_lines(path):
        parts = line.rsplit(",", 1)
        if len(parts) != 2 or not parts[0].strip():
            raise ManifestError("expected `path,speaker_id`", line_number=number)
        rel, raw_id = parts[0].strip(), parts[1].strip()
        try:
            speaker = int(raw_id)
        except ValueError:
            raise ManifestError(f"speaker id is not an integer: {raw_id!r}", line_number=number)
        if speaker < 0:
            raise ManifestError(f"speaker id must be non-negative: {speaker}", line_number=number)
        if rel in seen:
            raise ManifestError(f"duplicate path {rel}", line_number=number)
        seen.add(rel)
        label = remap.setdefault(speaker, len(remap))
        entries.append(ManifestEntry(rel, label))

    return DatasetManifest(entries=entries, base_dir=path.parent, speaker_ids=list(remap))


def write_manifest(path: PathLike, entries: Iterable[ManifestEntry]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{e.path},{e.label}" for e in entries]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def load_trials(path: PathLike) -> TrialList:
    path = Path(path)
    if not path.is_file():
        raise TrialListError(f"trial list not found: {path}")

    trials: List[Trial] = []
    for number, line in _content_lines(path):
        parts = line.split()
        if len(parts) != 3:
            raise TrialListError("expected `<0|1> <pathA> <pathB>`", line_number=number)
        label, a, b = parts
        if label not in ("0", "1"):
            raise TrialListError(f"invalid label {label!r}", line_number=number)
        trials.append(Trial(label == "1", a, b))
    return TrialList(trials=trials, base_dir=path.parent)


def write_trials(path: PathLike, trials: Iterable[Trial]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{int(t.is_same_speaker)} {t.path_a} {t.path_b}" for t in trials]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def read_patch(path: PathLike, length_samples: int, rate: Optional[int] = None) -> AudioClip:
    """read_wav + crop_fixed_patch, checking the pipeline rate when given."""
    clip = read_wav(path)
    if rate is not None and clip.rate != rate:
        raise AudioIOError(f"{path}: sample rate {clip.rate} Hz, pipeline expects {rate} Hz")
    return crop_fixed_patch(clip, length_samples)

