"""Exception hierarchy for HushSpeak.

Every failure the library reports is a ``HushspeakError``; commands catch the
root class and turn it into exit code 1.
"""

from __future__ import annotations

from typing import Optional


class HushspeakError(RuntimeError):
    pass


# --- audio_io ---

class AudioIOError(HushspeakError):
    pass


class MissingAudioError(AudioIOError):
    pass


class UnsupportedEncodingError(AudioIOError):
    pass


class UnsupportedChannelsError(AudioIOError):
    pass


class TruncatedHeaderError(AudioIOError):
    pass


class AudioWriteError(AudioIOError):
    pass


class ManifestError(AudioIOError):
    """Malformed or inconsistent dataset manifest."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class TrialListError(AudioIOError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


# --- signal processing ---

class DspError(HushspeakError):
    pass


class PerceptualError(HushspeakError):
    pass


# --- models ---

class EncoderError(HushspeakError):
    pass


class ModelFormatError(EncoderError):
    pass


class TrainingDivergedError(EncoderError):
    pass


# --- protection ---

class SlemError(HushspeakError):
    pass


class NonFiniteGradientError(SlemError):
    """Raised when a loss component produces NaN/inf gradients."""

    def __init__(self, component: str):
        self.component = component
        super().__init__(f"non-finite gradient in {component}")


# --- evaluation / corpus / config ---

class MetricsError(HushspeakError):
    pass


class SynthError(HushspeakError):
    pass


class ConfigError(HushspeakError):
    pass
