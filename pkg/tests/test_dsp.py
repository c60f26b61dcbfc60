"""Tests for the signal-processing primitives."""

import numpy as np
import pytest
import torch

from hushspeak.audio_io import AudioClip
from hushspeak.dsp import (
    FeatureConfig,
    frame_count,
    hann_window,
    hz_to_mel,
    log_mel_features,
    mel_filterbank,
    mel_to_hz,
    overlap_add,
    resample_linear,
    stft,
    third_octave_matrix,
)
from hushspeak.errors import DspError

from tests.oracles import naive_dft_frames


class TestStft:
    """Tests for stft."""

    def test_matches_naive_dft(self, rng):
        """rfft of Hann-windowed frames equals an explicit DFT."""
        x = rng.uniform(-0.5, 0.5, 1200)
        spec = stft(AudioClip(x, 16000), window=400, hop=160, nfft=512)
        np.testing.assert_allclose(spec.values.numpy(), naive_dft_frames(x, 400, 160, 512), atol=1e-9)

    def test_frame_count(self):
        """A 2 s clip at 25/10 ms gives 198 frames of 257 bins."""
        spec = stft(AudioClip(np.zeros(32000), 16000))
        assert (spec.n_frames, spec.n_bins) == (198, 257)
        assert FeatureConfig().n_frames(32000) == 198

    def test_short_signal(self):
        """A signal shorter than the window is an error."""
        with pytest.raises(DspError):
            stft(AudioClip(np.zeros(100), 16000))

    def test_nfft_smaller_than_window(self):
        """nfft must cover the window."""
        with pytest.raises(DspError):
            stft(AudioClip(np.zeros(1000), 16000), window=400, nfft=256)

    def test_bin_frequency(self):
        """Bin b sits at b * rate / nfft."""
        spec = stft(AudioClip(np.zeros(400), 16000))
        assert spec.bin_frequency(16) == 500.0

    def test_batched_equals_single(self, rng):
        """A batch dimension does not change per-item results."""
        x = torch.from_numpy(rng.uniform(-0.5, 0.5, (2, 800)))
        batch = stft(x).values
        np.testing.assert_allclose(batch[1].numpy(), stft(x[1]).values.numpy())


class TestWindows:
    """Tests for window helpers."""

    def test_hann_symmetric(self):
        """The Hann window is zero at both ends and peaks at one."""
        w = hann_window(401).numpy()
        assert w[0] == pytest.approx(0.0) and w[-1] == pytest.approx(0.0)
        assert w[200] == pytest.approx(1.0)

    def test_hann_too_short(self):
        """Length 1 is rejected."""
        with pytest.raises(DspError):
            hann_window(1)

    def test_frame_count_helper(self):
        """frame_count is zero below one window."""
        assert frame_count(399, 400, 160) == 0
        assert frame_count(400, 400, 160) == 1

    def test_overlap_add(self):
        """Frames are summed hop apart."""
        frames = torch.ones(3, 4, dtype=torch.float64)
        np.testing.assert_array_equal(overlap_add(frames, 2).numpy(), [1, 1, 2, 2, 2, 2, 1, 1])


class TestMel:
    """Tests for the mel front-end."""

    def test_mel_scale_anchor(self):
        """1000 Hz is about 1000 mel, and the inverse undoes it."""
        assert hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.1)
        f = np.array([0.0, 20.0, 440.0, 7600.0])
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)

    def test_filterbank_shape_and_support(self):
        """Filters are non-negative, peak at most 1, and vanish outside [f_min, f_max]."""
        fb = mel_filterbank(512, 16000, 40, 20.0, 7600.0).numpy()
        assert fb.shape == (40, 257)
        assert fb.min() >= 0 and fb.max() <= 1 + 1e-12
        freqs = np.arange(257) * 16000 / 512
        assert np.all(fb[:, freqs > 7600] == 0)
        assert np.all(fb.sum(axis=1) > 0)

    def test_filterbank_is_a_copy(self):
        """Mutating the returned matrix leaves the cached one intact."""
        fb = mel_filterbank(512, 16000, 40, 20.0, 7600.0)
        fb.zero_()
        assert mel_filterbank(512, 16000, 40, 20.0, 7600.0).sum() > 0

    def test_silence_hits_floor(self):
        """Silent input yields log(energy_floor) everywhere."""
        feats = log_mel_features(AudioClip(np.zeros(1600), 16000))
        np.testing.assert_allclose(feats.values.numpy(), np.log(1e-10))
        assert (feats.n_frames, feats.n_bins) == (8, 40)

    def test_rate_mismatch(self):
        """Clips at another rate are rejected."""
        with pytest.raises(DspError):
            log_mel_features(AudioClip(np.zeros(1600), 8000))

    def test_tone_lands_in_matching_filter(self):
        """A 1 kHz tone peaks in the filter whose center is closest to 1 kHz."""
        t = np.arange(4000) / 16000
        feats = log_mel_features(AudioClip(0.5 * np.sin(2 * np.pi * 1000 * t), 16000)).values.numpy()
        fb = mel_filterbank(512, 16000, 40, 20.0, 7600.0).numpy()
        assert abs(int(np.argmax(feats.mean(axis=0))) - int(np.argmax(fb[:, 32]))) <= 1

    def test_invalid_config(self):
        """Mel range beyond Nyquist is rejected."""
        with pytest.raises(DspError):
            FeatureConfig(f_max=9000.0)


class TestThirdOctave:
    """Tests for third_octave_matrix."""

    def test_bands_at_10k(self):
        """15 disjoint bands centered at 150 * 2**(k/3)."""
        bands = third_octave_matrix(512, 10000)
        w = bands.weights.numpy()
        assert w.shape == (15, 257)
        assert np.all(w.sum(axis=0) <= 1)
        assert bands.center_frequencies[0] == 150.0
        np.testing.assert_allclose(bands.center_frequencies[3], 300.0)

    def test_rate_too_low(self):
        """Nyquist must exceed the highest band edge."""
        with pytest.raises(DspError):
            third_octave_matrix(512, 8000)

    def test_nfft_too_small(self):
        """A resolution too coarse for the lowest band is an error."""
        with pytest.raises(DspError, match="no bins"):
            third_octave_matrix(32, 10000)


class TestResample:
    """Tests for resample_linear."""

    def test_identity(self, rng):
        """Equal rates return the signal unchanged."""
        clip = AudioClip(rng.uniform(-0.5, 0.5, 100), 16000)
        np.testing.assert_array_equal(resample_linear(clip, 16000).samples, clip.samples)

    def test_length(self):
        """Output length is floor(n * target / rate)."""
        out = resample_linear(AudioClip(np.zeros(32001), 16000), 10000)
        assert len(out) == 20000 and out.rate == 10000

    def test_linear_values(self):
        """A ramp stays a ramp after linear interpolation."""
        x = np.arange(16) / 32.0
        out = resample_linear(AudioClip(x, 16), 10).samples
        np.testing.assert_allclose(out, np.arange(10) * 1.6 / 32.0)

    @pytest.mark.parametrize("freq", [200.0, 1000.0, 2000.0])
    def test_sine_survives(self, freq):
        """A sine resampled to 10 kHz correlates with the same sine sampled there directly."""
        n = 16000
        x = 0.5 * np.sin(2 * np.pi * freq * np.arange(n) / 16000)
        out = resample_linear(AudioClip(x, 16000), 10000).samples
        direct = 0.5 * np.sin(2 * np.pi * freq * np.arange(len(out)) / 10000)
        assert np.corrcoef(out, direct)[0, 1] > 0.99

    def test_tensor_needs_rate(self):
        """Tensors must carry an explicit source rate."""
        with pytest.raises(DspError):
            resample_linear(torch.zeros(10, dtype=torch.float64), 10000)

    def test_gradient_flows(self):
        """Resampling is differentiable."""
        x = torch.linspace(-0.5, 0.5, 160, dtype=torch.float64, requires_grad=True)
        resample_linear(x, 100, rate=160).sum().backward()
        assert torch.isfinite(x.grad).all() and x.grad.abs().sum() > 0
