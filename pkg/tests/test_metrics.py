"""Tests for scoring, EER / minDCF and the imperceptibility audit."""

import csv
import shutil

import numpy as np
import pytest

from hushspeak.audio_io import AudioClip, DatasetManifest, ManifestEntry, Trial, TrialList, read_wav, write_wav
from hushspeak.encoder import Embedding
from hushspeak.errors import MetricsError, MissingAudioError
from hushspeak.metrics import (
    AUDIT_COLUMNS,
    AuditRecord,
    AuditReport,
    DcfParams,
    ScoreSet,
    audit_report,
    cosine_score,
    det_points,
    eer,
    min_dcf,
    score_trials,
    write_audit_csv,
)
from hushspeak.perceptual import mse, snr_db

from tests.oracles import brute_force_eer, brute_force_min_dcf


class TestCosine:
    """Tests for cosine_score."""

    def test_known_value(self):
        """(1, 0) . (0.6, 0.8) = 0.6."""
        assert cosine_score(Embedding(np.array([1.0, 0.0])), Embedding(np.array([0.6, 0.8]))) == pytest.approx(0.6)

    def test_self_and_orthogonal(self):
        """Self-similarity is 1, orthogonal vectors score 0."""
        e = Embedding(np.array([0.6, 0.8]))
        assert cosine_score(e, e) == pytest.approx(1.0)
        assert cosine_score(e, Embedding(np.array([-0.8, 0.6]))) == pytest.approx(0.0)

    def test_dimension_mismatch(self):
        """Embeddings must share a dimension."""
        with pytest.raises(MetricsError):
            cosine_score(Embedding(np.array([1.0, 0.0])), Embedding(np.array([1.0, 0.0, 0.0])))


class TestEer:
    """Tests for eer."""

    def test_worked_example(self):
        """One error on each side gives 33.33%."""
        assert eer(ScoreSet([0.9, 0.8, 0.4], [0.5, 0.3, 0.1])) == pytest.approx(100 / 3)

    def test_separated(self):
        """Perfect separation gives 0%."""
        assert eer(ScoreSet([0.8, 0.9], [0.1, 0.2])) == 0.0

    def test_inverted(self):
        """Perfect inversion gives 100%."""
        assert eer(ScoreSet([0.1, 0.2], [0.8, 0.9])) == pytest.approx(100.0)

    def test_empty_class(self):
        """Both classes are required."""
        with pytest.raises(MetricsError):
            eer(ScoreSet([0.5], []))

    def test_non_finite(self):
        """NaN scores are rejected."""
        with pytest.raises(MetricsError):
            ScoreSet([np.nan], [0.1])

    def test_matches_brute_force(self):
        """200 random score sets agree with a direct threshold sweep."""
        rng = np.random.default_rng(0)
        for _ in range(200):
            tar = np.round(rng.normal(0.5, 0.3, rng.integers(2, 201)), int(rng.integers(1, 4)))
            non = np.round(rng.normal(0.0, 0.3, rng.integers(2, 201)), int(rng.integers(1, 4)))
            scores = ScoreSet(tar, non)
            assert eer(scores) == pytest.approx(brute_force_eer(tar, non), abs=1e-9)
            assert min_dcf(scores) == pytest.approx(brute_force_min_dcf(tar, non), abs=1e-9)

    def test_monotone_invariance(self, rng):
        """A strictly increasing transform leaves EER unchanged."""
        tar, non = rng.normal(0.4, 0.2, 50), rng.normal(0.0, 0.2, 60)
        base = eer(ScoreSet(tar, non))
        assert eer(ScoreSet(np.tanh(3 * tar), np.tanh(3 * non))) == pytest.approx(base, abs=1e-9)
        assert eer(ScoreSet(2.5 * tar, 2.5 * non)) == pytest.approx(base, abs=1e-9)


class TestMinDcf:
    """Tests for min_dcf."""

    def test_worked_example(self):
        """Half the targets missed at the best threshold gives 0.5."""
        assert min_dcf(ScoreSet([0.9, 0.4], [0.5, 0.1])) == pytest.approx(0.5)

    def test_separated(self):
        """Perfect separation costs nothing."""
        assert min_dcf(ScoreSet([0.8, 0.9], [0.1, 0.2])) == 0.0

    def test_identical_scores(self):
        """Indistinguishable scores cost the normalizer."""
        assert min_dcf(ScoreSet([0.5, 0.5], [0.5, 0.5])) == pytest.approx(1.0)

    def test_below_dcf_at_any_threshold(self, rng):
        """The minimum is no larger than the cost at the EER crossing."""
        tar, non = rng.normal(0.3, 0.2, 40), rng.normal(0.0, 0.2, 40)
        params = DcfParams(p_target=0.05)
        rate = eer(ScoreSet(tar, non)) / 100
        assert min_dcf(ScoreSet(tar, non), params) <= (rate * 0.05 + rate * 0.95) / params.normalizer + 1e-9

    def test_invalid_params(self):
        """p_target must lie strictly inside (0, 1)."""
        with pytest.raises(MetricsError):
            DcfParams(p_target=1.0)


class TestDetPoints:
    """Tests for det_points."""

    def test_endpoints(self):
        """The sweep runs from accept-all to reject-all."""
        points = det_points(ScoreSet([0.9, 0.4], [0.5, 0.1]))
        assert points[0] == (1.0, 0.0)
        assert points[-1] == (0.0, 1.0)
        fars = [far for far, _ in points]
        assert fars == sorted(fars, reverse=True)


def _trials(root, lines):
    return TrialList([Trial(label, a, b) for label, a, b in lines], root)


class TestScoreTrials:
    """Tests for score_trials."""

    def test_counts(self, tiny_params, tiny_trials):
        """One score per trial line, split by label."""
        scores = score_trials(tiny_params, tiny_trials, patch_length=16000)
        n_target = sum(t.is_same_speaker for t in tiny_trials.trials)
        assert scores.target_scores.size == n_target
        assert scores.nontarget_scores.size == len(tiny_trials.trials) - n_target

    def test_duplicate_line_duplicates_score(self, tiny_params, tiny_trials):
        """A repeated trial yields a repeated score."""
        first = tiny_trials.trials[0]
        doubled = TrialList(list(tiny_trials.trials) + [first], tiny_trials.base_dir)
        a = score_trials(tiny_params, tiny_trials, patch_length=16000)
        b = score_trials(tiny_params, doubled, patch_length=16000)
        assert len(b.target_scores) + len(b.nontarget_scores) == len(a.target_scores) + len(a.nontarget_scores) + 1

    def test_self_trial(self, tiny_params, tiny_manifest):
        """A path scored against itself is 1."""
        a, b = tiny_manifest.entries[0].path, tiny_manifest.entries[-1].path
        trials = _trials(tiny_manifest.base_dir, [(True, a, a), (False, a, b)])
        scores = score_trials(tiny_params, trials, patch_length=16000)
        assert scores.target_scores[0] == pytest.approx(1.0, abs=1e-12)

    def test_batching_does_not_matter(self, tiny_params, tiny_trials):
        """Scores do not depend on the embedding batch size."""
        a = score_trials(tiny_params, tiny_trials, patch_length=16000, batch_size=64)
        b = score_trials(tiny_params, tiny_trials, patch_length=16000, batch_size=1)
        np.testing.assert_allclose(a.target_scores, b.target_scores, atol=1e-12)

    def test_single_class(self, tiny_params, tiny_manifest):
        """A trial list with only one label class is rejected."""
        a, b = tiny_manifest.entries[0].path, tiny_manifest.entries[1].path
        with pytest.raises(MetricsError):
            score_trials(tiny_params, _trials(tiny_manifest.base_dir, [(True, a, b)]))

    def test_missing_file(self, tiny_params, tmp_path):
        """Unreadable trial paths surface as audio errors."""
        trials = _trials(tmp_path, [(True, "a.wav", "b.wav"), (False, "a.wav", "c.wav")])
        with pytest.raises(MissingAudioError):
            score_trials(tiny_params, trials)


class TestAudit:
    """Tests for audit_report and write_audit_csv."""

    def test_identical_dirs(self, tiny_manifest):
        """Auditing a corpus against itself reports no noise."""
        root = tiny_manifest.base_dir
        report = audit_report(root, root, tiny_manifest)
        assert all(r.mse_e6 == 0.0 for r in report.records)
        assert all(r.snr_db is None for r in report.records)
        assert report.mean_snr_db is None
        assert report.mean_stoi == pytest.approx(1.0, abs=1e-6)

    def test_known_delta(self, tmp_path, rng):
        """Per-file values match the perceptual measures on the same pair."""
        t = np.arange(16000) / 16000
        clean = AudioClip(np.round(0.4 * np.sin(2 * np.pi * 220 * t) * 32768) / 32768, 16000)
        noisy = AudioClip(np.round((clean.samples + rng.uniform(-0.005, 0.005, 16000)) * 32768) / 32768, 16000)
        write_wav(tmp_path / "clean" / "a.wav", clean)
        write_wav(tmp_path / "prot" / "a.wav", noisy)
        manifest = DatasetManifest([ManifestEntry("a.wav", 0)])
        record = audit_report(tmp_path / "clean", tmp_path / "prot", manifest).records[0]
        x, y = read_wav(tmp_path / "clean" / "a.wav").samples, read_wav(tmp_path / "prot" / "a.wav").samples
        assert record.snr_db == pytest.approx(snr_db(x, y - x))
        assert record.mse_e6 == pytest.approx(mse(x, y))
        assert 0.0 < record.stoi < 1.0

    def test_length_mismatch(self, tmp_path, tiny_manifest):
        """Counterparts must have equal length."""
        entry = tiny_manifest.entries[0]
        prot = tmp_path / "prot"
        shutil.copytree(tiny_manifest.base_dir, prot)
        clip = read_wav(prot / entry.path)
        write_wav(prot / entry.path, AudioClip(clip.samples[:-10], clip.rate))
        with pytest.raises(MetricsError, match="length"):
            audit_report(tiny_manifest.base_dir, prot, DatasetManifest([entry]))

    def test_missing_counterpart(self, tmp_path, tiny_manifest):
        """A missing protected file is an error."""
        with pytest.raises(MissingAudioError):
            audit_report(tiny_manifest.base_dir, tmp_path, tiny_manifest)

    def test_mean_snr(self):
        """Mean SNR averages only files with defined SNR."""
        report = AuditReport([AuditRecord("a", 20.0, 1.0, 0.9), AuditRecord("b", 30.0, 2.0, 0.8), AuditRecord("c", None, 0.0, 1.0)])
        assert report.mean_snr_db == 25.0
        assert report.mean_mse_e6 == 1.0

    def test_csv(self, tmp_path):
        """Header, six significant digits and a MEAN row."""
        report = AuditReport([AuditRecord("a.wav", 21.123456789, 1.5, 0.987654321), AuditRecord("b.wav", None, 0.0, 1.0)])
        path = write_audit_csv(tmp_path / "audit.csv", report)
        with path.open() as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == AUDIT_COLUMNS
        assert rows[1] == ["a.wav", "21.1235", "1.5", "0.987654"]
        assert rows[2][1] == "zero-noise"
        assert rows[-1][0] == "MEAN"
        assert rows[-1][1] == "21.1235"
