"""Tests for the condition harness."""

import csv
from dataclasses import replace
from unittest.mock import patch

import pytest

from hushspeak import experiment
from hushspeak.config import RunConfig
from hushspeak.errors import SlemError
from hushspeak.experiment import (
    BEST_COLUMNS,
    CLEAN,
    EPOCH_COLUMNS,
    FAILED,
    PSLEM,
    RANDOM,
    RESULT_COLUMNS,
    SLEM,
    SPEAKER,
    run_experiment,
)

# 3 speakers x 3 training utterances, half-second patches
TINY_RUN = RunConfig(
    n_speakers=3, utterances_per_speaker=5, duration_s=0.5, epochs=2, steps=1, patch_length=8000, train_batch_size=8
)

PLAN = [
    (CLEAN, "cfgA"), (RANDOM, "cfgA"), (SLEM, "cfgA"), (PSLEM, "cfgA"), (SPEAKER, "cfgA"),
    (CLEAN, "cfgB"), (PSLEM, "cfgB"),
]
PROTECTED = {(SLEM, "cfgA"), (PSLEM, "cfgA"), (SPEAKER, "cfgA"), (PSLEM, "cfgB")}


def _rows(path):
    with path.open() as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    return run_experiment(TINY_RUN, tmp_path_factory.mktemp("experiment"))


class TestRunExperiment:
    """Tests for run_experiment outputs."""

    def test_results_rows(self, tiny_run):
        """Seven rows in plan order under the fixed header."""
        rows = _rows(tiny_run.results_path)
        assert tuple(rows[0]) == RESULT_COLUMNS
        assert [(r[0], r[1]) for r in rows[1:]] == PLAN
        assert tiny_run.ok

    def test_epoch_curves(self, tiny_run):
        """One curve per row with a line per epoch; the last epoch is the reported value."""
        for condition, name in PLAN:
            rows = _rows(tiny_run.epochs_path(condition, name))
            assert tuple(rows[0]) == EPOCH_COLUMNS
            assert [int(r[0]) for r in rows[1:]] == [1, 2]
            assert all(0.0 <= float(r[2]) <= 100.0 for r in rows[1:])
            final = tiny_run.get(condition, name)
            assert float(rows[-1][2]) == pytest.approx(final.eer_pct, rel=1e-5)

    def test_best_over_training(self, tiny_run):
        """best.csv holds the lowest EER and minDCF of each curve."""
        rows = _rows(tiny_run.best_path)
        assert tuple(rows[0]) == BEST_COLUMNS
        assert [(r[0], r[1]) for r in rows[1:]] == PLAN
        for row in rows[1:]:
            curve = _rows(tiny_run.epochs_path(row[0], row[1]))[1:]
            assert float(row[2]) == pytest.approx(min(float(r[2]) for r in curve), rel=1e-5)
            assert float(row[3]) == pytest.approx(min(float(r[3]) for r in curve), rel=1e-5)
            assert int(row[4]) in (1, 2)


class TestFailures:
    """Failures become FAILED marker rows instead of aborting the run."""

    @pytest.mark.parametrize(
        "error",
        [SlemError("no usable gradient"), OSError("disk full"), RuntimeError("tensor shape mismatch")],
        ids=["library", "os", "torch"],
    )
    def test_failed_corpus_marks_rows(self, tmp_path, error):
        """A failing protection marks its rows FAILED; the other rows still run."""
        with patch.object(experiment, "protect_corpus", side_effect=error):
            result = run_experiment(replace(TINY_RUN, epochs=1), tmp_path)
        rows = _rows(result.results_path)[1:]
        assert [(r[0], r[1]) for r in rows] == PLAN
        assert {(r[0], r[1]) for r in rows if r[2] == FAILED} == PROTECTED
        assert all(r[2:] == [FAILED, "", "", "", ""] for r in rows if r[2] == FAILED)
        assert not result.ok
        assert str(error) in result.get(SLEM, "cfgA").message
        best = _rows(result.best_path)[1:]
        assert sum(r[2] == FAILED for r in best) == len(PROTECTED)

    def test_setup_failure(self, tmp_path):
        """If the corpus cannot be built every row is FAILED."""
        with patch.object(experiment, "build_corpus", side_effect=OSError("read-only file system")):
            result = run_experiment(TINY_RUN, tmp_path)
        rows = _rows(result.results_path)[1:]
        assert len(rows) == 7
        assert all(r[2] == FAILED for r in rows)
