"""Condition harness: clean vs random noise vs error-minimizing corpora.

Builds the toy corpus, trains a generator encoder, writes one protected corpus
per condition, retrains fresh victims on each and scores them on the clean
held-out trials after every training epoch. Conditions run sequentially;
results.csv (final-epoch values) and best.csv (lowest values over training) are
rewritten after every row so partial results survive a failure, and each
condition leaves its per-epoch curve under epochs/.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from .audio_io import DatasetManifest, TrialList, load_manifest, load_trials
from .config import RunConfig
from .encoder import EncoderConfig, EncoderParams, TrainingHistory, save_params, train
from .metrics import AuditReport, DcfParams, audit_report, eer, min_dcf, score_trials
from .slem import ProtectionMode, protect_corpus, random_corpus
from .synthdata import MANIFEST_NAME, build_corpus

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("condition", "train_config", "eer_pct", "min_dcf", "mean_snr_db", "mean_mse_e6", "mean_stoi")
RESULTS_NAME = "results.csv"
BEST_COLUMNS = ("condition", "train_config", "best_eer_pct", "best_min_dcf", "best_epoch")
BEST_NAME = "best.csv"
EPOCH_COLUMNS = ("epoch", "loss", "eer_pct", "min_dcf")
EPOCHS_DIR = "epochs"
FAILED = "FAILED"

# HushspeakError is a RuntimeError, as are torch failures
CONDITION_ERRORS = (OSError, RuntimeError)

CLEAN, RANDOM, SLEM, PSLEM, SPEAKER = "clean", "random", "slem", "pslem", "speaker"


@dataclass
class Evaluation:
    params: EncoderParams
    eer_pct: float
    min_dcf: float
    final_loss: Optional[float] = None
    best_eer_pct: float = math.nan
    best_min_dcf: float = math.nan
    best_epoch: int = 0


@dataclass
class ConditionResult:
    condition: str
    train_config: str
    eer_pct: float = math.nan
    min_dcf: float = math.nan
    mean_snr_db: Optional[float] = None
    mean_mse_e6: Optional[float] = None
    mean_stoi: Optional[float] = None
    # lowest values seen over the training epochs
    best_eer_pct: float = math.nan
    best_min_dcf: float = math.nan
    best_epoch: int = 0
    failed: bool = False
    message: str = ""

    def best_row(self) -> List[str]:
        if self.failed:
            return [self.condition, self.train_config, FAILED, "", ""]
        return [self.condition, self.train_config, _fmt(self.best_eer_pct), _fmt(self.best_min_dcf), str(self.best_epoch)]

    def row(self) -> List[str]:
        if self.failed:
            return [self.condition, self.train_config, FAILED, "", "", "", ""]
        return [
            self.condition,
            self.train_config,
            _fmt(self.eer_pct),
            _fmt(self.min_dcf),
            _fmt(self.mean_snr_db),
            _fmt(self.mean_mse_e6),
            _fmt(self.mean_stoi),
        ]


@dataclass
class ExperimentResult:
    out_dir: Path
    results_path: Path
    rows: List[ConditionResult] = field(default_factory=list)

    @property
    def best_path(self) -> Path:
        return self.out_dir / BEST_NAME

    def epochs_path(self, condition: str, train_config: str) -> Path:
        return self.out_dir / EPOCHS_DIR / f"{condition}_{train_config}.csv"

    @property
    def ok(self) -> bool:
        return bool(self.rows) and not any(r.failed for r in self.rows)

    def get(self, condition: str, train_config: str) -> ConditionResult:
        for r in self.rows:
            if r.condition == condition and r.train_config == train_config:
                return r
        raise KeyError((condition, train_config))


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6g}"


def train_and_evaluate(
    manifest: DatasetManifest,
    trials: TrialList,
    encoder_config: EncoderConfig,
    cfg: RunConfig,
    dcf: Optional[DcfParams] = None,
    track_epochs: bool = False,
    on_epoch: Optional[Callable[[int, float, float, float], None]] = None,
) -> Evaluation:
    """Train a fresh encoder and score the trial list.

    With ``track_epochs`` the trials are scored after every epoch and the lowest
    EER / minDCF seen is kept alongside the final values.
    """
    dcf = dcf or cfg.dcf_params()
    best = {"eer": math.inf, "dcf": math.inf, "epoch": 0}

    def evaluate_epoch(epoch: int, params: EncoderParams, loss: float) -> None:
        scores = score_trials(params, trials, patch_length=cfg.patch_length)
        e, d = eer(scores), min_dcf(scores, dcf)
        if e < best["eer"]:
            best.update(eer=e, epoch=epoch)
        best["dcf"] = min(best["dcf"], d)
        logger.info("epoch %d: loss %.4f EER %.2f%% minDCF %.4f", epoch, loss, e, d)
        if on_epoch is not None:
            on_epoch(epoch, loss, e, d)

    history = TrainingHistory()
    params = train(
        manifest,
        encoder_config,
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        margin=cfg.margin,
        scale=cfg.scale,
        patch_length=cfg.patch_length,
        batch_size=cfg.train_batch_size,
        on_epoch=evaluate_epoch if track_epochs else None,
        history=history,
    )
    scores = score_trials(params, trials, patch_length=cfg.patch_length)
    result = Evaluation(
        params=params,
        eer_pct=eer(scores),
        min_dcf=min_dcf(scores, dcf),
        final_loss=history.epoch_losses[-1] if history.epoch_losses else None,
    )
    if track_epochs and history.epoch_losses:
        result.best_eer_pct, result.best_min_dcf, result.best_epoch = best["eer"], best["dcf"], best["epoch"]
    return result


def generator_config(cfg: RunConfig) -> EncoderConfig:
    """Generator encoder; seeded apart from the victims so it is not their twin."""
    return replace(cfg.encoder_config(cfg.generator_config), seed=(cfg.seed + 1) % 2 ** 64)


def _imperceptibility(report: AuditReport) -> Tuple[Optional[float], float, float]:
    return report.mean_snr_db, report.mean_mse_e6, report.mean_stoi


def _write_csv(path: Path, header: Tuple[str, ...], rows: List[List[str]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def run_experiment(
    cfg: RunConfig,
    out_dir: Path,
    on_row: Optional[Callable[[ConditionResult], None]] = None,
) -> ExperimentResult:
    out_dir = Path(out_dir)
    result = ExperimentResult(out_dir=out_dir, results_path=out_dir / RESULTS_NAME)
    victim_a, victim_b = cfg.generator_config, cfg.transfer_config
    plan = [
        (CLEAN, victim_a), (RANDOM, victim_a), (SLEM, victim_a), (PSLEM, victim_a), (SPEAKER, victim_a),
        (CLEAN, victim_b), (PSLEM, victim_b),
    ]

    def record(row: ConditionResult) -> None:
        result.rows.append(row)
        _write_csv(result.results_path, RESULT_COLUMNS, [r.row() for r in result.rows])
        _write_csv(result.best_path, BEST_COLUMNS, [r.best_row() for r in result.rows])
        if on_row is not None:
            on_row(row)

    try:
        corpus_dir = out_dir / "corpus"
        manifest_path, trials_path = build_corpus(cfg.corpus_spec(), corpus_dir)
        manifest, trials = load_manifest(manifest_path), load_trials(trials_path)
        generator = train(
            manifest,
            generator_config(cfg),
            epochs=cfg.epochs,
            learning_rate=cfg.learning_rate,
            margin=cfg.margin,
            scale=cfg.scale,
            patch_length=cfg.patch_length,
            batch_size=cfg.train_batch_size,
        )
        save_params(out_dir / "generator.hspk", generator)
    except CONDITION_ERRORS as e:
        logger.error("experiment setup failed: %s", e)
        for condition, name in plan:
            record(ConditionResult(condition, name, failed=True, message=str(e)))
        return result

    corpora: Dict[str, Path] = {CLEAN: corpus_dir}
    quality: Dict[str, Tuple[Optional[float], float, float]] = {CLEAN: (None, 0.0, 1.0)}
    failures: Dict[str, str] = {}
    base = cfg.slem_config()
    builders = {
        RANDOM: lambda d: random_corpus(
            manifest, d, cfg.epsilon, cfg.seed, cfg.mask_keep_fraction, cfg.patch_length, cfg.noise(), MANIFEST_NAME
        ),
        SLEM: lambda d: protect_corpus(
            generator, manifest, d, replace(base, plain_slem=True, mode=ProtectionMode.SAMPLE), MANIFEST_NAME
        ),
        PSLEM: lambda d: protect_corpus(
            generator, manifest, d, replace(base, plain_slem=False, mode=ProtectionMode.SAMPLE), MANIFEST_NAME
        ),
        SPEAKER: lambda d: protect_corpus(
            generator, manifest, d, replace(base, plain_slem=False, mode=ProtectionMode.SPEAKER), MANIFEST_NAME
        ),
    }
    for condition, build in builders.items():
        target = out_dir / condition
        try:
            build(target)
            quality[condition] = _imperceptibility(audit_report(corpus_dir, target, manifest, cfg.patch_length))
            corpora[condition] = target
            logger.info("built %s corpus in %s", condition, target)
        except CONDITION_ERRORS as e:
            logger.error("%s corpus failed: %s", condition, e)
            failures[condition] = str(e)

    for condition, name in plan:
        if condition in failures:
            record(ConditionResult(condition, name, failed=True, message=failures[condition]))
            continue
        epochs: List[List[str]] = []
        try:
            victim_manifest = load_manifest(corpora[condition] / MANIFEST_NAME)
            evaluation = train_and_evaluate(
                victim_manifest,
                trials,
                cfg.encoder_config(name),
                cfg,
                track_epochs=True,
                on_epoch=lambda epoch, loss, e, d: epochs.append([str(epoch), _fmt(loss), _fmt(e), _fmt(d)]),
            )
            _write_csv(result.epochs_path(condition, name), EPOCH_COLUMNS, epochs)
            snr, mse_e6, stoi = quality[condition]
            record(ConditionResult(
                condition, name, evaluation.eer_pct, evaluation.min_dcf, snr, mse_e6, stoi,
                best_eer_pct=evaluation.best_eer_pct,
                best_min_dcf=evaluation.best_min_dcf,
                best_epoch=evaluation.best_epoch,
            ))
        except CONDITION_ERRORS as e:
            logger.error("%s/%s failed: %s", condition, name, e)
            record(ConditionResult(condition, name, failed=True, message=str(e)))
    return result
