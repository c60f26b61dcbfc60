"""Subcommands for hushspeak.

- synth: build the toy corpus
- train / evaluate: train surrogates, report EER and minDCF
- protect: write an error-minimizing protected corpus
- audit: imperceptibility of a protected corpus
- experiment: the full condition comparison
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Optional

import torch
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from .audio_io import load_manifest, load_trials
from .config import RunConfig
from .encoder import NAMED_CONFIGS, TrainingHistory, load_params, save_params, train
from .errors import ConfigError, HushspeakError
from .experiment import BEST_COLUMNS, RESULT_COLUMNS, ConditionResult, run_experiment, train_and_evaluate
from .metrics import audit_report, eer, min_dcf, score_trials, write_audit_csv
from .slem import protect_corpus
from .synthdata import build_corpus

console = Console()
err_console = Console(stderr=True)

logger = logging.getLogger(__name__)


# --- helpers ---

def _fail(e: Exception) -> int:
    err_console.print(f"[red]error:[/red] {escape(str(e))}")
    return 1


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file (--config PATH or $HUSHSPEAK_CONFIG) < flags."""
    cfg = RunConfig.load(getattr(args, "config_file", None))
    names = RunConfig.field_names()
    overrides = {k: v for k, v in vars(args).items() if k in names and v is not None}
    cfg = cfg.with_overrides(overrides).validate()
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    return cfg


def _require(cfg: RunConfig, key: str) -> str:
    value = getattr(cfg, key)
    if not value:
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return value


def _fmt_opt(value: Optional[float]) -> str:
    return "zero-noise" if value is None else f"{value:.4g}"


# --- commands ---

def cmd_synth(args: argparse.Namespace) -> int:
    """Build the synthetic corpus."""
    try:
        cfg = resolve_config(args)
        out = Path(_require(cfg, "out"))
        manifest, trials = build_corpus(cfg.corpus_spec(), out)
    except (HushspeakError, OSError) as e:
        return _fail(e)
    console.print(f"[green]Corpus written to {escape(str(out))}[/green]")
    console.print(f"manifest: {manifest}")
    console.print(f"trials:   {trials}")
    return 0


def _print_epoch(epoch: int, loss: float, eer_pct: float, dcf: float) -> None:
    console.print(f"  epoch {epoch}: loss {loss:.4f}  EER={eer_pct:.2f}% minDCF={dcf:.4f}")


def cmd_train(args: argparse.Namespace) -> int:
    """Train a named encoder configuration and save the model file."""
    try:
        cfg = resolve_config(args)
        out = Path(_require(cfg, "out"))
        manifest = load_manifest(_require(cfg, "manifest"))
        encoder_config = cfg.encoder_config()

        if cfg.trials:
            trials = load_trials(cfg.trials)
            result = train_and_evaluate(
                manifest, trials, encoder_config, cfg, track_epochs=True, on_epoch=_print_epoch
            )
            params = result.params
        else:
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
                history=history,
            )
            result = None
        save_params(out, params)
    except (HushspeakError, OSError) as e:
        return _fail(e)

    console.print(f"[green]Model saved to {escape(str(out))}[/green] ({cfg.encoder}, {params.trained_epochs} epochs)")
    if result is not None:
        if result.final_loss is not None:
            console.print(f"final loss: {result.final_loss:.4f}")
        console.print(f"EER={result.eer_pct:.2f}% minDCF={result.min_dcf:.4f}")
        if result.best_epoch:
            console.print(
                f"best EER={result.best_eer_pct:.2f}% (epoch {result.best_epoch}) best minDCF={result.best_min_dcf:.4f}"
            )
    elif history.epoch_losses:
        console.print(f"final loss: {history.epoch_losses[-1]:.4f}")
    return 0


def cmd_protect(args: argparse.Namespace) -> int:
    """Generate perturbations and write the protected corpus mirror."""
    try:
        cfg = resolve_config(args)
        params = load_params(_require(cfg, "model"))
        manifest_path = Path(_require(cfg, "manifest"))
        manifest = load_manifest(manifest_path)
        out = Path(_require(cfg, "out"))
        slem_config = cfg.slem_config()
        report = protect_corpus(params, manifest, out, slem_config, manifest_name=manifest_path.name)
    except (HushspeakError, OSError) as e:
        return _fail(e)

    n_sources = len({p.source for p in report.perturbations})
    worst = max((r.linf for r in report.records), default=0.0)
    label = "plain" if slem_config.plain_slem else "perceptual"
    console.print(
        f"[green]Protected {len(report.records)} utterances[/green] "
        f"({slem_config.mode.value}-wise, {label}, {n_sources} perturbation(s)) -> {escape(str(out))}"
    )
    console.print(f"max |delta| = {worst:.6g} (epsilon {slem_config.epsilon})")
    console.print(f"log: {report.log_path}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Train a fresh model (or load --model) and score the trial list."""
    try:
        cfg = resolve_config(args)
        trials = load_trials(_require(cfg, "trials"))
        if cfg.model:
            params = load_params(cfg.model)
            scores = score_trials(params, trials, patch_length=cfg.patch_length)
            eer_pct, dcf = eer(scores), min_dcf(scores, cfg.dcf_params())
            result = None
        else:
            manifest = load_manifest(_require(cfg, "manifest"))
            result = train_and_evaluate(
                manifest, trials, cfg.encoder_config(), cfg, track_epochs=True, on_epoch=_print_epoch
            )
            eer_pct, dcf = result.eer_pct, result.min_dcf
    except (HushspeakError, OSError) as e:
        return _fail(e)

    console.print(f"EER={eer_pct:.4f}% minDCF={dcf:.4f}")
    if result is not None and result.best_epoch:
        console.print(
            f"best EER={result.best_eer_pct:.4f}% (epoch {result.best_epoch}) best minDCF={result.best_min_dcf:.4f}"
        )
    return 0


def cmd_audit(args: argparse.Namespace) -> int:
    """Compare clean and protected directories over the manifest."""
    try:
        cfg = resolve_config(args)
        clean = Path(_require(cfg, "clean"))
        protected = Path(_require(cfg, "protected"))
        manifest = load_manifest(_require(cfg, "manifest"))
        out = Path(cfg.out) if cfg.out else protected / "audit.csv"
        report = audit_report(clean, protected, manifest, cfg.patch_length)
        write_audit_csv(out, report)
    except (HushspeakError, OSError) as e:
        return _fail(e)

    console.print(
        f"MEAN snr_db={_fmt_opt(report.mean_snr_db)} mse_e6={report.mean_mse_e6:.4g} stoi={report.mean_stoi:.4f}"
    )
    console.print(f"audit: {out}")
    return 0


def _results_table(rows: list[ConditionResult]) -> Table:
    table = Table(title="Protection experiment")
    for name in RESULT_COLUMNS + BEST_COLUMNS[2:]:
        table.add_column(name, justify="left" if name in ("condition", "train_config") else "right")
    for r in rows:
        cells = r.row() + r.best_row()[2:]
        style = "red" if r.failed else None
        table.add_row(*cells, style=style)
    return table


def cmd_experiment(args: argparse.Namespace) -> int:
    """Run every condition end to end and write results.csv."""
    try:
        cfg = resolve_config(args)
        out = Path(_require(cfg, "out"))
        cfg.save(out / "run.cfg")
        result = run_experiment(
            cfg, out, on_row=lambda r: console.print(f"  {r.condition}/{r.train_config}: {'FAILED' if r.failed else 'done'}")
        )
    except (HushspeakError, OSError) as e:
        return _fail(e)

    console.print(_results_table(result.rows))
    console.print(f"results: {result.results_path}")
    console.print(f"best over training: {result.best_path}")
    for r in result.rows:
        if r.failed:
            err_console.print(f"[red]{r.condition}/{r.train_config} failed:[/red] {escape(r.message)}")
    return 0 if result.ok else 1


# --- parser wiring ---

def _common(parent: argparse.ArgumentParser) -> None:
    # re-declared on each subcommand so the flags work on either side of it
    parent.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Random seed (u64)")
    parent.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="Torch threads (0 = auto)")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", dest="encoder", choices=sorted(NAMED_CONFIGS), help="Encoder configuration")
    p.add_argument("--epochs", type=int, help="Training epochs (default 8)")
    p.add_argument("--lr", dest="learning_rate", type=float, help="Learning rate (default 0.05)")
    p.add_argument("--margin", type=float, help="Angular margin (default 0.2)")
    p.add_argument("--scale", type=float, help="Logit scale (default 30)")
    p.add_argument("--batch-size", dest="train_batch_size", type=int, help="Training batch size (default 32)")
    p.add_argument("--patch-length", type=int, help="Fixed patch in samples (default 32000)")


def add_commands(parser: argparse.ArgumentParser, subparsers: argparse._SubParsersAction) -> None:
    """Add every hushspeak subcommand to the main parser."""

    # synth
    p_synth = subparsers.add_parser("synth", help="Generate the synthetic toy corpus")
    _common(p_synth)
    p_synth.add_argument("--out", help="Output directory")
    p_synth.add_argument("--speakers", dest="n_speakers", type=int, help="Number of speakers (default 20)")
    p_synth.add_argument("--utterances", dest="utterances_per_speaker", type=int, help="Utterances per speaker (default 30)")
    p_synth.add_argument("--duration", dest="duration_s", type=float, help="Utterance duration in seconds (default 2.0)")
    p_synth.set_defaults(func=cmd_synth)

    # train
    p_train = subparsers.add_parser("train", help="Train a surrogate encoder")
    _common(p_train)
    p_train.add_argument("--manifest", help="Training manifest (path,speaker_id)")
    p_train.add_argument("--trials", help="Trial list for per-epoch EER")
    p_train.add_argument("--out", help="Model file to write")
    _training_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    # protect
    p_protect = subparsers.add_parser("protect", help="Write an error-minimizing protected corpus")
    _common(p_protect)
    p_protect.add_argument("--model", help="Generator model file")
    p_protect.add_argument("--manifest", help="Manifest of the corpus to protect")
    p_protect.add_argument("--out", help="Output directory for the protected mirror")
    p_protect.add_argument("--epsilon", type=float, help="Per-sample bound (default 0.005)")
    p_protect.add_argument("--mode", choices=["sample", "speaker"], help="Perturbation granularity")
    p_protect.add_argument("--steps", type=int, help="Gradient steps (default 100)")
    p_protect.add_argument("--step-size", type=float, help="Step size (default epsilon/10)")
    p_protect.add_argument("--keep-fraction", dest="mask_keep_fraction", type=float, help="Masked fraction (default 0.5)")
    p_protect.add_argument("--alpha", type=float, help="AAM loss weight")
    p_protect.add_argument("--beta", type=float, help="STFT loss weight")
    p_protect.add_argument("--gamma", type=float, help="STOI loss weight")
    p_protect.add_argument("--lam", type=float, help="Envelope distance weight inside the STOI loss")
    p_protect.add_argument("--plain-slem", action="store_true", default=None, help="Drop the perceptual losses")
    p_protect.add_argument("--batch-size", type=int, help="Clips optimized together (default 16)")
    p_protect.add_argument("--patch-length", type=int, help="Fixed patch in samples (default 32000)")
    p_protect.set_defaults(func=cmd_protect)

    # evaluate
    p_eval = subparsers.add_parser("evaluate", help="Train on a corpus and report EER / minDCF")
    _common(p_eval)
    p_eval.add_argument("--manifest", help="Training manifest (clean or protected)")
    p_eval.add_argument("--trials", help="Held-out trial list")
    p_eval.add_argument("--model", help="Score with this model instead of training")
    _training_flags(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    # audit
    p_audit = subparsers.add_parser("audit", help="SNR / MSE / STOI of a protected corpus")
    _common(p_audit)
    p_audit.add_argument("--clean", help="Clean corpus directory")
    p_audit.add_argument("--protected", help="Protected corpus directory")
    p_audit.add_argument("--manifest", help="Manifest listing the files to compare")
    p_audit.add_argument("--out", help="Audit CSV (default <protected>/audit.csv)")
    p_audit.add_argument("--patch-length", type=int, help="Fixed patch in samples (default 32000)")
    p_audit.set_defaults(func=cmd_audit)

    # experiment
    p_exp = subparsers.add_parser("experiment", help="Run the full protection experiment")
    _common(p_exp)
    p_exp.add_argument("--out", help="Experiment directory")
    p_exp.add_argument("--generator-config", choices=sorted(NAMED_CONFIGS), help="Generator and victim config")
    p_exp.add_argument("--transfer-config", choices=sorted(NAMED_CONFIGS), help="Transfer victim config")
    p_exp.add_argument("--epochs", type=int, help="Training epochs (default 8)")
    p_exp.add_argument("--steps", type=int, help="Gradient steps (default 100)")
    p_exp.add_argument("--epsilon", type=float, help="Per-sample bound (default 0.005)")
    p_exp.add_argument("--noise-kind", choices=["uniform", "gaussian"], help="Random-noise control")
    p_exp.add_argument("--speakers", dest="n_speakers", type=int, help="Number of speakers (default 20)")
    p_exp.add_argument("--utterances", dest="utterances_per_speaker", type=int, help="Utterances per speaker")
    p_exp.add_argument("--duration", dest="duration_s", type=float, help="Utterance duration in seconds (default 2.0)")
    p_exp.add_argument("--patch-length", type=int, help="Fixed patch in samples (default 32000)")
    p_exp.set_defaults(func=cmd_experiment)


def run_command(args: argparse.Namespace) -> int:
    """Run the selected subcommand; -1 when none was given."""
    if hasattr(args, "func") and args.func:
        return args.func(args)
    return -1
