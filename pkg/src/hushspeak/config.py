from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .errors import ConfigError, HushspeakError

APP = "hushspeak"
CONFIG_ENV = "HUSHSPEAK_CONFIG"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

# value types of the fields that default to None
_OPTIONAL_TYPES = {
    "step_size": float,
    "manifest": str,
    "trials": str,
    "model": str,
    "out": str,
    "clean": str,
    "protected": str,
}


@dataclass
class RunConfig:
    """Every tunable of a run, flat.

    Precedence: built-in defaults < config file (``key = value``) < command-line flags.
    """
    seed: int = 0
    threads: int = 0                 # 0 = torch default

    # encoder / training
    encoder: str = "cfgA"
    generator_config: str = "cfgA"
    transfer_config: str = "cfgB"
    epochs: int = 8
    learning_rate: float = 0.05
    margin: float = 0.2
    scale: float = 30.0
    train_batch_size: int = 32
    patch_length: int = 32000

    # perturbation
    epsilon: float = 0.005
    steps: int = 100
    step_size: Optional[float] = None
    mask_keep_fraction: float = 0.5
    alpha: float = 1.0
    beta: float = 0.005
    gamma: float = 0.01
    lam: float = 0.1
    mode: str = "sample"
    plain_slem: bool = False
    batch_size: int = 16
    noise_kind: str = "uniform"

    # detection cost
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    # toy corpus
    n_speakers: int = 20
    utterances_per_speaker: int = 30
    duration_s: float = 2.0
    rate: int = 16000

    # paths
    manifest: Optional[str] = None
    trials: Optional[str] = None
    model: Optional[str] = None
    out: Optional[str] = None
    clean: Optional[str] = None
    protected: Optional[str] = None

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.threads < 0:
            raise ConfigError(f"threads must be non-negative, got {self.threads}")

    # --- construction ---

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @staticmethod
    def resolve_path(path: Optional[str | Path] = None) -> Optional[Path]:
        """Explicit path, else $HUSHSPEAK_CONFIG, else no file."""
        if path:
            return Path(path)
        env = os.environ.get(CONFIG_ENV)
        return Path(env) if env else None

    @classmethod
    def load(cls, path: Optional[str | Path] = None) -> "RunConfig":
        path = cls.resolve_path(path)
        if path is None:
            return cls()
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")

        values: Dict[str, Any] = {}
        for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"{path}: line {number}: expected `key = value`")
            if key not in cls.field_names():
                raise ConfigError(f"{path}: line {number}: unknown key {key!r}")
            try:
                values[key] = _parse_value(key, value)
            except ValueError as e:
                raise ConfigError(f"{path}: line {number}: bad value for {key}: {e}") from e
        return cls().with_overrides(values)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        unknown = set(overrides) - self.field_names()
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    # --- projections onto the owning types ---

    def encoder_config(self, name: Optional[str] = None):
        from .encoder import named_config
        return named_config(name or self.encoder, seed=self.seed)

    def feature_config(self):
        return self.encoder_config().feature_config()

    def slem_config(self):
        from .perceptual import PHLWeights
        from .slem import SlemConfig
        return SlemConfig(
            epsilon=self.epsilon,
            steps=self.steps,
            step_size=self.step_size,
            mask_keep_fraction=self.mask_keep_fraction,
            patch_length=self.patch_length,
            weights=PHLWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma, lam=self.lam),
            mode=self.mode,
            plain_slem=self.plain_slem,
            batch_size=self.batch_size,
            margin=self.margin,
            scale=self.scale,
        )

    def dcf_params(self):
        from .metrics import DcfParams
        return DcfParams(p_target=self.p_target, c_miss=self.c_miss, c_fa=self.c_fa)

    def corpus_spec(self):
        from .synthdata import CorpusSpec
        return CorpusSpec(
            n_speakers=self.n_speakers,
            utterances_per_speaker=self.utterances_per_speaker,
            duration_s=self.duration_s,
            rate=self.rate,
            seed=self.seed,
        )

    def noise(self):
        from .slem import NoiseKind
        try:
            return NoiseKind(self.noise_kind)
        except ValueError:
            raise ConfigError(f"noise_kind must be uniform or gaussian, got {self.noise_kind!r}")

    def validate(self) -> "RunConfig":
        """Run every projection so each value meets its owning type's invariants."""
        try:
            for name in (self.encoder, self.generator_config, self.transfer_config):
                self.encoder_config(name)
            self.slem_config()
            self.dcf_params()
            self.corpus_spec()
            self.noise()
        except ConfigError:
            raise
        except (HushspeakError, ValueError) as e:
            raise ConfigError(f"invalid configuration: {e}") from e
        return self

    # --- persistence ---

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{k} = {_format_value(v)}" for k, v in self.to_dict().items() if v is not None]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def _parse_value(key: str, raw: str) -> Any:
    default = RunConfig.__dataclass_fields__[key].default
    kind = _OPTIONAL_TYPES.get(key) if default is None else type(default)
    if kind is bool:
        lowered = raw.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw, 0)
    if kind is float:
        return float(raw)
    return raw


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
