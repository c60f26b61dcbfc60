"""Tests for RunConfig loading, overrides and projections."""

import pytest

from hushspeak.config import CONFIG_ENV, RunConfig
from hushspeak.errors import ConfigError
from hushspeak.slem import NoiseKind, ProtectionMode


class TestDefaults:
    """Tests for the built-in defaults."""

    def test_values(self):
        """Defaults match the documented run."""
        cfg = RunConfig()
        assert (cfg.epsilon, cfg.steps, cfg.epochs) == (0.005, 100, 8)
        assert (cfg.alpha, cfg.beta, cfg.gamma, cfg.lam) == (1.0, 0.005, 0.01, 0.1)
        assert (cfg.n_speakers, cfg.utterances_per_speaker, cfg.duration_s) == (20, 30, 2.0)
        assert cfg.p_target == 0.01

    def test_no_file_means_defaults(self, monkeypatch):
        """Without a path or environment variable the defaults apply."""
        monkeypatch.delenv(CONFIG_ENV, raising=False)
        assert RunConfig.load() == RunConfig()

    def test_seed_range(self):
        """Seeds must be unsigned 64-bit."""
        with pytest.raises(ConfigError):
            RunConfig(seed=-1)


class TestLoad:
    """Tests for RunConfig.load."""

    def test_parses_types(self, tmp_path):
        """Ints, floats, bools, strings and comments."""
        p = tmp_path / "run.cfg"
        p.write_text(
            "# toy run\n"
            "seed = 42\n"
            "epsilon = 0.01   # louder\n"
            "plain_slem = yes\n"
            "mode = speaker\n"
            "\n"
            "step_size = 0.002\n"
            "manifest = data/train.csv\n"
        )
        cfg = RunConfig.load(p)
        assert cfg.seed == 42
        assert cfg.epsilon == 0.01
        assert cfg.plain_slem is True
        assert cfg.mode == "speaker"
        assert cfg.step_size == 0.002
        assert cfg.manifest == "data/train.csv"

    def test_unknown_key_names_line(self, tmp_path):
        """Unknown keys report the file and line."""
        p = tmp_path / "run.cfg"
        p.write_text("seed = 1\n\nwibble = 2\n")
        with pytest.raises(ConfigError, match="line 3: unknown key 'wibble'"):
            RunConfig.load(p)

    def test_bad_value(self, tmp_path):
        """Unparsable values are config errors."""
        p = tmp_path / "run.cfg"
        p.write_text("epochs = many\n")
        with pytest.raises(ConfigError, match="bad value for epochs"):
            RunConfig.load(p)

    def test_bad_bool(self, tmp_path):
        """Booleans accept only the usual spellings."""
        p = tmp_path / "run.cfg"
        p.write_text("plain_slem = maybe\n")
        with pytest.raises(ConfigError):
            RunConfig.load(p)

    def test_missing_equals(self, tmp_path):
        """Lines need `key = value`."""
        p = tmp_path / "run.cfg"
        p.write_text("seed 1\n")
        with pytest.raises(ConfigError, match="line 1"):
            RunConfig.load(p)

    def test_missing_file(self, tmp_path):
        """A named file must exist."""
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.load(tmp_path / "none.cfg")

    def test_env_var(self, tmp_path, monkeypatch):
        """$HUSHSPEAK_CONFIG names the file when no path is given."""
        p = tmp_path / "env.cfg"
        p.write_text("steps = 7\n")
        monkeypatch.setenv(CONFIG_ENV, str(p))
        assert RunConfig.load().steps == 7

    def test_explicit_path_beats_env(self, tmp_path, monkeypatch):
        """An explicit path wins over the environment."""
        env, explicit = tmp_path / "env.cfg", tmp_path / "explicit.cfg"
        env.write_text("steps = 7\n")
        explicit.write_text("steps = 9\n")
        monkeypatch.setenv(CONFIG_ENV, str(env))
        assert RunConfig.load(explicit).steps == 9

    def test_save_then_load(self, tmp_path):
        """save writes a file load reads back unchanged."""
        cfg = RunConfig(seed=2 ** 64 - 1, epsilon=0.0025, plain_slem=True, out="runs/a")
        assert RunConfig.load(cfg.save(tmp_path / "run.cfg")) == cfg


class TestOverrides:
    """Tests for with_overrides."""

    def test_none_is_ignored(self, tmp_path):
        """Flags left unset do not clobber file values."""
        p = tmp_path / "run.cfg"
        p.write_text("epochs = 3\n")
        cfg = RunConfig.load(p).with_overrides({"epochs": None, "steps": 4})
        assert (cfg.epochs, cfg.steps) == (3, 4)

    def test_unknown(self):
        """Unknown override keys are rejected."""
        with pytest.raises(ConfigError):
            RunConfig().with_overrides({"bogus": 1})


class TestProjections:
    """Tests for the typed projections and validate."""

    def test_slem_config(self):
        """Perturbation settings carry over."""
        s = RunConfig(epsilon=0.01, mode="speaker", beta=0.5, patch_length=16000).slem_config()
        assert s.epsilon == 0.01
        assert s.mode is ProtectionMode.SPEAKER
        assert s.weights.beta == 0.5
        assert s.patch_length == 16000

    def test_encoder_config_uses_seed(self):
        """The run seed seeds the encoder."""
        assert RunConfig(seed=5).encoder_config("cfgD").seed == 5
        assert RunConfig(encoder="cfgD").feature_config().n_mels == 48

    def test_corpus_and_dcf(self):
        """Corpus and cost settings carry over."""
        cfg = RunConfig(n_speakers=4, seed=3, c_fa=2.0)
        assert cfg.corpus_spec().n_speakers == 4
        assert cfg.corpus_spec().seed == 3
        assert cfg.dcf_params().c_fa == 2.0

    def test_noise(self):
        """noise_kind maps onto NoiseKind."""
        assert RunConfig(noise_kind="gaussian").noise() is NoiseKind.GAUSSIAN
        with pytest.raises(ConfigError):
            RunConfig(noise_kind="pink").noise()

    @pytest.mark.parametrize(
        "kw",
        [{"epsilon": -0.1}, {"encoder": "cfgZ"}, {"p_target": 0.0}, {"n_speakers": 40}, {"mode": "word"}],
    )
    def test_validate(self, kw):
        """Invalid values surface as ConfigError."""
        with pytest.raises(ConfigError):
            RunConfig(**kw).validate()

    def test_validate_defaults(self):
        """The defaults are valid."""
        assert RunConfig().validate() == RunConfig()
