import json
import math

import pytest

from nelsonlab import cli
from nelsonlab.config import ConfigError, ScenarioConfig, env_overrides, load_config, parse_text


def _write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestConfig:
    """Parsing, validation and precedence."""

    def test_empty_file_defaults(self, tmp_path):
        assert load_config(_write(tmp_path, ""), environ={}) == ScenarioConfig()

    def test_comments_and_pi(self):
        vals = parse_text("# header\nL = 16*pi  # box\nM = 128\ncutoff = grid-max\n")
        assert vals == {"L": pytest.approx(16 * math.pi), "M": 128, "cutoff": None}

    def test_odd_grid(self, tmp_path):
        with pytest.raises(ConfigError, match="M must be even"):
            load_config(_write(tmp_path, "M = 255\n"), environ={})

    def test_unknown_key_named_with_line(self, tmp_path):
        with pytest.raises(ConfigError, match=r"run\.cfg:2: unknown key 'gamma'"):
            load_config(_write(tmp_path, "M = 64\ngamma = 3\n"), environ={})

    def test_bad_value_line(self):
        with pytest.raises(ConfigError, match=r":3: bad value for 'dt'"):
            parse_text("M = 64\n\ndt = fast\n")

    def test_duplicate_and_missing_equals(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_text("M = 64\nM = 32\n")
        with pytest.raises(ConfigError, match="expected 'key = value'"):
            parse_text("M 64\n")

    def test_range_checks(self):
        for text in ("theta = 1.5", "dt = 0", "N = 11", "d = 4", "threads = 0"):
            with pytest.raises(ConfigError):
                load_config(None, environ={}, **parse_text(text))

    def test_env_override(self, tmp_path):
        cfg = load_config(_write(tmp_path, "theta = 0.25\nM = 64\n"), environ={"NELSONLAB_THETA": "0.5"})
        assert cfg.theta == 0.5 and cfg.M == 64

    def test_env_unknown(self):
        with pytest.raises(ConfigError, match="NELSONLAB_BOGUS"):
            env_overrides({"NELSONLAB_BOGUS": "1"})

    def test_explicit_override_wins(self, tmp_path):
        cfg = load_config(_write(tmp_path, "seed = 1\n"), environ={"NELSONLAB_SEED": "2"}, seed=3, out=None)
        assert cfg.seed == 3 and cfg.out == "runs"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.cfg", environ={})


SMALL_MF = "scenario = meanfield\nL = 8*pi\nM = 64\nt_final = 0.05\nalpha_amp = 0.5\n"


class TestRunner:
    """Scenario execution, outputs and exit codes."""

    def test_meanfield_outputs(self, tmp_path, monkeypatch):
        monkeypatch.delenv("NELSONLAB_SEED", raising=False)
        cfg_path = _write(tmp_path, SMALL_MF)
        out = tmp_path / "o"
        code = cli.main([str("meanfield"), "--config", str(cfg_path), "--out", str(out)])
        assert code == cli.EXIT_PASS
        man = json.loads((out / "manifest.json").read_text())
        assert man["passed"] and man["config"]["M"] == 64 and man["version"]
        header = (out / "meanfield.csv").read_text().splitlines()[0]
        assert header == "t,norm,energy"

    def test_deterministic_csv(self, tmp_path):
        cfg = load_config(_write(tmp_path, SMALL_MF), environ={})
        cli.run_scenario(cfg, tmp_path / "a")
        cli.run_scenario(cfg, tmp_path / "b")
        assert (tmp_path / "a" / "meanfield.csv").read_bytes() == (tmp_path / "b" / "meanfield.csv").read_bytes()

    def test_renorm_slope_field(self, tmp_path):
        cfg = load_config(None, environ={}, scenario="renorm", theta=1.0)
        man, code = cli.run_scenario(cfg, tmp_path)
        assert code == cli.EXIT_PASS
        assert abs(man["instance"]["fit"]["slope"] - 4 * math.pi) < 0.02 * 4 * math.pi
        assert "E_pair" in (tmp_path / "renorm.csv").read_text().splitlines()[0]

    def test_usage_errors(self, tmp_path, capsys):
        assert cli.main(["no-such-scenario"]) == cli.EXIT_USAGE
        bad = _write(tmp_path, "M = 255\n")
        assert cli.main(["renorm", "--config", str(bad), "--out", str(tmp_path)]) == cli.EXIT_USAGE
        assert "M must be even" in capsys.readouterr().err

    def test_failing_check_exit(self, tmp_path):
        # a coarse step cannot hold the conservation tolerance
        cfg = load_config(_write(tmp_path, SMALL_MF), environ={}, dt=0.02, t_final=0.2)
        man, code = cli.run_scenario(cfg, tmp_path)
        assert code == cli.EXIT_FAIL and not man["passed"]

    def test_oracle_requires_tiny(self, tmp_path):
        cfg = load_config(None, environ={}, scenario="oracle-norm", m_b=5)
        with pytest.raises(ConfigError):
            cli.run_scenario(cfg, tmp_path)

    def test_oracle_norm_info(self, tmp_path):
        cfg = load_config(None, environ={}, scenario="oracle-norm", N=2, n_max=3, t_final=0.1)
        man, _ = cli.run_scenario(cfg, tmp_path)
        assert set(man["instance"]) >= {"N", "m_b", "m_a", "n_max", "cutoff", "dropped_weight"}

    def test_runtime_error_recorded(self, tmp_path, monkeypatch):
        def boom(cfg):
            raise FloatingPointError("blew up")
        monkeypatch.setitem(cli.RUNNERS, "renorm", boom)
        man, code = cli.run_scenario(load_config(None, environ={}, scenario="renorm"), tmp_path)
        assert code == cli.EXIT_FAIL and "blew up" in man["error"]
