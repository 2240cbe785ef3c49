"""Plain-text key = value run configuration with defaults, range checks and environment overrides."""

from __future__ import annotations

import math
import os
import re
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

SCENARIOS = ("meanfield", "dressing", "commute", "bogoliubov", "dressing-identity", "renorm",
             "oracle-beta", "oracle-phase", "oracle-norm", "verify-all")

ENV_PREFIX = "NELSONLAB_"


class ConfigError(ValueError):
    """Invalid configuration text or values; the CLI maps it to exit code 2."""


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = "verify-all"
    d: int = 1
    L: float = 16 * math.pi
    M: int = 256
    theta: float = 1.0
    cutoff: float | None = None  # None means the grid maximum
    dt: float = 1e-3
    t_final: float = 1.0
    alpha_amp: float = 1.0
    N: int = 2
    m_b: int = 4
    m_a: int = 3
    n_max: int = 4
    K: float | None = None  # None means K = Lambda
    out: str = "runs"
    seed: int = 0
    threads: int = 1

    def as_dict(self) -> dict:
        return asdict(self)


KEYS = tuple(f.name for f in fields(ScenarioConfig))
_INT = {"d", "M", "N", "m_b", "m_a", "n_max", "seed", "threads"}
_OPTIONAL = {"cutoff", "K"}
_STR = {"scenario", "out"}
_NUM = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)?\s*\*?\s*(pi|π)?$")


def _parse_float(text: str) -> float:
    m = _NUM.match(text.strip())
    if not m or not (m.group(1) or m.group(2)):
        raise ValueError(f"not a number: {text!r}")
    val = float(m.group(1)) if m.group(1) else 1.0
    return val * math.pi if m.group(2) else val


def _parse_value(key: str, text: str):
    text = text.strip()
    if key in _STR:
        return text
    if key in _OPTIONAL and text.lower() in ("", "none", "max", "grid-max"):
        return None
    if key in _INT:
        return int(text)
    return _parse_float(text)


def parse_text(text: str, source: str = "<config>") -> dict:
    """Parse key = value lines; '#' starts a comment.  Errors name the line."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = _parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


def env_overrides(environ=None) -> dict:
    """NELSONLAB_<KEY> variables (key matched case-insensitively)."""
    environ = os.environ if environ is None else environ
    lower = {k.lower(): k for k in KEYS}
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = lower.get(name[len(ENV_PREFIX):].lower())
        if key is None:
            raise ConfigError(f"environment: unknown key in {name}")
        try:
            out[key] = _parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"environment: bad value for {name}: {exc}") from None
    return out


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    def need(ok: bool, msg: str):
        if not ok:
            raise ConfigError(msg)

    need(cfg.scenario in SCENARIOS, f"scenario must be one of {', '.join(SCENARIOS)}; got {cfg.scenario!r}")
    need(cfg.d in (1, 2, 3), "d must be 1, 2 or 3")
    need(cfg.M % 2 == 0, "M must be even")
    need(cfg.M >= 4, "M must be at least 4")
    need(cfg.L > 0 and math.isfinite(cfg.L), "L must be positive")
    need(0.0 <= cfg.theta <= 1.0, "theta must lie in [0, 1]")
    need(cfg.cutoff is None or cfg.cutoff > 0, "cutoff must be positive")
    need(cfg.dt > 0, "dt must be positive")
    need(cfg.t_final >= 0, "t_final must be nonnegative")
    need(cfg.alpha_amp >= 0, "alpha_amp must be nonnegative")
    need(1 <= cfg.N <= 10, "N must lie in [1, 10]")
    need(cfg.m_b >= 1 and cfg.m_a >= 1, "m_b and m_a must be positive")
    need(cfg.n_max >= 1, "n_max must be positive")
    need(cfg.K is None or cfg.K > 0, "K must be positive")
    need(cfg.threads >= 1, "threads must be positive")
    need(cfg.seed >= 0, "seed must be nonnegative")
    return cfg


def build_config(values: dict) -> ScenarioConfig:
    return validate(replace(ScenarioConfig(), **values))


def load_config(path: str | Path | None, environ=None, **overrides) -> ScenarioConfig:
    """Defaults, then the file, then NELSONLAB_ variables, then explicit overrides (None entries ignored)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_text(p.read_text(), str(p)))
    values.update(env_overrides(environ))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(values)
