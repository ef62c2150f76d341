"""Run configuration: JSON file plus flag overrides, validated against a fixed schema."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .graph import GraphConfig
from .metrics import MetricsConfig
from .restore import SolverConfig
from .synthetic import SHAPES

COMMANDS = ("sample", "superres", "denoise", "balance", "metrics", "pipeline", "synth")
DENOISERS = ("l2", "l1", "gtv")
METHODS = ("ours", "random")
LINEARIZATIONS = ("block", "coupled")
# commands whose input must exist when the config is validated
NEEDS_INPUT = ("sample", "superres", "denoise", "balance", "metrics", "pipeline")


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for the ``synth`` command."""

    shape: str = "sphere"
    n: int = 2000
    sigma: float = 0.0
    spacing: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI invocation needs.

    ``ratios``, ``seeds`` and ``methods`` are tuples so a pipeline run can
    sweep them; single-run commands use the first entry. ``m`` overrides the
    ratio with an absolute budget.
    """

    command: str
    input: str | None = None
    output: str | None = None
    reference: str | None = None
    report: str | None = None
    model: str | None = None
    ratios: tuple = (0.3,)
    m: int | None = None
    target_n: int | None = None
    seeds: tuple = (0,)
    methods: tuple = ("ours",)
    cluster_size: int = 10000
    delta: float = 1e-4
    linearization: str = "coupled"
    denoiser: str = "l2"
    compute_dcs: bool = False
    graph: GraphConfig = field(default_factory=GraphConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def ratio(self):
        return self.ratios[0]

    @property
    def seed(self):
        return self.seeds[0]

    def to_dict(self):
        """Plain JSON-serializable echo of the configuration."""
        out = dataclasses.asdict(self)
        for key in ("ratios", "seeds", "methods"):
            out[key] = list(out[key])
        return out


NESTED = {"graph": GraphConfig, "solver": SolverConfig, "metrics": MetricsConfig, "synth": SynthConfig}
# scalar keys that may also be given as lists; the file may use either spelling
SWEEP_ALIASES = {"ratio": "ratios", "seed": "seeds", "method": "methods"}


def _check_type(path, value, kinds):
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"expected {kinds[0].__name__}, got bool", path)
    if not isinstance(value, kinds):
        raise ConfigError(f"expected {kinds[0].__name__}, got {type(value).__name__}", path)


def _field_kinds(f):
    text = str(f.type)
    if "bool" in text:
        return (bool,)
    if "int" in text and "float" not in text:
        return (int,)
    if "float" in text:
        return (int, float)
    if "str" in text:
        return (str,)
    return None


def _build_nested(name, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError("expected an object", name)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError("unknown key", f"{name}.{key}")
        kinds = _field_kinds(fields[key])
        if value is not None and kinds is not None:
            _check_type(f"{name}.{key}", value, kinds)
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), name) from None


def _as_tuple(path, value, kinds):
    items = value if isinstance(value, list) else [value]
    if not items:
        raise ConfigError("must not be empty", path)
    for t, item in enumerate(items):
        _check_type(f"{path}[{t}]", item, kinds)
    return tuple(items)


def _merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if key in NESTED and isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = {**out[key], **value}
        else:
            out[key] = value
    return out


def _normalize_sweeps(raw):
    out = {}
    for key, value in raw.items():
        target = SWEEP_ALIASES.get(key, key)
        if target in out:
            raise ConfigError(f"given both as '{key}' and '{target}'", target)
        out[target] = value
    return out


def parse_config(path=None, overrides=None, check_files=True):
    """Load a JSON config, apply flag overrides and validate.

    Parameters
    ----------
    path : str or Path, optional
        JSON object file. Omit to configure from ``overrides`` alone.
    overrides : dict, optional
        Values that take precedence over the file (``None`` entries are ignored).
    check_files : bool
        Require the input (and reference) files to exist.

    Raises
    ------
    ConfigError
        Unknown keys, wrong types or out-of-range values; the message starts
        with the offending key path.
    """
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    raw = _normalize_sweeps(raw)
    flags = _normalize_sweeps({k: v for k, v in (overrides or {}).items() if v is not None})
    merged = _merge(raw, flags)
    return _validate(merged, check_files)


def _validate(raw, check_files):
    top = {f.name: f for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError("unknown key", key)
    if "command" not in raw:
        raise ConfigError("missing required key", "command")
    kw = {}
    for key, value in raw.items():
        if key in NESTED:
            kw[key] = _build_nested(key, NESTED[key], value)
        elif key == "ratios":
            kw[key] = _as_tuple(key, value, (int, float))
        elif key == "seeds":
            kw[key] = _as_tuple(key, value, (int,))
        elif key == "methods":
            kw[key] = _as_tuple(key, value, (str,))
        elif value is None:
            kw[key] = None
        else:
            _check_type(key, value, _field_kinds(top[key]))
            kw[key] = value
    cfg = RunConfig(**kw)
    _check_ranges(cfg, check_files)
    return cfg


def _check_ranges(cfg, check_files):
    if cfg.command not in COMMANDS:
        raise ConfigError(f"must be one of {COMMANDS}", "command")
    for t, r in enumerate(cfg.ratios):
        if not 0 < r <= 1:
            raise ConfigError("ratio must lie in (0, 1]", f"ratios[{t}]")
    for t, method in enumerate(cfg.methods):
        if method not in METHODS:
            raise ConfigError(f"must be one of {METHODS}", f"methods[{t}]")
    for t, s in enumerate(cfg.seeds):
        if s < 0:
            raise ConfigError("seed must be non-negative", f"seeds[{t}]")
    if cfg.m is not None and cfg.m < 1:
        raise ConfigError("must be positive", "m")
    if cfg.target_n is not None and cfg.target_n < 1:
        raise ConfigError("must be positive", "target_n")
    if cfg.cluster_size < 1:
        raise ConfigError("must be positive", "cluster_size")
    if cfg.delta <= 0:
        raise ConfigError("must be positive", "delta")
    if cfg.linearization not in LINEARIZATIONS:
        raise ConfigError(f"must be one of {LINEARIZATIONS}", "linearization")
    if cfg.denoiser not in DENOISERS:
        raise ConfigError(f"must be one of {DENOISERS}", "denoiser")
    if cfg.synth.shape not in SHAPES:
        raise ConfigError(f"must be one of {SHAPES}", "synth.shape")
    if cfg.synth.n < 4 or cfg.synth.sigma < 0 or cfg.synth.spacing <= 0:
        raise ConfigError("need n >= 4, sigma >= 0, spacing > 0", "synth")
    if cfg.command in NEEDS_INPUT and cfg.input is None:
        raise ConfigError(f"required by '{cfg.command}'", "input")
    if cfg.command == "metrics" and cfg.reference is None:
        raise ConfigError("required by 'metrics'", "reference")
    if check_files:
        for key in ("input", "reference"):
            value = getattr(cfg, key)
            if value is not None and cfg.command in NEEDS_INPUT and not Path(value).is_file():
                raise ConfigError(f"file not found: {value}", key)
