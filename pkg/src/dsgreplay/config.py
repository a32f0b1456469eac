"""Experiment configuration: a sectioned key/value text file (INI syntax).

Unknown sections or keys are errors.  A fully resolved config round-trips
through the JSON run manifest, so ``run`` accepts either form.

Example::

    [run]
    method = dsg
    seeds = 0, 1, 2
    classes_per_task = 2

    [synthetic]
    num_classes = 6
    noise = 0.05

    [method]
    lambda = 1.0
"""

from __future__ import annotations

import configparser
import copy
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .continual import METHODS, ClMethod, DiffusionSettings, TrainProtocol
from .data import SynthSpec
from .dsg import INIT_MODES, DsgConfig
from .diffusion import SIGMA_CHOICES


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


_INT_LIST = "int_list"
_OPT_INT = "opt_int"

# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "method": (str, "dsg"),
        "seeds": (_INT_LIST, [0]),
        "classes_per_task": (int, 2),
        "train_ratio": (float, 0.8),
    },
    "data": {
        "source": (str, "synthetic"),
        "path": (str, ""),
        "channels": (_OPT_INT, None),
        "length": (_OPT_INT, None),
        "num_classes": (_OPT_INT, None),
        "normalize": (bool, False),
    },
    "synthetic": {
        "num_classes": (int, 6),
        "channels": (int, 2),
        "length": (int, 64),
        "train_per_class": (int, 200),
        "test_per_class": (int, 50),
        "noise": (float, 0.05),
        "phase_jitter": (float, 0.2),
        "amplitude_jitter": (float, 0.1),
        "seed": (int, 0),
    },
    "protocol": {
        "learning_rate": (float, 1e-3),
        "batch_size": (int, 64),
        "replay_batch_size": (int, 32),
        "patience": (int, 20),
        "max_epochs": (int, 200),
        "val_fraction": (float, 0.1),
        "dropout_rate": (float, 0.1),
        "optimizer": (str, "adam"),
        "channels": (_INT_LIST, [64, 128, 256, 128]),
        "replay_pool_size": (_OPT_INT, None),
    },
    "method": {
        "lambda": (float, 1.0),
        "buffer_capacity": (int, 300),
        "init": (str, "warm"),
    },
    "generator": {
        "epochs": (int, 100),
        "learning_rate": (float, 1e-3),
        "batch_size": (int, 64),
        "patience": (int, 20),
        "val_fraction": (float, 0.1),
        "base_channels": (int, 32),
        "depth": (int, 2),
    },
    "diffusion": {
        "T": (int, 200),
        "beta_start": (float, 1e-4),
        "beta_end": (float, 0.02),
        "sigma2": (str, "beta"),
    },
}


def defaults() -> dict:
    return {s: {k: copy.copy(d) for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=defaults)
    source_path: str | None = None

    # typed views ---------------------------------------------------------
    @property
    def method_kind(self) -> str:
        return self.values["run"]["method"]

    @property
    def seeds(self) -> list[int]:
        return list(self.values["run"]["seeds"])

    def with_seeds(self, seeds: list[int]) -> "ExperimentConfig":
        values = copy.deepcopy(self.values)
        values["run"]["seeds"] = list(seeds)
        return ExperimentConfig(values, self.source_path)

    def protocol(self) -> TrainProtocol:
        return TrainProtocol(**self.values["protocol"])

    def method(self) -> ClMethod:
        m, g, d = self.values["method"], self.values["generator"], self.values["diffusion"]
        gen = DsgConfig(lam=m["lambda"], epochs=g["epochs"], learning_rate=g["learning_rate"],
                        batch_size=g["batch_size"], patience=g["patience"], val_fraction=g["val_fraction"],
                        init=m["init"])
        diff = DiffusionSettings(T=d["T"], beta_start=d["beta_start"], beta_end=d["beta_end"],
                                 sigma2=d["sigma2"], base_channels=g["base_channels"], depth=g["depth"])
        return ClMethod(self.method_kind, m["buffer_capacity"], gen, diff)

    def synth_spec(self) -> SynthSpec:
        s = self.values["synthetic"]
        return SynthSpec(classes_per_task=self.values["run"]["classes_per_task"], **s)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines: dict[tuple[str, str], int] = {}
    section = None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = re.sub(r"\s[;#].*$", "", raw).strip()
        m = re.match(r"^\[(.+)\]$", line)
        if m:
            section = m.group(1).strip()
            lines[(section, "")] = i
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            lines[(section, m.group(1).strip())] = i
    return lines


def _convert(kind, raw, where: str, line: int | None):
    try:
        if kind is bool:
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            if isinstance(raw, bool):
                raise ValueError(raw)
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return str(raw).strip()
        if kind == _OPT_INT:
            if raw is None or str(raw).strip().lower() in ("", "none", "auto"):
                return None
            return int(raw)
        if kind == _INT_LIST:
            if isinstance(raw, (list, tuple)):
                return [int(v) for v in raw]
            return [int(v) for v in re.split(r"[,\s]+", str(raw).strip()) if v]
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse {raw!r} as {getattr(kind, '__name__', kind)}", where, line) from None
    raise AssertionError(kind)


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse an INI config or a JSON run manifest and validate it."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        return from_dict(doc.get("config", doc), source_path=str(path))

    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__",
                                       inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"syntax error: {exc}", line=getattr(exc, "lineno", None)) from None
    lines = _key_lines(text)
    values = defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", section, lines.get((section, "")))
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", f"{section}.{key}", line)
            kind = SCHEMA[section][key][0]
            values[section][key] = _convert(kind, raw, key, line)
    cfg = ExperimentConfig(values, str(path))
    validate(cfg, lines)
    return cfg


def from_dict(doc: dict, source_path: str | None = None) -> ExperimentConfig:
    values = defaults()
    for section, keys in doc.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", section)
        for key, raw in keys.items():
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", f"{section}.{key}")
            values[section][key] = _convert(SCHEMA[section][key][0], raw, key, None)
    cfg = ExperimentConfig(values, source_path)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig, lines: dict | None = None) -> None:
    lines = lines or {}
    v = cfg.values

    def fail(section: str, key: str, message: str):
        raise ConfigError(message, key, lines.get((section, key)))

    if v["run"]["method"] not in METHODS:
        fail("run", "method", f"must be one of {', '.join(METHODS)}")
    if not v["run"]["seeds"]:
        fail("run", "seeds", "at least one seed is required")
    if v["run"]["classes_per_task"] < 1:
        fail("run", "classes_per_task", "must be >= 1")
    if not 0.0 < v["run"]["train_ratio"] < 1.0:
        fail("run", "train_ratio", "must lie in (0, 1)")
    if v["method"]["lambda"] < 0:
        fail("method", "lambda", "lambda must be >= 0")
    if v["method"]["buffer_capacity"] < 1:
        fail("method", "buffer_capacity", "must be >= 1")
    if v["method"]["init"] not in INIT_MODES:
        fail("method", "init", f"must be one of {', '.join(INIT_MODES)}")
    if v["diffusion"]["sigma2"] not in SIGMA_CHOICES:
        fail("diffusion", "sigma2", f"must be one of {', '.join(SIGMA_CHOICES)}")
    if v["diffusion"]["T"] < 1:
        fail("diffusion", "T", "must be >= 1")
    if not 0.0 < v["diffusion"]["beta_start"] <= v["diffusion"]["beta_end"] < 1.0:
        fail("diffusion", "beta_start", "need 0 < beta_start <= beta_end < 1")
    if v["protocol"]["optimizer"] not in ("sgd", "adam"):
        fail("protocol", "optimizer", "must be sgd or adam")
    if not 0.0 <= v["protocol"]["dropout_rate"] < 1.0:
        fail("protocol", "dropout_rate", "must lie in [0, 1)")
    for key in ("learning_rate",):
        if v["protocol"][key] <= 0:
            fail("protocol", key, "must be positive")
        if v["generator"][key] <= 0:
            fail("generator", key, "must be positive")
    for section, key in [("protocol", "batch_size"), ("protocol", "replay_batch_size"), ("protocol", "patience"),
                         ("protocol", "max_epochs"), ("generator", "epochs"), ("generator", "batch_size"),
                         ("generator", "patience"), ("generator", "base_channels"), ("generator", "depth")]:
        if v[section][key] < 1:
            fail(section, key, "must be >= 1")
    if not v["protocol"]["channels"]:
        fail("protocol", "channels", "need at least one conv block")
    source = v["data"]["source"]
    if source not in ("synthetic", "file"):
        fail("data", "source", "must be synthetic or file")
    if source == "file":
        path = Path(v["data"]["path"])
        if cfg.source_path and not path.is_absolute():
            path = Path(cfg.source_path).parent / path
        if not v["data"]["path"] or not path.exists():
            fail("data", "path", f"data file {v['data']['path']!r} does not exist")
    else:
        try:
            cfg.synth_spec()
        except ValueError as exc:
            fail("synthetic", "num_classes", str(exc))
        s = v["synthetic"]
        for key in ("train_per_class", "test_per_class", "channels", "length"):
            if s[key] < 1:
                fail("synthetic", key, "must be >= 1")


def data_path(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.values["data"]["path"])
    if cfg.source_path and not path.is_absolute():
        path = Path(cfg.source_path).parent / path
    return path
