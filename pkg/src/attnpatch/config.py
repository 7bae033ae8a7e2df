"""Run configuration: a YAML or JSON document with fixed sections.

Every key has a default, so an empty file (or no file) describes the
standard MNIST-half protocol. Unknown sections or keys are rejected with
their location. Environment variables named
``ATTNPATCH_<SECTION>_<KEY>`` (upper case) override file values, and
command-line flags override both.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

ENV_PREFIX = "ATTNPATCH_"


class ConfigError(ValueError):
    """Invalid configuration document or override."""


@dataclass
class DatasetSection:
    name: str = "mnist_half"
    source: str = "auto"  # mnist_half only: auto | idx | mlxtend
    images: str | None = None
    labels: str | None = None
    path: str | None = None  # delimited table for activity / crop
    schema: dict | None = None  # overrides the shipped column schema
    n_labeled: int = 200
    n_reference: int = 1000
    stratify: bool = False


@dataclass
class ModelSection:
    variant: str = "tap"
    hidden_dim: int = 64
    dropout_rate: float = 0.5
    tap_hidden: int = 64
    tap_out: int = 64
    norm_const: float | None = None


@dataclass
class TrainSection:
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    data_batch: int = 100
    ref_batch: int = 250
    epochs_base: int | None = None  # 1000, or 8000 for crop
    epochs: int | None = None  # explicit budget for `train`; overrides epochs_base / m
    mc_runs: int = 20
    seed: int = 0
    eval_every: int | None = None  # 1, or 10 for crop
    metric_mode: str = "best5"
    jobs: int = 1
    variants: list = field(
        default_factory=lambda: ["baseline", "ffn", "control_group", "tap", "tap_no_batch"]
    )


@dataclass
class SweepSection:
    sizes: list = field(default_factory=lambda: [100, 200, 250, 500, 1000])


@dataclass
class TheoremSection:
    problem: str = "sin"  # sin | linear | square
    sigma: float = 0.1
    n_values: list = field(default_factory=lambda: [2**k for k in range(9, 16)])
    alpha: float = 0.2
    trials: int = 50
    grid: list = field(default_factory=lambda: [-1.0, -0.5, 0.0, 0.5, 1.0])
    noise_reps: int = 8
    qq_plot: bool = False


@dataclass
class OutputSection:
    directory: str = "results"
    plots: bool = True
    checkpoint: bool = True
    cache: bool = True
    cache_dir: str | None = None  # default: <directory>/cache


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "train": TrainSection,
    "sweep": SweepSection,
    "theorem": TheoremSection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    theorem: TheoremSection = field(default_factory=TheoremSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self):
        return asdict(self)

    @property
    def epochs_base(self):
        if self.train.epochs_base is not None:
            return self.train.epochs_base
        return 8000 if self.dataset.name == "crop" else 1000

    @property
    def eval_every(self):
        if self.train.eval_every is not None:
            return self.train.eval_every
        return 10 if self.dataset.name == "crop" else 1


def _field_types(cls):
    return {f.name: f for f in fields(cls)}


def _coerce(value, default, where):
    """Parse an environment string into the type of ``default``."""
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{where}: cannot parse {value!r}") from exc
    return parsed


def _check_value(section, key, value):
    where = f"{section}.{key}"
    default = getattr(SECTIONS[section](), key)
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def from_dict(doc, origin="<config>"):
    """Build a :class:`RunConfig`, rejecting unknown sections and keys."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{origin}: top level must be a mapping")
    cfg = RunConfig()
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"{origin}: unknown section {section!r} (expected one of {sorted(SECTIONS)})")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"{origin}: section {section!r} must be a mapping")
        known = _field_types(SECTIONS[section])
        target = getattr(cfg, section)
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            setattr(target, key, _check_value(section, key, value))
    return cfg


def load(path=None, environ=None):
    """Read a config file (YAML or JSON) and apply environment overrides."""
    doc = {}
    origin = "<defaults>"
    if path is not None:
        path = Path(path)
        origin = str(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: parse error: {exc}") from exc
    cfg = from_dict(doc, origin)
    apply_env(cfg, os.environ if environ is None else environ)
    return cfg


def apply_env(cfg, environ):
    """Apply ``ATTNPATCH_<SECTION>_<KEY>`` overrides in place."""
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        section = next((s for s in SECTIONS if rest.startswith(s + "_")), None)
        if section is None:
            continue  # other ATTNPATCH_* variables (data dir, dtype switch)
        key = rest[len(section) + 1 :]
        if key not in _field_types(SECTIONS[section]):
            raise ConfigError(f"environment {name}: unknown key {section}.{key}")
        default = getattr(SECTIONS[section](), key)
        parsed = _coerce(value, default, f"environment {name}")
        setattr(getattr(cfg, section), key, _check_value(section, key, parsed))
    return cfg


def describe():
    """Every section and key with its default, for ``--help`` output."""
    lines = []
    for section, cls in SECTIONS.items():
        lines.append(f"{section}:")
        for key, value in asdict(cls()).items():
            lines.append(f"  {key}: {json.dumps(value)}")
    return "\n".join(lines)
