"""Experiment configuration files.

The format is INI (``configparser``) with a mandatory ``config_version``
key.  Sections::

    [experiment]       config_version, name, methods, seeds, out_dir, flags
    [dataset]          kind = synthetic | idx, plus the generator or file settings
    [model]            hidden layer sizes and bottleneck width
    [pretrain]         source-model training
    [hyperparameters]  defaults shared by every method
    [method.<name>]    per-method overrides of any hyperparameter

Lists are comma separated; ``none`` is accepted where a value is optional.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigurationError
from .federation import METHODS, MethodConfig

CONFIG_VERSION = 1
DEFAULT_METHODS = tuple(m for m in METHODS if m != "local")


class ConfigParseError(ConfigurationError):
    """A config problem located by section, key and (when known) line number."""

    def __init__(self, message: str, section: str | None = None, key: str | None = None,
                 line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if section is not None:
            where.append(f"[{section}]")
        if key is not None:
            where.append(key)
        prefix = " ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.section, self.key, self.line = section, key, line


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 5
    dim: int = 16
    n_per_domain: int = 1500
    class_std: float = 0.35
    noise_std: float = 0.1
    source_rotation: float = 0.0
    target_rotations: tuple[float, ...] = (30.0, 60.0, 90.0)
    translation_norm: float = 2.0
    clients_per_domain: int = 3
    source_images: str = ""
    source_labels: str = ""
    target_images: tuple[str, ...] = ()
    target_labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigurationError("dataset kind must be 'synthetic' or 'idx'")
        if self.clients_per_domain < 1:
            raise ConfigurationError("clients_per_domain must be >= 1")
        if self.kind == "synthetic":
            if self.num_classes < 2 or self.dim < 1 or self.n_per_domain < self.num_classes:
                raise ConfigurationError("synthetic dataset needs num_classes >= 2, dim >= 1 "
                                         "and n_per_domain >= num_classes")
            if not self.target_rotations:
                raise ConfigurationError("synthetic dataset needs at least one target rotation")
            if self.class_std < 0 or self.noise_std < 0 or self.translation_norm < 0:
                raise ConfigurationError("class_std, noise_std and translation_norm must be >= 0")
        else:
            if not (self.source_images and self.source_labels):
                raise ConfigurationError("idx dataset needs source_images and source_labels")
            if not self.target_images or len(self.target_images) != len(self.target_labels):
                raise ConfigurationError("idx dataset needs matching target_images/target_labels lists")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (32,)
    bottleneck: int = 16

    def __post_init__(self):
        if any(h < 1 for h in self.hidden) or self.bottleneck < 1:
            raise ConfigurationError("layer sizes must be positive")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ConfigurationError("pretrain needs epochs >= 0, lr >= 0 and batch_size >= 1")


def _default_hyper() -> MethodConfig:
    return MethodConfig(batch_size=32)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    methods: tuple[str, ...] = DEFAULT_METHODS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = "runs/default"
    audit_pseudo_labels: bool = False
    save_checkpoints: bool = True
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    hyper: MethodConfig = field(default_factory=_default_hyper)
    overrides: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigurationError(f"unknown methods: {unknown}")
        if not self.methods:
            raise ConfigurationError("method list is empty")
        if not self.seeds:
            raise ConfigurationError("seed list is empty")
        for name in self.overrides:
            if name not in METHODS:
                raise ConfigurationError(f"override section for unknown method {name!r}")
        for m in self.methods:
            self.method_config(m, self.seeds[0])  # validates every override

    def method_config(self, method: str, seed: int) -> MethodConfig:
        return replace(self.hyper, method=method, seed=seed, **self.overrides.get(method, {}))


# ------------------------------------------------------------ value codecs

_HYPER_FIELDS = {f.name: f for f in fields(MethodConfig) if f.name not in ("method", "seed")}


def _kind(tp) -> str:
    text = str(tp)
    for name in ("tuple[int", "tuple[float", "tuple[str", "int | None", "bool", "int", "float", "str"):
        if text.startswith(name):
            return name
    raise TypeError(f"unsupported config field type {tp!r}")


def _parse_scalar(kind: str, text: str):
    text = text.strip()
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "int | None":
        return None if text.lower() == "none" else int(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def parse_value(kind: str, text: str):
    if kind.startswith("tuple["):
        inner = kind[len("tuple["):]
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(_parse_scalar(inner, t) for t in items)
    return _parse_scalar(kind, text)


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ----------------------------------------------------------------- parsing

class _LineTracker(configparser.ConfigParser):
    """ConfigParser that remembers the line each option was read from."""

    def __init__(self):
        super().__init__(interpolation=None, inline_comment_prefixes=("#", ";"))
        self.optionxform = str  # keep key case
        self.lines: dict[tuple[str, str], int] = {}

    def read_text(self, text: str, source: str):
        section = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
            elif section and line and line[0] not in "#;" and ("=" in line or ":" in line):
                key = line.split("=", 1)[0].split(":", 1)[0].strip()
                self.lines.setdefault((section, key), lineno)
        self.read_string(text, source=source)


def _section_values(parser: _LineTracker, section: str, schema: dict[str, dataclasses.Field]) -> dict:
    out = {}
    for key, text in parser.items(section):
        line = parser.lines.get((section, key))
        if key not in schema:
            raise ConfigParseError("unknown key", section, key, line)
        try:
            out[key] = parse_value(_kind(schema[key].type), text)
        except ValueError as exc:
            raise ConfigParseError(str(exc), section, key, line) from None
    return out


def _build(cls, values: dict, section: str, parser: _LineTracker):
    try:
        return cls(**values)
    except ConfigurationError as exc:
        key = next(iter(values), None)
        raise ConfigParseError(str(exc), section, None,
                               parser.lines.get((section, key)) if key else None) from None


def loads(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = _LineTracker()
    try:
        parser.read_text(text, source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigParseError(exc.message.splitlines()[0] if hasattr(exc, "message") else str(exc),
                               line=line) from None

    if not parser.has_section("experiment"):
        raise ConfigParseError("missing [experiment] section")
    exp_schema = {f.name: f for f in fields(ExperimentConfig)
                  if f.name not in ("dataset", "model", "pretrain", "hyper", "overrides")}
    exp_items = dict(parser.items("experiment"))
    version_line = parser.lines.get(("experiment", "config_version"))
    if "config_version" not in exp_items:
        raise ConfigParseError("missing config_version", "experiment", "config_version")
    if exp_items["config_version"].strip() != str(CONFIG_VERSION):
        raise ConfigParseError(f"unsupported config_version {exp_items['config_version']!r} "
                               f"(expected {CONFIG_VERSION})", "experiment", "config_version", version_line)
    parser.remove_option("experiment", "config_version")
    exp = _section_values(parser, "experiment", exp_schema)

    sections = {}
    for name, cls in (("dataset", DatasetConfig), ("model", ModelConfig), ("pretrain", PretrainConfig)):
        values = (_section_values(parser, name, {f.name: f for f in fields(cls)})
                  if parser.has_section(name) else {})
        sections[name] = _build(cls, values, name, parser)

    hyper_values = (_section_values(parser, "hyperparameters", _HYPER_FIELDS)
                    if parser.has_section("hyperparameters") else {})
    hyper = _build(lambda **kw: replace(_default_hyper(), **kw), hyper_values, "hyperparameters", parser)

    overrides = {}
    for section in parser.sections():
        if section in ("experiment", "dataset", "model", "pretrain", "hyperparameters"):
            continue
        if not section.startswith("method."):
            raise ConfigParseError("unknown section", section, line=None)
        method = section[len("method."):]
        if method not in METHODS:
            raise ConfigParseError(f"unknown method {method!r}", section)
        overrides[method] = _section_values(parser, section, _HYPER_FIELDS)
        try:
            replace(hyper, method=method, **overrides[method])
        except ConfigurationError as exc:
            raise ConfigParseError(str(exc), section) from None

    try:
        return ExperimentConfig(hyper=hyper, overrides=overrides, **sections, **exp)
    except ConfigurationError as exc:
        raise ConfigParseError(str(exc), "experiment") from None


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text, str(path))


def dumps(cfg: ExperimentConfig) -> str:
    """Serialise every setting explicitly, so the file does not depend on defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    exp = {"config_version": str(CONFIG_VERSION)}
    for f in fields(ExperimentConfig):
        if f.name in ("dataset", "model", "pretrain", "hyper", "overrides"):
            continue
        exp[f.name] = format_value(getattr(cfg, f.name))
    parser["experiment"] = exp
    for name in ("dataset", "model", "pretrain"):
        obj = getattr(cfg, name)
        parser[name] = {f.name: format_value(getattr(obj, f.name)) for f in fields(obj)}
    parser["hyperparameters"] = {k: format_value(getattr(cfg.hyper, k)) for k in _HYPER_FIELDS}
    for method, values in sorted(cfg.overrides.items()):
        parser[f"method.{method}"] = {k: format_value(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def dump(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def apply_env(cfg: ExperimentConfig, environ=None) -> ExperimentConfig:
    """``FEDWCA_SEED`` (one seed or a comma list) and ``FEDWCA_OUT`` override the file."""
    environ = os.environ if environ is None else environ
    changes: dict[str, Any] = {}
    if environ.get("FEDWCA_SEED", "").strip():
        try:
            changes["seeds"] = parse_value("tuple[int", environ["FEDWCA_SEED"])
        except ValueError:
            raise ConfigurationError(f"FEDWCA_SEED is not an integer list: {environ['FEDWCA_SEED']!r}") from None
    if environ.get("FEDWCA_OUT", "").strip():
        changes["out_dir"] = environ["FEDWCA_OUT"].strip()
    return replace(cfg, **changes) if changes else cfg
