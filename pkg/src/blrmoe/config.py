"""Experiment configuration and its INI text format.

A config file has four sections, ``[model]``, ``[train]``, ``[corpus]`` and
``[output]``; every key is optional and falls back to the dataclass default.
Lists are comma separated; the confusability map is written ``zh-ja:0.9,en-ar:0.9``.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigParseError, ConfigurationError

MOE_MODULES = ("k", "q", "v", "o", "f")
ROUTER_KINDS = ("linear", "tdnn")
FRONTENDS = ("linear", "conv2d4")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_shared: int = 2
    d_model: int = 32
    num_heads: int = 4
    d_ffn: int = 64
    languages: tuple[str, ...] = ("zh", "en", "ja", "ar")
    moe_modules: tuple[str, ...] = ("o", "v", "f")
    router_kind: str = "linear"
    vocab_size: int = 27
    feature_dim: int = 16
    frontend: str = "linear"
    tdnn_channels: int = 500
    tdnn_dilations: tuple[int, ...] = (1, 2, 3)
    tdnn_width: int = 3

    def __post_init__(self):
        # canonical order so equal configs compare and serialise identically
        bad = set(self.moe_modules) - set(MOE_MODULES)
        if bad:
            raise ConfigurationError(f"unknown moe modules {sorted(bad)}")
        object.__setattr__(self, "moe_modules", tuple(m for m in MOE_MODULES if m in self.moe_modules))
        if not 0 <= self.num_shared < self.num_layers:
            raise ConfigurationError(
                f"need 0 <= num_shared < num_layers, got {self.num_shared}/{self.num_layers}")
        if not self.languages:
            raise ConfigurationError("at least one language/expert is required")
        if len(set(self.languages)) != len(self.languages):
            raise ConfigurationError(f"duplicate language names {self.languages}")
        if self.d_model % self.num_heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.router_kind not in ROUTER_KINDS:
            raise ConfigurationError(f"router_kind must be one of {ROUTER_KINDS}")
        if self.frontend not in FRONTENDS:
            raise ConfigurationError(f"frontend must be one of {FRONTENDS}")
        if self.tdnn_width % 2 == 0:
            raise ConfigurationError("tdnn_width must be odd")
        for name in ("d_model", "num_heads", "d_ffn", "vocab_size", "feature_dim", "tdnn_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")

    @property
    def num_experts(self) -> int:
        return len(self.languages)

    @property
    def is_vanilla(self) -> bool:
        return not self.moe_modules

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    def language_index(self, name: str) -> int:
        try:
            return self.languages.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown language {name!r}; model has {list(self.languages)}") from None


@dataclass(frozen=True)
class TrainConfig:
    lambda_lid: float = 0.3
    epochs: int = 30
    batch_size: int = 8
    warmup_steps: int = 200
    lr_scale: float = 1.0
    dropout_rate: float = 0.1
    grad_clip: float = 5.0
    seed: int = 0
    freeze: tuple[str, ...] = ()

    def __post_init__(self):
        if self.lambda_lid < 0:
            raise ConfigurationError("lambda_lid must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_steps < 1:
            raise ConfigurationError("epochs >= 0, batch_size >= 1, warmup_steps >= 1 required")


@dataclass(frozen=True)
class CorpusConfig:
    utterances_per_lang: int = 500
    test_fraction: float = 0.2
    lid_utterances_per_lang: int = 100
    alphabet_size: int = 8
    overlap: int = 2
    noise_std: float = 0.7
    accent_std: float = 0.6
    coarticulation: float = 0.5
    confusability: tuple[tuple[str, str, float], ...] = (("zh", "ja", 1.0), ("en", "ar", 1.0))
    shift_bias: float = 0.6
    shift_scale: float = 0.2
    shift_noise: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.utterances_per_lang < 1:
            raise ConfigurationError("utterances_per_lang must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must lie in [0, 1)")
        if not 0 <= self.overlap < self.alphabet_size:
            raise ConfigurationError("overlap must be smaller than alphabet_size")
        for a, b, k in self.confusability:
            if not 0.0 <= k <= 1.0:
                raise ConfigurationError(f"confusability {a}-{b} must lie in [0, 1]")

    def vocab_size(self, num_languages: int) -> int:
        return 1 + num_languages * (self.alphabet_size - self.overlap) + self.overlap


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    output_dir: str = "runs/default"


# --- text format -----------------------------------------------------------

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "corpus": CorpusConfig}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}-{b}:{k!r}" for a, b, k in value)
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, str):
        return raw
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if key == "confusability":
        out = []
        for item in items:
            pair, k = item.split(":")
            a, b = pair.split("-")
            out.append((a.strip(), b.strip(), float(k)))
        return tuple(out)
    if key == "tdnn_dilations":
        return tuple(int(s) for s in items)
    return tuple(items)


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for no, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[(\w+)\]", line)
        if m:
            current = m.group(1)
        elif current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return no
    return None


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigParseError(f"malformed config: {exc}", line=getattr(exc, "lineno", None)) from exc
    parts = {}
    for section in parser.sections():
        if section not in (*_SECTIONS, "output"):
            raise ConfigParseError(f"unknown section [{section}]", line=_line_of(text, section, ""))
    for section, cls in _SECTIONS.items():
        defaults = cls()
        kwargs = {}
        if parser.has_section(section):
            known = {f.name for f in dataclasses.fields(cls)}
            for key, raw in parser.items(section):
                where = dict(field=f"{section}.{key}", line=_line_of(text, section, key))
                if key not in known:
                    raise ConfigParseError("unknown field", **where)
                try:
                    kwargs[key] = _parse(raw, getattr(defaults, key), key)
                except (ValueError, TypeError) as exc:
                    raise ConfigParseError(f"invalid value {raw!r}: {exc}", **where) from exc
        try:
            parts[section] = cls(**kwargs)
        except ConfigurationError as exc:
            raise ConfigParseError(str(exc), field=section) from exc
    output_dir = ExperimentConfig.output_dir
    if parser.has_section("output"):
        for key in parser["output"]:
            if key != "dir":
                raise ConfigParseError("unknown field", field=f"output.{key}",
                                       line=_line_of(text, "output", key))
        output_dir = parser["output"].get("dir", output_dir)
    return ExperimentConfig(parts["model"], parts["train"], parts["corpus"], output_dir)


def dumps(cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        buf.write(f"[{section}]\n")
        for f in dataclasses.fields(obj):
            buf.write(f"{f.name} = {_format(getattr(obj, f.name))}\n")
        buf.write("\n")
    buf.write(f"[output]\ndir = {cfg.output_dir}\n")
    return buf.getvalue()


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def save(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
