"""Experiment configuration: dataclass model plus the INI-style config file
(nested sections, key=value) used by the CLI."""

import configparser
from dataclasses import dataclass, field, replace

from .data import PRESETS, SyntheticSpec
from .networks import ArchitectureSpec
from .training import METHODS, Hyperparams


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


PROTOCOLS = ("fixed-new-user-set", "leave-one-user-out")

ALLOCATOR_WIDTH = {"swl-adapt": 2, "swl-s": 2, "swl-d": 1, "swl-c": 1, "dann": 0}


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"          # synthetic | csv | cache
    preset: str = ""                    # dataset preset name for csv sources
    csv_path: str = ""
    cache_path: str = ""
    normalization: str = "global"       # global | source_only
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "swl-adapt"
    protocol: str = "fixed-new-user-set"
    new_users: tuple = ("t0",)
    seeds: tuple = (1, 2, 3, 4, 5)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    arch: ArchitectureSpec | None = None  # derived from data when omitted
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs"
    threads: int = 1
    convergence_interval: int = 10
    probe_count: int = 10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if not self.new_users and self.protocol == "fixed-new-user-set":
            raise ConfigError("fixed-new-user-set protocol needs a new-user list")
        if self.threads < 1:
            raise ConfigError("threads must be positive")

    def with_overrides(self, **kwargs):
        return replace(self, **kwargs)


_HYPER_KEYS = {
    "batch_per_domain": int,
    "total_steps": int,
    "allocator_lr": float,
    "model_lr": float,
    "confidence": float,
    "zero_guard": float,
    "seed": int,
    "allocator_update": str,
}

_ARCH_KEYS = {
    "in_channels": int,
    "window_len": int,
    "num_classes": int,
    "conv_filters": "int_tuple",
    "conv_kernels": "int_tuple",
    "conv_strides": "int_tuple",
    "disc_hidden": "int_tuple",
    "allocator_hidden": int,
    "grl_coefficient": float,
    "bn_momentum": float,
    "bn_eps": float,
}

_SYNTH_KEYS = {
    "num_classes": int,
    "source_users": int,
    "target_users": int,
    "windows_per_user": int,
    "n_channels": int,
    "window_len": int,
    "base_cycles": float,
    "cycles_step": float,
    "base_amplitude": float,
    "amplitude_step": float,
    "scale_range": "float_tuple",
    "offset_range": "float_tuple",
    "noise_level": float,
    "corruption": float,
    "seed": int,
}


def _parse_value(raw, kind):
    if kind == "int_tuple":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if kind == "float_tuple":
        return tuple(float(v) for v in raw.replace(",", " ").split())
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw.strip()


def _section_kwargs(parser, section, schema):
    out = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        try:
            out[key] = _parse_value(raw, schema[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} in [{section}]: {raw!r}") from exc
    return out


def load_config(path):
    """Parse the experiment config file into an :class:`ExperimentConfig`."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    exp = {}
    if parser.has_section("experiment"):
        section = dict(parser.items("experiment"))
        for key in section:
            if key not in {"method", "protocol", "new_users", "seeds", "output_dir",
                           "threads", "convergence_interval", "probe_count"}:
                raise ConfigError(f"unknown key {key!r} in [experiment]")
        if "method" in section:
            exp["method"] = section["method"].strip()
        if "protocol" in section:
            exp["protocol"] = section["protocol"].strip()
        if "new_users" in section:
            exp["new_users"] = tuple(section["new_users"].replace(",", " ").split())
        if "seeds" in section:
            exp["seeds"] = tuple(int(v) for v in section["seeds"].replace(",", " ").split())
        if "output_dir" in section:
            exp["output_dir"] = section["output_dir"].strip()
        for key in ("threads", "convergence_interval", "probe_count"):
            if key in section:
                exp[key] = int(section[key])

    try:
        hyper = Hyperparams(**_section_kwargs(parser, "hyperparams", _HYPER_KEYS))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    data_kwargs = {}
    if parser.has_section("data"):
        section = dict(parser.items("data"))
        for key in section:
            if key not in {"source", "preset", "csv_path", "cache_path", "normalization"}:
                raise ConfigError(f"unknown key {key!r} in [data]")
            data_kwargs[key] = section[key].strip()
        if data_kwargs.get("source", "synthetic") == "csv":
            preset = data_kwargs.get("preset", "")
            if preset and preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
    synth_kwargs = _section_kwargs(parser, "synthetic", _SYNTH_KEYS)
    try:
        data_cfg = DataConfig(synthetic=SyntheticSpec(**synth_kwargs), **data_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    arch = None
    arch_kwargs = _section_kwargs(parser, "architecture", _ARCH_KEYS)
    if arch_kwargs:
        required = {"in_channels", "window_len", "num_classes"}
        missing = required - set(arch_kwargs)
        if missing:
            raise ConfigError(f"[architecture] missing required keys: {sorted(missing)}")
        method = exp.get("method", "swl-adapt")
        try:
            arch = ArchitectureSpec(allocator_inputs=ALLOCATOR_WIDTH[method], **arch_kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    try:
        return ExperimentConfig(hyper=hyper, data=data_cfg, arch=arch, **exp)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_architecture(config, in_channels, window_len, num_classes):
    """Architecture for a run: the configured one (validated against the
    data) or a default-shaped spec derived from the data."""
    width = ALLOCATOR_WIDTH[config.method]
    if config.arch is not None:
        arch = config.arch
        if (arch.in_channels, arch.window_len, arch.num_classes) != (in_channels, window_len, num_classes):
            raise ConfigError(
                f"architecture (channels={arch.in_channels}, len={arch.window_len}, "
                f"classes={arch.num_classes}) does not match data "
                f"({in_channels}, {window_len}, {num_classes})"
            )
        if arch.allocator_inputs != width:
            arch = arch.with_allocator_inputs(width)
        return arch
    return ArchitectureSpec(
        in_channels=in_channels, window_len=window_len, num_classes=num_classes,
        allocator_inputs=width,
    )
