"""Experiment configuration: a YAML file with one mapping per section.

Every key is optional; omitted keys keep the library defaults.  Unknown
sections or keys are rejected, and invariant violations are reported with the
file name and line of the offending entry.  Any value may be overridden from
the environment as ``TWIN_<SECTION>_<KEY>`` (value parsed as YAML), e.g.
``TWIN_TRAINING_EPOCHS=5``.

Example::

    run:
      output_dir: out
      track_length: 1900.0
    training:
      epochs: 20
    plant:
      tau_a: 0.2
      command_delay: 1
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

from ..distill import CollectConfig, GeneratorConfig, TrainConfig
from ..geometry import OUConfig
from ..models import ActionBounds, PlantConfig
from ..policy import ExpertGains, RewardWeights
from ..runtime import AlignmentConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "out"
    track: str | None = None  # track CSV; defaults to <output_dir>/track.csv
    model: str | None = None  # defaults to <output_dir>/model.bin
    dataset: str | None = None  # defaults to <output_dir>/dataset.bin
    seed: int = 0
    track_length: float = 1900.0  # [m], gen-path
    track_noise: float = 0.0  # waypoint noise for generated tracks [m]
    v_target: float = 8.0  # used when the track has no v_target column [m/s]
    v_target_range: tuple = (5.0, 11.0)  # gen-path speed profile levels [m/s]
    v_target_segment: tuple = (150.0, 400.0)  # gen-path constant-speed stretch lengths [m]
    max_time: float = 600.0  # [s]
    stop_hold: float = 3.0  # end the run after both vehicles rest this long [s]
    plot_format: str = "svg"
    workers: int = 1

    def __post_init__(self):
        if self.track_length <= 1.0 or self.max_time <= 0 or self.stop_hold < 0:
            raise ValueError("track_length, max_time must be positive and stop_hold >= 0")
        if self.v_target < 0 or self.track_noise < 0:
            raise ValueError("v_target and track_noise must be >= 0")
        lo, hi = self.v_target_range
        if not 0 <= lo <= hi:
            raise ValueError("v_target_range must satisfy 0 <= low <= high")
        if not 0 < self.v_target_segment[0] <= self.v_target_segment[1]:
            raise ValueError("v_target_segment must satisfy 0 < low <= high")
        if self.plot_format not in ("svg", "pdf", "png"):
            raise ValueError("plot_format must be svg, pdf or png")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class GateConfig:
    """Pass/fail limits applied by ``eval``; ``null`` disables a gate."""

    mean_lat: float | None = 0.05
    mean_long: float | None = 0.10
    mean_vel: float | None = 0.15
    max_lat: float | None = None
    max_resets: int | None = None


SECTIONS = {
    "run": RunConfig,
    "plant": PlantConfig,
    "ou": OUConfig,
    "reward": RewardWeights,
    "expert": ExpertGains,
    "generator": GeneratorConfig,
    "collect": CollectConfig,
    "training": TrainConfig,
    "alignment": AlignmentConfig,
    "gates": GateConfig,
}
# fields filled from other sections rather than set directly
_DERIVED = {"collect": {"generator", "ou", "workers"}}


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    plant: PlantConfig = field(default_factory=PlantConfig)
    ou: OUConfig = field(default_factory=OUConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    expert: ExpertGains = field(default_factory=ExpertGains)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    collect: CollectConfig = field(default_factory=CollectConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    gates: GateConfig = field(default_factory=GateConfig)
    source: str = "<defaults>"

    def collect_config(self) -> CollectConfig:
        ou = dataclasses.replace(self.ou, n_points=self.collect.ou.n_points)
        return dataclasses.replace(self.collect, generator=self.generator, ou=ou, workers=self.run.workers)

    def out_path(self, name: str) -> str:
        return os.path.join(self.run.output_dir, name)

    @property
    def track_file(self) -> str:
        return self.run.track or self.out_path("track.csv")

    @property
    def model_file(self) -> str:
        return self.run.model or self.out_path("model.bin")

    @property
    def dataset_file(self) -> str:
        return self.run.dataset or self.out_path("dataset.bin")


def _where(source: str, node) -> str:
    if isinstance(node, str):  # value came from an environment variable
        return f"environment {node}"
    return f"{source}:{node.start_mark.line + 1}" if node is not None else source


def _coerce(value: Any, default: Any, name: str):
    """Convert a YAML value to the type of the field default."""
    if isinstance(default, ActionBounds):
        if not isinstance(value, dict):
            raise ValueError(f"{name} must be a mapping of a_min/a_max/omega_min/omega_max")
        return ActionBounds(**value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{name} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool) and default is not None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{name} must be a number")
        return float(value)
    if default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ValueError(f"{name} must be a number, a string or null")
        return value
    if isinstance(default, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return value
        if not isinstance(value, list):
            raise ValueError(f"{name} must be a list")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"{name} must be a string")
        return value
    return value


def _field_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _build_section(name: str, items: dict, nodes: dict, source: str, section_node=None):
    cls = SECTIONS[name]
    defaults = _field_defaults(cls)
    allowed = set(defaults) - _DERIVED.get(name, set())
    optional = {f.name for f in dataclasses.fields(cls) if "None" in str(f.type)}
    kwargs = {}
    for key, value in items.items():
        if key not in allowed:
            raise ConfigError(f"{_where(source, nodes.get(key))}: unknown key {key!r} in section [{name}]")
        if value is None and key in optional:
            kwargs[key] = None
            continue
        try:
            kwargs[key] = _coerce(value, defaults[key], f"{name}.{key}")
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{_where(source, nodes.get(key))}: {exc}") from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        node = next((nodes[k] for k in kwargs if k in msg and k in nodes), section_node)
        raise ConfigError(f"{_where(source, node)}: [{name}] {msg}") from None


def _env_overrides(environ) -> dict:
    out: dict = {}
    for sec, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            key = f"TWIN_{sec.upper()}_{f.name.upper()}"
            if key in environ:
                out.setdefault(sec, {})[f.name] = (yaml.safe_load(environ[key]), key)
    return out


def parse_config(text: str, source: str = "<string>", environ=None) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from None
    sections: dict = {}
    if root is not None:
        if not isinstance(root, yaml.MappingNode):
            raise ConfigError(f"{_where(source, root)}: top level must be a mapping of sections")
        for knode, vnode in root.value:
            name = knode.value
            if name not in SECTIONS:
                raise ConfigError(f"{_where(source, knode)}: unknown section {name!r}")
            if isinstance(vnode, yaml.ScalarNode) and vnode.value in ("", "~", "null"):
                sections[name] = ({}, {}, knode)
                continue
            if not isinstance(vnode, yaml.MappingNode):
                raise ConfigError(f"{_where(source, vnode)}: section [{name}] must be a mapping")
            items, nodes = {}, {}
            data = yaml.safe_load(yaml.serialize(vnode))
            for k2, v2 in vnode.value:
                nodes[k2.value] = k2
            items.update(data)
            sections[name] = (items, nodes, knode)
    for sec, kv in _env_overrides(environ).items():
        items, nodes, knode = sections.get(sec, ({}, {}, None))
        for k, (v, var) in kv.items():
            items[k] = v
            nodes[k] = var
        sections[sec] = (items, nodes, knode)
    built = {}
    for name in SECTIONS:
        items, nodes, knode = sections.get(name, ({}, {}, None))
        built[name] = _build_section(name, items, nodes, source, knode)
    return ExperimentConfig(**built, source=source)


def load_config(filename=None, environ=None) -> ExperimentConfig:
    if filename is None:
        return parse_config("", "<defaults>", environ)
    try:
        with open(filename, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {filename}: {exc.strerror}") from None
    return parse_config(text, str(filename), environ)
