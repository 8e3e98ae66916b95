"""Pipeline configuration: YAML loading with line-precise diagnostics, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .dynamics import Arena, LibraryConfig, NoiseModel, build_library
from .policy import TrainConfig
from .scenario import Geometry, ScenarioConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class ImmConfig:
    self_prob: float = 0.95


@dataclass(frozen=True)
class EpisodeCounts:
    demo: int = 1000
    eval: int = 120


@dataclass(frozen=True)
class DemoConfig:
    """Standalone random-switching inference test."""

    steps: int = 4000
    mean_sojourn: float = 200.0   # steps
    seeds: int = 10
    process_std: float = 0.002    # no unmodeled actuation in this controlled test


@dataclass(frozen=True)
class OutputConfig:
    compress: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 2024
    arena: Arena = Arena()
    geometry: Geometry = Geometry()
    library: LibraryConfig = LibraryConfig()
    noise: NoiseModel = NoiseModel()
    scenario: dict = field(default_factory=dict)   # ScenarioConfig scalar overrides
    imm: ImmConfig = ImmConfig()
    training: TrainConfig = TrainConfig()
    episodes: EpisodeCounts = EpisodeCounts()
    infer_demo: DemoConfig = DemoConfig()
    output: OutputConfig = OutputConfig()

    @property
    def scenario_config(self) -> ScenarioConfig:
        return ScenarioConfig(arena=self.arena, geometry=self.geometry, library=self.library,
                              noise=self.noise, **self.scenario)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["geometry"]["center"] = list(self.geometry.center)
        lib = d["library"]
        lib["wedge_half_angle_deg"] = math.degrees(lib.pop("wedge_half_angle"))
        d["scenario"] = {k: getattr(self.scenario_config, k) for k in _SCENARIO_SCALARS}
        return d

    def hash(self) -> str:
        """Digest of everything that shapes the generated data.

        Episode counts and output options are left out: they change how much
        is produced or how it is stored, not what a given step contains.
        """
        d = self.to_dict()
        del d["episodes"], d["output"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self) -> None:
        _validate(self, {})


_SCENARIO_SCALARS = tuple(
    f.name for f in dataclasses.fields(ScenarioConfig)
    if f.name not in ("arena", "geometry", "library", "noise")
)

_SECTIONS = {
    "arena": Arena,
    "geometry": Geometry,
    "library": LibraryConfig,
    "noise": NoiseModel,
    "imm": ImmConfig,
    "training": TrainConfig,
    "episodes": EpisodeCounts,
    "infer_demo": DemoConfig,
    "output": OutputConfig,
}


def _scalar(node: yaml.Node, kind: type, name: str, src: str):
    line = node.start_mark.line + 1
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{name}: expected a scalar", line, src)
    value = yaml.safe_load(node.value) if node.style is None else node.value
    if isinstance(value, str) and kind is float and node.style is None:
        try:  # YAML 1.1 reads "1e-3" (no dot) as a string
            value = float(value)
        except ValueError:
            pass
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {node.value!r}", line, src)
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {node.value!r}", line, src)
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {node.value!r}", line, src)
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"{name}: must be finite", line, src)
    return value


def _pairs(node: yaml.Node, name: str, src: str):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{name}: expected a mapping", node.start_mark.line + 1, src)
    seen = set()
    for k, v in node.value:
        key = k.value
        if key in seen:
            raise ConfigError(f"duplicate key {name}.{key}" if name else f"duplicate key {key}", k.start_mark.line + 1, src)
        seen.add(key)
        yield key, k.start_mark.line + 1, v


def _field_kind(cls, fname: str) -> type:
    default = getattr(cls(), fname)
    return type(default) if isinstance(default, (bool, int, float)) else float


def _section(cls, node: yaml.Node, name: str, src: str, lines: dict):
    kw = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, line, v in _pairs(node, name, src):
        lines[f"{name}.{key}"] = line
        if cls is Geometry and key == "center":
            if not isinstance(v, yaml.SequenceNode) or len(v.value) != 2:
                raise ConfigError("geometry.center: expected [x, y]", line, src)
            kw[key] = tuple(_scalar(c, float, "geometry.center", src) for c in v.value)
            continue
        if cls is LibraryConfig and key == "wedge_half_angle_deg":
            kw["wedge_half_angle"] = math.radians(_scalar(v, float, f"{name}.{key}", src))
            lines[f"{name}.wedge_half_angle"] = line
            continue
        if key not in names or (cls is LibraryConfig and key == "wedge_half_angle"):
            raise ConfigError(f"unknown key {name}.{key}", line, src)
        kw[key] = _scalar(v, _field_kind(cls, key), f"{name}.{key}", src)
    try:
        return replace(cls(), **kw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}", _blame(str(exc), name, lines), src) from None


def _blame(message: str, section: str, lines: dict) -> int | None:
    """Line of the first key in ``section`` that the message mentions."""
    hits = [(line, key) for key, line in lines.items()
            if key.startswith(section + ".") and key.split(".", 1)[1] in message]
    if hits:
        return min(hits)[0]
    return lines.get(section)


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    if root is None:
        cfg = PipelineConfig()
        cfg.validate()
        return cfg
    lines: dict[str, int] = {}
    kw: dict = {}
    for key, line, v in _pairs(root, "", source):
        lines[key] = line
        if key == "seed":
            seed = _scalar(v, int, "seed", source)
            if not 0 <= seed < 2 ** 64:
                raise ConfigError("seed must be an unsigned 64-bit integer", line, source)
            kw["seed"] = seed
        elif key == "scenario":
            sc = {}
            for sk, sline, sv in _pairs(v, "scenario", source):
                lines[f"scenario.{sk}"] = sline
                if sk not in _SCENARIO_SCALARS:
                    raise ConfigError(f"unknown key scenario.{sk}", sline, source)
                sc[sk] = _scalar(sv, _field_kind(ScenarioConfig, sk), f"scenario.{sk}", source)
            kw["scenario"] = sc
        elif key in _SECTIONS:
            kw[key] = _section(_SECTIONS[key], v, key, source, lines)
        else:
            raise ConfigError(f"unknown top-level key {key!r}", line, source)
    cfg = PipelineConfig(**kw)
    _validate(cfg, lines, source)
    return cfg


def _validate(cfg: PipelineConfig, lines: dict, source: str = "<config>") -> None:
    def fail(section: str, message: str):
        raise ConfigError(f"{section}: {message}", _blame(message, section, lines), source)

    if cfg.arena.half_width <= 0 or cfg.arena.half_height <= 0:
        fail("arena", "half_width and half_height must be > 0")
    try:
        cfg.geometry.validate(cfg.arena)
    except ValueError as exc:
        fail("geometry", str(exc))
    try:
        build_library(cfg.library)
    except ValueError as exc:
        fail("library", str(exc))
    try:
        sc = cfg.scenario_config
        sc.validate()
    except (ValueError, TypeError) as exc:
        fail("scenario", str(exc))
    if not 0.0 < cfg.imm.self_prob < 1.0:
        fail("imm", "self_prob must be in (0, 1)")
    t = cfg.training
    if t.batch_size < 1 or t.max_epochs < 1 or t.patience < 1:
        fail("training", "batch_size, max_epochs and patience must be >= 1")
    if not t.learning_rate > 0 or not 0 <= t.momentum < 1:
        fail("training", "need learning_rate > 0 and 0 <= momentum < 1")
    if not 0 < t.train_fraction < 1:
        fail("training", "train_fraction must be in (0, 1)")
    if cfg.episodes.demo < 2 or cfg.episodes.eval < 1:
        fail("episodes", "need demo >= 2 and eval >= 1")
    d = cfg.infer_demo
    if d.steps < 2 or d.seeds < 1 or not d.mean_sojourn > 0 or d.process_std < 0:
        fail("infer_demo", "need steps >= 2, seeds >= 1, mean_sojourn > 0 and process_std >= 0")


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return parse_config("")
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(p)) from None
    return parse_config(text, str(p))


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
