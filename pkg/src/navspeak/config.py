"""Run configuration: typed sections loaded from an INI-style text file.

Sections map one-to-one onto the dataclasses below; unknown sections or keys
are rejected with the offending name.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
import typing
from dataclasses import dataclass, field

from .errors import ConfigError

SCHEMA = "navspeak-config/1"


@dataclass
class WorldConfig:
    n_worlds: int = 40
    width: int = 8
    height: int = 8
    paths_per_world: int = 15
    len_min: int = 4
    len_max: int = 7
    k: int = 36
    d_raw: int = 64
    vis_range: float = 3.0
    object_density: float = 0.3
    landmark_prob: float = 0.5
    heldout_fraction: float = 0.1


@dataclass
class EncoderConfig:
    m: int = 4
    d_i: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    t_max: int = 16


@dataclass
class LMConfig:
    n_layers: int = 4
    n_heads: int = 4
    width: int = 64
    context_len: int = 256
    # None means every layer gets an adapter
    adapter_layers: typing.Optional[list] = None
    # None trains everything; an int n trains only the last n blocks
    trainable_last: typing.Optional[int] = None


@dataclass
class StmtConfig:
    enabled: bool = True
    # None resolves to n_layers - 2
    start_layer: typing.Optional[int] = None
    loss_weight: float = 1.0


@dataclass
class LandmarkConfig:
    beta: float = 0.25
    strategy: str = "full"


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup: int = 50
    grad_clip: float = 1.0
    # adapter gates start at exactly zero; a larger step lets them leave the
    # sign-flipping regime where the adapter weights get no coherent signal
    gate_lr_scale: float = 100.0
    instruction_ratio: float = 0.6
    landmark_ratio: float = 0.2
    stmt_ratio: float = 0.2
    # also train stage two on the full landmark set, which is what stage one
    # hands it at inference; the text-only landmark variant is always kept
    full_landmark_copies: bool = True
    # instruction and landmark ratios are split evenly across these styles
    styles: list = field(default_factory=lambda: ["fine_grained", "high_level"])
    eval_every: int = 250
    # None scores every held-out item; the split is small
    val_items: typing.Optional[int] = None
    num_threads: int = 1


@dataclass
class GenerateConfig:
    temperature_fine_grained: float = 0.1
    temperature_high_level: float = 0.1
    max_tokens: int = 40

    def temperature_for(self, style):
        value = getattr(self, f"temperature_{style}", None)
        if value is None:
            raise ConfigError(f"no temperature configured for style {style!r}")
        return value


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    stmt: StmtConfig = field(default_factory=StmtConfig)
    landmarks: LandmarkConfig = field(default_factory=LandmarkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    seed: int = 17
    out_dir: str = "runs/toy"
    schema: str = SCHEMA

    @classmethod
    def toy(cls, **top):
        """Desk-scale preset: K=8 subviews, small raw features."""
        cfg = cls(**top)
        cfg.world.k = 8
        cfg.world.d_raw = 32
        return cfg

    def validate(self):
        if self.schema != SCHEMA:
            raise ConfigError(f"config schema {self.schema!r} is not {SCHEMA!r}")
        w = self.world
        if w.k % 4:
            raise ConfigError("world.k must be divisible by 4 so cardinal moves have a subview")
        if w.len_min < 2 or w.len_max < w.len_min:
            raise ConfigError("world.len_min/len_max must satisfy 2 <= len_min <= len_max")
        if w.len_max > self.encoder.t_max:
            raise ConfigError("world.len_max exceeds encoder.t_max")
        if self.lm.n_layers < 2:
            raise ConfigError("lm.n_layers must be >= 2")
        for name in ("m", "d_i", "n_blocks", "n_heads", "t_max"):
            if getattr(self.encoder, name) <= 0:
                raise ConfigError(f"encoder.{name} must be positive")
        if self.lm.adapter_layers is not None:
            bad = [l for l in self.lm.adapter_layers if not 0 <= l < self.lm.n_layers]
            if bad:
                raise ConfigError(f"lm.adapter_layers out of range: {bad}")
        ls = self.stmt_start_layer
        if not 0 <= ls <= self.lm.n_layers:
            raise ConfigError(f"stmt.start_layer {ls} outside [0, {self.lm.n_layers}]")
        t = self.train
        total = t.instruction_ratio + t.landmark_ratio + t.stmt_ratio
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"train ratios sum to {total}, expected 1")
        if self.landmarks.strategy not in ("linguistic", "spatial", "full"):
            raise ConfigError(f"unknown landmarks.strategy {self.landmarks.strategy!r}")
        return self

    @property
    def stmt_start_layer(self):
        if self.stmt.start_layer is None:
            return self.lm.n_layers - 2
        return self.stmt.start_layer

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kwargs = {}
        for name in _SECTIONS:
            if name in data:
                kwargs[name] = _section(type(getattr(cls(), name)), data.pop(name), name)
        for name in ("seed", "out_dir", "schema"):
            if name in data:
                kwargs[name] = data.pop(name)
        if data:
            raise ConfigError(f"unknown config key: {sorted(data)[0]}")
        return cls(**kwargs).validate()


def _section(klass, values, section):
    values = dict(values)
    names = {f.name for f in dataclasses.fields(klass)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config key: {section}.{unknown[0]}")
    return klass(**values)


_SECTIONS = ("world", "encoder", "lm", "stmt", "landmarks", "train", "generate")


def _coerce(raw, hint, key):
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        value = raw
    origin = typing.get_origin(hint)
    if hint is str:
        return value if isinstance(value, str) else str(raw)
    if value is None:
        return None
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} expects a boolean, got {raw!r}")
    if hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key} expects a number, got {raw!r}")
    if hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key} expects an integer, got {raw!r}")
    if hint is list or origin is list or "list" in str(hint):
        if isinstance(value, (list, tuple)):
            return list(value)
        raise ConfigError(f"{key} expects a list, got {raw!r}")
    if "int" in str(hint):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key} expects an integer or None, got {raw!r}")
    return value


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from exc
    cfg = RunConfig.toy()
    hints = typing.get_type_hints(RunConfig)
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items(section):
                if key not in ("seed", "out_dir", "schema"):
                    raise ConfigError(f"unknown config key: run.{key}")
                setattr(cfg, key, _coerce(raw, hints[key], f"run.{key}"))
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section: [{section}]")
        target = getattr(cfg, section)
        sub_hints = typing.get_type_hints(type(target))
        for key, raw in parser.items(section):
            if key not in sub_hints:
                raise ConfigError(f"unknown config key: {section}.{key}")
            setattr(target, key, _coerce(raw, sub_hints[key], f"{section}.{key}"))
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = ["[run]", f"schema = {cfg.schema!r}", f"seed = {cfg.seed}", f"out_dir = {cfg.out_dir}", ""]
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for f in dataclasses.fields(getattr(cfg, section)):
            value = getattr(getattr(cfg, section), f.name)
            lines.append(f"{f.name} = {value!r}")
        lines.append("")
    return "\n".join(lines)
