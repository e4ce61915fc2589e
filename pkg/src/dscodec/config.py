"""Run configuration files (YAML or JSON) for the command-line tool.

Every section maps onto a dataclass; unknown keys anywhere are rejected so a
typo never silently falls back to a default.  ``RunConfig().to_dict()`` is the
fully populated default file that ``dscodec train --dump-config`` prints.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .audio import CropDataset
from .codec import CodecConfig
from .presets import PRESETS
from .synth import synthetic_corpus
from .trainer import StageName, StagePlan, TrainSettings


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    manifest: str | None = None  # WAV list; relative paths resolve against the config file
    synthetic_minutes: float | None = None  # used when no manifest is given
    crop_length: int = 16000


@dataclass
class CodecSection:
    preset: str = "desk"
    quantizer: str = "vq"
    overrides: dict = field(default_factory=dict)  # CodecConfig fields; ``quantizer`` merges key by key

    def build(self) -> CodecConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown codec preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.quantizer not in ("vq", "pq"):
            raise ConfigError(f"codec.quantizer must be 'vq' or 'pq', got {self.quantizer!r}")
        base = PRESETS[self.preset](self.quantizer).to_dict()
        unknown = set(self.overrides) - set(base)
        if unknown:
            raise ConfigError(f"unknown codec override(s): {sorted(unknown)}")
        d = base | self.overrides
        if isinstance(self.overrides.get("quantizer"), dict):
            d["quantizer"] = base["quantizer"] | self.overrides["quantizer"]
        try:
            return CodecConfig.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid codec configuration: {exc}") from exc


@dataclass
class StageSection:
    total_steps: int | None = None
    batch_size: int | None = None
    lr_start: float | None = None
    lr_end: float | None = None
    decay_steps: int | None = None

    def build(self, name: StageName) -> StagePlan:
        kwargs = {k: v for k, v in (("total_steps", self.total_steps), ("batch_size", self.batch_size))
                  if v is not None}
        plan = StagePlan.for_name(name, **kwargs)
        for key in ("lr_start", "lr_end", "decay_steps"):
            value = getattr(self, key)
            if value is not None:
                plan = dataclasses.replace(plan, **{key: value})
        return plan


@dataclass
class CompareSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    steps: int = 2000
    batch_size: int = 10
    window: int = 50


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/dscodec"
    data: DataSection = field(default_factory=DataSection)
    codec: CodecSection = field(default_factory=CodecSection)
    stage1: StageSection = field(default_factory=lambda: StageSection(2000, 10))
    stage2: StageSection = field(default_factory=lambda: StageSection(1000, 24))
    stage2t: StageSection = field(default_factory=lambda: StageSection(1000, 24))
    joint: StageSection = field(default_factory=lambda: StageSection(2000, 10))
    second_stage: str = "stage2"  # what follows stage 1 in a full run: stage2 | stage2t
    train: dict = field(default_factory=lambda: TrainSettings().to_dict())
    compare: CompareSection = field(default_factory=CompareSection)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    # -- loading ------------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | str = ".", require_seed: bool = True) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a mapping")
        if require_seed and "seed" not in d:
            raise ConfigError("configuration must set 'seed' explicitly")
        cfg = _build(cls, d, "")
        cfg.base_dir = Path(base_dir)
        cfg.settings()  # validate the train section eagerly
        cfg.codec_config()
        if cfg.second_stage not in ("stage2", "stage2t"):
            raise ConfigError(f"second_stage must be 'stage2' or 'stage2t', got {cfg.second_stage!r}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(d or {}, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return json.loads(json.dumps(d))  # tuples -> lists, so the dump reloads to the same mapping

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    # -- derived objects -------------------------------------------------------------

    def codec_config(self) -> CodecConfig:
        return self.codec.build()

    def settings(self) -> TrainSettings:
        defaults = TrainSettings().to_dict()
        unknown = set(self.train) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown key(s) in train: {sorted(unknown)}")
        merged = {k: (defaults[k] | v if isinstance(defaults[k], dict) and isinstance(v, dict) else v)
                  for k, v in (defaults | self.train).items()}
        try:
            return TrainSettings.from_dict(merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train section: {exc}") from exc

    def plan(self, name) -> StagePlan:
        name = StageName(name)
        section = {StageName.STAGE1_MIRROR: self.stage1, StageName.STAGE2_NONMIRROR: self.stage2,
                   StageName.STAGE2_T: self.stage2t, StageName.JOINT_NONMIRROR: self.joint}[name]
        try:
            return section.build(name)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name.value} section: {exc}") from exc

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def dataset(self) -> CropDataset:
        if self.data.manifest:
            return CropDataset.from_manifest(self.resolve(self.data.manifest), crop_length=self.data.crop_length,
                                             seed=self.seed)
        if self.data.synthetic_minutes:
            return CropDataset.from_arrays(synthetic_corpus(self.data.synthetic_minutes, seed=self.seed),
                                           crop_length=self.data.crop_length, seed=self.seed)
        raise ConfigError("set data.manifest or data.synthetic_minutes")


def _build(cls, d: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{name} must be a mapping")
            value = _build(type(default), value, f"{where}{name}.")
        kwargs[name] = value
    return cls(**kwargs)
