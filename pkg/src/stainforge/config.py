"""Experiment configuration: nested dataclasses read from YAML or JSON.

Unknown keys are errors, so a typo never silently falls back to a default.
``to_dict`` gives the fully resolved form that every run writes next to its
outputs.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import FilterRules, SynthSpec
from .optim import OptimConfig
from .sampler import SamplerConfig
from .schedule import NoiseSpec
from .trainer import Stage1Config, Stage2Config


class ConfigError(ValueError):
    pass


@dataclass
class SynthSection:
    size: int = 48
    M: int = 4
    cells: tuple[int, int] = (14, 26)
    rules: list[str] | None = None
    background_fraction: float = 0.15
    bit_depth: int = 8
    n_train: int = 512
    n_test: int = 64


@dataclass
class FilterSection:
    min_cell_coverage: float = 0.0
    empty_ssim_threshold: float = 0.8
    zero_ratio: bool = True
    fallback_marker: str | None = None
    min_center_distance: float = 0.0


@dataclass
class DatasetSection:
    source: str = "synthetic"  # "synthetic" or "directory"
    directory: str | None = None
    patch_size: int | None = None
    overlap: float = 0.0
    synth: SynthSection = field(default_factory=SynthSection)
    filters: FilterSection = field(default_factory=FilterSection)


@dataclass
class CodecSection:
    kind: str = "identity"
    pretrain_epochs: int = 0


@dataclass
class DenoiserSection:
    width: int = 16
    emb_dim: int = 64
    groups: int = 8


@dataclass
class NoiseSection:
    kind: str = "gaussian"
    pyramid_levels: int | None = None
    level_decay: float = 0.5


@dataclass
class OptimSection:
    lr: float = 2e-3
    warmup: int = 100
    horizon: int | None = None  # None: the stage's step count
    final_ratio: float = 0.01


@dataclass
class Stage1Section:
    steps: int = 600
    batch_size: int = 2
    T: int = 1000
    noise: NoiseSection = field(default_factory=NoiseSection)
    optim: OptimSection = field(default_factory=OptimSection)
    augment: bool = True
    checkpoint_every: int = 0


@dataclass
class Stage2Section:
    steps: int = 1000
    batch_size: int = 2
    lam: float = 0.5
    marker_rate: float = 1.0
    z_input: str = "zero"
    optim: OptimSection = field(default_factory=lambda: OptimSection(lr=2e-3, warmup=20))
    augment: bool = True
    checkpoint_every: int = 0


@dataclass
class SamplerSection:
    mode: str | None = None  # None: single_step after stage 2, ddim otherwise
    ddim_steps: int = 50
    ensemble: int = 1
    noise: NoiseSection = field(default_factory=NoiseSection)


@dataclass
class MetricsSection:
    data_range: float = 1.0
    empty_ssim_threshold: float | None = 0.8


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    panel: list[str] | None = None
    dataset: DatasetSection = field(default_factory=DatasetSection)
    codec: CodecSection = field(default_factory=CodecSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    # -- derived library objects ------------------------------------------
    def synth_spec(self) -> SynthSpec:
        s = self.dataset.synth
        return SynthSpec(size=s.size, M=s.M, cells=tuple(s.cells), rules=None if s.rules is None else tuple(s.rules),
                         seed=self.seed, background_fraction=s.background_fraction, bit_depth=s.bit_depth)

    def resolved_panel(self) -> tuple[str, ...]:
        if self.panel is not None:
            return tuple(self.panel)
        if self.dataset.source == "synthetic":
            return self.synth_spec().panel()
        raise ConfigError("panel must be given for directory datasets")

    def filter_rules(self) -> FilterRules:
        f = self.dataset.filters
        return FilterRules(f.min_cell_coverage, f.empty_ssim_threshold, f.zero_ratio, f.fallback_marker)

    def stage1_config(self) -> Stage1Config:
        s = self.stage1
        return Stage1Config(steps=s.steps, batch_size=s.batch_size, T=s.T, noise=_noise(s.noise), optim=_optim(s.optim, s.steps),
                            seed=self.seed, augment=s.augment)

    def stage2_config(self) -> Stage2Config:
        s = self.stage2
        return Stage2Config(steps=s.steps, batch_size=s.batch_size, lam=s.lam, marker_rate=s.marker_rate, z_input=s.z_input,
                            T=self.stage1.T, optim=_optim(s.optim, s.steps), seed=self.seed, augment=s.augment)

    def sampler_config(self, stage: int, mode: str | None = None, steps: int | None = None, ensemble: int | None = None) -> SamplerConfig:
        s = self.sampler
        mode = mode or s.mode or ("single_step" if stage >= 2 else "ddim")
        if mode == "single_step":
            return SamplerConfig.single_step(self.stage1.T)
        return SamplerConfig(mode="ddim", ddim_steps=steps or s.ddim_steps, ensemble=ensemble or s.ensemble,
                             noise=_noise(s.noise), seed=self.seed, T=self.stage1.T)


def _noise(n: NoiseSection) -> NoiseSpec:
    return NoiseSpec(n.kind, n.pyramid_levels, n.level_decay)


def _optim(o: OptimSection, steps: int) -> OptimConfig:
    return OptimConfig(lr=o.lr, warmup=o.warmup, horizon=o.horizon or max(1, steps), final_ratio=o.final_ratio)


# ---------------------------------------------------------------------------
# (de)serialisation
# ---------------------------------------------------------------------------


def _build(cls, data, path: str, base=None):
    # keys not given keep the value of ``base`` (the enclosing default), not the class default
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) at {path or 'top level'}: {', '.join(unknown)}")
    base = cls() if base is None else base
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k, getattr(base, k)) for k, v in data.items()}
    return dataclasses.replace(base, **kwargs)


def _coerce(tp, value, path: str, default=None):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path, default)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: null not allowed")
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        (item,) = set(typing.get_args(tp)) or {object}
        seq = [_coerce(item, v, path) for v in value]
        return tuple(seq) if origin is tuple else seq
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp in (int, str, bool) and not isinstance(value, tp) or (tp is int and isinstance(value, bool)):
        raise ConfigError(f"{path}: expected {tp.__name__}, got {value!r}")
    return value


def from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def to_dict(cfg: ExperimentConfig) -> dict:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x

    return plain(asdict(cfg))


def loads(text: str, fmt: str = "yaml") -> ExperimentConfig:
    try:
        data = json.loads(text) if fmt == "json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config: {exc}".replace("\n", " ")) from exc
    return from_dict(data)


def dumps(cfg: ExperimentConfig, fmt: str = "yaml") -> str:
    d = to_dict(cfg)
    return json.dumps(d, indent=1) if fmt == "json" else yaml.safe_dump(d, sort_keys=False)


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return loads(text, "json" if path.suffix == ".json" else "yaml")


def save(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(dumps(cfg, "json" if path.suffix == ".json" else "yaml"))
    return path
