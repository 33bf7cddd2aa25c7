"""Run configuration read from a sectioned ``key = value`` text file."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..denoiser import DenoiserConfig
from ..gates import GateConfig
from ..pruning import PruneConfig


class ConfigError(ValueError):
    """The configuration file could not be parsed or validated."""


@dataclass(frozen=True)
class DiffusionSettings:
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler: str = "deterministic"
    sampler_seed: int = 0
    train_steps: int = 2000
    train_batch: int = 32
    train_lr: float = 3e-3
    data_mean_scale: float = 0.5
    data_spread: float = 0.1
    data_seed: int = 0


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    out: str = "out"
    conditions: str = "all"
    eval_samples: int = 64
    eval_conditions: str = "all"
    sparsity: float = 0.2
    mode: str = "global"
    profile_T: str = "2,4,8,16,32"
    profile_repeats: int = 5
    profile_batch: int = 4
    gate_curve_deltas: str = "0.05,2"
    gate_curve_draws: int = 10000
    gate_curve_lambda_min: float = -6.0
    gate_curve_lambda_max: float = 6.0
    gate_curve_points: int = 49
    record_timing: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)
    gates: GateConfig = field(default_factory=GateConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=int(seed)))

    def with_out(self, out: str) -> "RunConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, out=str(out)))

    def condition_ids(self, spec: str | None = None) -> list:
        return parse_id_list(self.run.conditions if spec is None else spec,
                             self.model.n_conditions)


SECTIONS = {
    "model": DenoiserConfig,
    "diffusion": DiffusionSettings,
    "gates": GateConfig,
    "prune": PruneConfig,
    "run": RunSettings,
}


def parse_id_list(spec: str, n: int) -> list:
    spec = spec.strip()
    if spec == "all":
        return list(range(n))
    try:
        ids = [int(tok) for tok in spec.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"bad id list {spec!r}") from None
    bad = [i for i in ids if not 0 <= i < n]
    if bad or not ids:
        raise ConfigError(f"condition ids {bad or spec!r} outside [0, {n})")
    return ids


def parse_float_list(spec: str) -> list:
    try:
        return [float(tok) for tok in spec.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"bad number list {spec!r}") from None


def _convert(raw: str, default, section: str, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as "
                          f"{type(default).__name__}") from None


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    built = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    for name, cls in SECTIONS.items():
        defaults = cls()
        by_lower = {f.name.lower(): f.name for f in dataclasses.fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                attr = by_lower.get(key.lower())
                if attr is None:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                values[attr] = _convert(raw, getattr(defaults, attr), name, key)
        try:
            built[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    cfg = RunConfig(**built)
    if cfg.run.mode not in ("global", "local"):
        raise ConfigError(f"[run] mode must be global or local, got {cfg.run.mode!r}")
    if not 0.0 <= cfg.run.sparsity < 1.0:
        raise ConfigError(f"[run] sparsity must lie in [0, 1), got {cfg.run.sparsity}")
    if cfg.diffusion.sampler not in ("deterministic", "stochastic_shared"):
        raise ConfigError(f"[diffusion] unknown sampler {cfg.diffusion.sampler!r}")
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not valid UTF-8") from None
    return parse_config_text(text)


def dump_config(cfg: RunConfig) -> str:
    """Render a config in the same text format (all keys explicit)."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            value = getattr(getattr(cfg, name), f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)
