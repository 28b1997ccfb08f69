"""Pipeline configuration: one TOML file with a section per sub-config, overridable by flags."""

import dataclasses
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .rebalance import DhrConfig, RebalanceConfig, StageToggles
from .refine import RefinerConfig
from .seed_init import SeedConfig
from .sinkhorn import OtConfig
from .synth import SynthConfig
from .utils import *


@dataclass(frozen=True)
class IoConfig:
    input_dir: str | None = None
    output_dir: str | None = None
    workers: int | None = None  # None: half the CPUs
    save_stages: bool = False

    def __post_init__(self):
        if self.workers is not None and self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}.")

    def resolved_workers(self) -> int:
        return self.workers if self.workers is not None else default_workers()


@dataclass(frozen=True)
class PipelineConfig:
    ot: OtConfig = OtConfig()
    seed: SeedConfig = SeedConfig()
    rebalance: RebalanceConfig = RebalanceConfig()
    refiner: RefinerConfig = RefinerConfig()
    synth: SynthConfig = SynthConfig()
    stages: StageToggles = StageToggles()
    io: IoConfig = IoConfig()

    def dhr_config(self) -> DhrConfig:
        """The propagation config. The `[ot]` section drives every transport solve."""
        return DhrConfig(
            ot=self.ot,
            seed=self.seed,
            rebalance=dataclasses.replace(self.rebalance, ot=self.ot),
            refiner=self.refiner,
            stages=self.stages,
        )

    def __repr__(self):
        return repr_modified_args(self)


# TOML key aliases, for keys that are not valid Python identifiers
_KeyAliases = {"ot": {"lambda": "lam"}}


def _section_fields(section: str) -> set[str]:
    names = {f.name for f in dataclasses.fields(getattr(PipelineConfig(), section))}
    if section == "rebalance":
        # the rebalance solves share the [ot] section
        names.discard("ot")
    return names


def _normalize(value: Any) -> Any:
    return tuple(value) if isinstance(value, list) else value


def with_overrides(cfg: PipelineConfig, overrides: Mapping[str, Mapping[str, Any]]) -> PipelineConfig:
    """Replace fields section by section; `None` values are skipped so unset flags keep the
    file (or default) value. Invalid values raise `ConfigError`."""
    sections = {f.name for f in dataclasses.fields(PipelineConfig)}
    changes = dict[str, Any]()
    for section, values in overrides.items():
        if section not in sections:
            raise ConfigError(f"Unknown config section [{section}].")
        known = _section_fields(section)
        aliases = _KeyAliases.get(section, {})
        updates = dict[str, Any]()
        for key, value in values.items():
            name = aliases.get(key, key)
            if name not in known:
                raise ConfigError(f"Unknown key {key!r} in section [{section}].")
            if value is not None:
                updates[name] = _normalize(value)
        if updates:
            try:
                changes[section] = dataclasses.replace(getattr(cfg, section), **updates)
            except TypeError as e:
                raise ConfigError(f"Invalid value in section [{section}]: {e}") from e
    return dataclasses.replace(cfg, **changes)


def load_config(path: Path | str | None) -> PipelineConfig:
    """Read the TOML file (if any), then let `DHR_THREADS` replace its worker count.
    Command-line flags are applied on top of the result with `with_overrides`."""
    if path is None:
        return _with_env(PipelineConfig())
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e}).") from e
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e}).") from e
    for section, values in data.items():
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top-level key {section!r} must be a [section].")
    logging.info(f"[config] Loaded config from '{path}'")
    return _with_env(with_overrides(PipelineConfig(), data))


def _with_env(cfg: PipelineConfig) -> PipelineConfig:
    return with_overrides(cfg, {"io": {"workers": env_workers()}})
