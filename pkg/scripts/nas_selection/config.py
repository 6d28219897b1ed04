"""
Run configuration: one frozen dataclass per section, layered from defaults, a
config file, environment variables and command-line flags (later wins).

File grammar is TOML with dotted keys, e.g.::

    space.variant = "S2P"
    train.epochs = 30
    space.s1_pools."0->2" = ["skip", "dense_relu"]

Environment overrides use ``NAS_SELECTION__<SECTION>__<KEY>`` and flags use
``--<section>.<key> <value>``; both values are read as TOML values when they
parse, otherwise as plain strings.
"""

import json
import os
import tomllib
import types
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

from .datasets import DatasetKind
from .errors import ConfigError, NasSelectionError
from .searchspace import DEFAULT_GENOTYPE_CAP, CellSpec, SpaceVariant, build_space
from .selection import SelectConfig, SelectMethod
from .trainer import AlphaMode, RsSchedule, TrainConfig

ENV_PREFIX = "NAS_SELECTION__"
RESOLVED_CONFIG_NAME = "resolved_config.toml"


@dataclass(frozen=True)
class SpaceSection:
    variant: str = "S2P"
    num_inputs: int = 2
    num_intermediate: int = 2
    feature_width: int = 8
    s1_pools: dict[str, list[str]] = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "SPIRALS"
    n: int = 600
    classes: int = 3
    noise: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 60
    batch: int = 64
    lr_w: float = 0.05
    lr_alpha: float = 0.3
    momentum: float = 0.9
    alpha_mode: str = "BILEVEL"
    rs_sigma: float = 0.3
    rs_schedule: str = "batch"
    finetune_alpha: bool = True
    mask_renormalize: bool = True
    seed: int = 0


@dataclass(frozen=True)
class SelectSection:
    method: str = "pt"
    finetune_epochs: int = 5
    topology_finetune_epochs: int | None = None
    strength_epochs: int | None = None
    seed: int = 0
    workers: int = 1


@dataclass(frozen=True)
class BenchSection:
    seeds_per_arch: int = 3
    cap: int = DEFAULT_GENOTYPE_CAP
    workers: int = 1
    epochs: int | None = None


@dataclass(frozen=True)
class AnalyzeSection:
    trials: int = 5
    edges: list[str] = field(default_factory=list)
    num_edges: int = 3
    eval_split: str = "val"
    grid_step: float = 0.001
    chain_depth: int = 4
    budgets: list[int] = field(default_factory=lambda: [0, 1, 5, 10])
    gradcheck_models: int = 100
    gradcheck_tolerance: float = 1e-4
    oracle_sets: int = 20


@dataclass(frozen=True)
class IoSection:
    out_dir: str = "./out/nas_selection"
    run_name: str = ""
    cache_dir: str = ""
    checkpoint_every: int = 10


SECTIONS: dict[str, type] = {
    "space": SpaceSection,
    "dataset": DatasetSection,
    "train": TrainSection,
    "select": SelectSection,
    "bench": BenchSection,
    "analyze": AnalyzeSection,
    "io": IoSection,
}


@dataclass(frozen=True)
class Config:
    space: SpaceSection = field(default_factory=SpaceSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    select: SelectSection = field(default_factory=SelectSection)
    bench: BenchSection = field(default_factory=BenchSection)
    analyze: AnalyzeSection = field(default_factory=AnalyzeSection)
    io: IoSection = field(default_factory=IoSection)

    def validate(self) -> None:
        """Check enum-valued keys and build the space once; raises ConfigError."""
        try:
            DatasetKind.parse(self.dataset.kind)
            SelectMethod.parse(self.select.method)
            self.train_config().validate(strict=True)
            self.build_spec()
        except (NasSelectionError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if self.analyze.eval_split not in ("train", "val", "test"):
            raise ConfigError("analyze.eval_split must be train, val or test")
        if self.select.workers < 1 or self.bench.workers < 1:
            raise ConfigError("workers must be >= 1")

    def build_spec(self) -> CellSpec:
        return build_space(
            SpaceVariant.parse(self.space.variant),
            self.space.num_inputs,
            self.space.num_intermediate,
            self.space.feature_width,
            self.space.s1_pools or None,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        try:
            mode, schedule = AlphaMode(t.alpha_mode.upper()), RsSchedule(t.rs_schedule.lower())
        except ValueError as e:
            raise ConfigError(f"invalid train setting: {e}") from e
        return TrainConfig(
            epochs=t.epochs,
            batch_size=t.batch,
            lr_w=t.lr_w,
            lr_alpha=t.lr_alpha,
            momentum=t.momentum,
            alpha_mode=mode,
            rs_sigma=t.rs_sigma,
            rs_schedule=schedule,
            finetune_epochs=self.select.finetune_epochs,
            finetune_alpha=t.finetune_alpha,
            seed=t.seed,
        )

    def bench_train_config(self) -> TrainConfig:
        """From-scratch recipe: the search recipe, optionally with its own epoch count."""
        config = self.train_config()
        if self.bench.epochs is not None:
            config = replace(config, epochs=self.bench.epochs)
        return config

    def select_config(self) -> SelectConfig:
        s = self.select
        return SelectConfig(
            method=SelectMethod.parse(s.method),
            finetune_epochs=s.finetune_epochs,
            topology_finetune_epochs=s.topology_finetune_epochs,
            strength_epochs=s.strength_epochs,
            seed=s.seed,
            workers=s.workers,
            train=self.train_config(),
        )


# ---------------------------------------------------------------------------
# Value coercion
# ---------------------------------------------------------------------------


def _parse_scalar(text: str) -> Any:
    """Read a string as a TOML value, falling back to the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _coerce(value: Any, annotation: Any, where: str) -> Any:
    origin = get_origin(annotation)
    if origin in (Union, types.UnionType):
        inner = [a for a in get_args(annotation) if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is list:
        (item,) = get_args(annotation)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(v, item, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        _, item = get_args(annotation)
        if not isinstance(value, Mapping):
            raise ConfigError(f"{where}: expected a table, got {value!r}")
        return {str(k): _coerce(v, item, f"{where}.{k}") for k, v in value.items()}
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if isinstance(value, bool) or isinstance(value, list | dict):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return str(value)
    raise ConfigError(f"{where}: unsupported type {annotation}")


def _apply(config: Config, updates: Mapping[tuple[str, str], Any], source: str) -> Config:
    by_section: dict[str, dict[str, Any]] = {}
    for (section, key), value in updates.items():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section {section!r}")
        cls = SECTIONS[section]
        hints = get_type_hints(cls)
        if key not in hints:
            raise ConfigError(f"{source}: unknown key {section}.{key}")
        by_section.setdefault(section, {})[key] = _coerce(value, hints[key], f"{section}.{key}")
    for section, values in by_section.items():
        config = replace(config, **{section: replace(getattr(config, section), **values)})
    return config


def _flatten_file(data: Mapping[str, Any], source: str) -> dict[tuple[str, str], Any]:
    updates = {}
    for section, table in data.items():
        if not isinstance(table, Mapping):
            raise ConfigError(f"{source}: top-level key {section!r} is not a section")
        for key, value in table.items():
            updates[(section, key)] = value
    return updates


def _split_key(dotted: str, source: str) -> tuple[str, str]:
    section, _, key = dotted.partition(".")
    if not section or not key:
        raise ConfigError(f"{source}: expected <section>.<key>, got {dotted!r}")
    return section, key


def env_overrides(environ: Mapping[str, str]) -> dict[tuple[str, str], Any]:
    updates = {}
    for name, text in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX) :].lower().split("__")
        if len(parts) != 2:
            raise ConfigError(f"environment variable {name}: expected {ENV_PREFIX}SECTION__KEY")
        updates[(parts[0], parts[1])] = _parse_scalar(text)
    return updates


def flag_overrides(tokens: Sequence[str]) -> dict[tuple[str, str], Any]:
    """Parse ``--section.key value`` and ``--section.key=value`` pairs."""
    updates = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        name, eq, text = token[2:].partition("=")
        if not eq:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {token} needs a value")
            text = tokens[i + 1]
            i += 1
        updates[_split_key(name, "flag")] = _parse_scalar(text)
        i += 1
    return updates


def load_config(
    path: Path | None = None,
    overrides: Sequence[str] = (),
    environ: Mapping[str, str] | None = None,
) -> Config:
    """
    Resolve the layered configuration.

    Args:
        path: Optional TOML config file
        overrides: Remaining command-line tokens (``--section.key value``)
        environ: Environment mapping (default: ``os.environ``)

    Returns:
        Validated Config

    Raises:
        ConfigError: Unreadable file, unknown key, bad type or invalid value
    """
    config = Config()
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        config = _apply(config, _flatten_file(data, str(path)), str(path))
    env = os.environ if environ is None else environ
    config = _apply(config, env_overrides(env), "environment")
    config = _apply(config, flag_overrides(overrides), "command line")
    config.validate()
    return config


# ---------------------------------------------------------------------------
# Resolved snapshot
# ---------------------------------------------------------------------------


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot write {value!r} as a TOML value")


def config_to_toml(config: Config) -> str:
    """Deterministic dotted-key dump; sections in fixed order, keys sorted. Unset keys omitted."""
    lines = []
    for section in SECTIONS:
        values = getattr(config, section)
        for f in sorted(fields(values), key=lambda item: item.name):
            value = getattr(values, f.name)
            if value is None:
                continue
            if isinstance(value, dict):
                prefix = f"{section}.{f.name}"
                for key in sorted(value):
                    lines.append(f"{prefix}.{json.dumps(key)} = {_toml_value(value[key])}")
                continue
            lines.append(f"{section}.{f.name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def write_resolved_config(config: Config, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    path.write_text(config_to_toml(config), encoding="utf-8")
    return path


def s1_pools_fragment(pools: Mapping[str, Sequence[str]]) -> str:
    """Config fragment that reproduces a derived S1P space."""
    lines = ['space.variant = "S1P"']
    for key in sorted(pools):
        lines.append(f"space.s1_pools.{json.dumps(key)} = {_toml_value(list(pools[key]))}")
    return "\n".join(lines) + "\n"

