"""Flat ``key = value`` run configuration.

Keys are dotted (``diffusion.alpha = 0.15``), ``#`` starts a comment, and
unknown keys are rejected.  :func:`dump_config` writes every key in a
canonical form, so a snapshot fed back through :func:`parse_config`
reproduces the same :class:`RunConfig`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .diffusion import DiffusionConfig
from .evaluation import ProbeConfig
from .trainer import AugSpec, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration file, key or value."""


MODES = ("full", "cluster")


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "data/cora"
    mode: str = "full"
    train: TrainConfig = TrainConfig()
    aug: AugSpec = AugSpec()
    probe: ProbeConfig = ProbeConfig()
    clusters: int = 16
    batches: int | None = None
    partition: str | None = None
    split_seed: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clusters < 1 or (self.batches is not None and self.batches < 1):
            raise ConfigError("clusters and batches must be >= 1")


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt(parse):
    return lambda s: None if s.lower() == "none" else parse(s)


def _int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


_PARSERS = {int: int, float: float, bool: _bool, str: str}

# key -> (group, field, parser); group None means a top-level RunConfig field
SCHEMA: dict[str, tuple[str | None, str, object]] = {
    "dataset": (None, "dataset", str),
    "mode": (None, "mode", str),
    "cluster.k": (None, "clusters", int),
    "cluster.b": (None, "batches", _opt(int)),
    "cluster.partition": (None, "partition", _opt(str)),
    "split.seed": (None, "split_seed", _opt(int)),
    "aug.variant": ("aug", "variant", str),
    "aug.pairing": ("aug", "pairing", str),
    "aug.permutation_seed": ("aug", "permutation_seed", _opt(int)),
    "model.layers": ("train", "layers", _int_tuple),
}
for _f in fields(TrainConfig):
    if _f.name == "layers":
        continue
    prefix = "model" if _f.name in ("predictor_hidden", "activation", "projector", "precision") else "train"
    SCHEMA[f"{prefix}.{_f.name}"] = ("train", _f.name, _PARSERS[type(getattr(TrainConfig(), _f.name))])
for _f in fields(DiffusionConfig):
    if _f.name != "kind":
        SCHEMA[f"diffusion.{_f.name}"] = ("diffusion", _f.name, _PARSERS[type(getattr(DiffusionConfig(), _f.name))])
for _f in fields(ProbeConfig):
    SCHEMA[f"probe.{_f.name}"] = ("probe", _f.name, _PARSERS[type(getattr(ProbeConfig(), _f.name))])


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    out = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        out[key] = value
    return out


def build_config(values: dict[str, str], base: RunConfig = RunConfig()) -> RunConfig:
    """Apply raw string values on top of ``base``; every value is validated."""
    top, groups = {}, {"train": {}, "aug": {}, "diffusion": {}, "probe": {}}
    for key, raw in values.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        group, name, parse = SCHEMA[key]
        try:
            val = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        (top if group is None else groups[group])[name] = val
    try:
        train = replace(base.train, **groups["train"])
        diffusion = replace(base.aug.diffusion, **groups["diffusion"])
        aug = replace(base.aug, diffusion=diffusion, **groups["aug"])
        probe = replace(base.probe, **groups["probe"])
        return replace(base, train=train, aug=aug, probe=probe, **top)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, base: RunConfig = RunConfig(), source: str = "<config>") -> RunConfig:
    return build_config(parse_lines(text.splitlines(), source), base)


def load_config(path: str | Path, base: RunConfig = RunConfig()) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, base, str(path))


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_values(cfg: RunConfig) -> dict[str, str]:
    out = {}
    for key, (group, name, _) in SCHEMA.items():
        if group is None:
            obj = cfg
        elif group == "diffusion":
            obj = cfg.aug.diffusion
        else:
            obj = getattr(cfg, group)
        out[key] = _fmt(getattr(obj, name))
    return out


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(config_values(cfg).items()))
