"""Key-value config files with sections, shared by every subcommand.

A config file is INI-style text::

    [run]
    batch_size = 8
    lr = 0.003

    [schedule]
    alpha_start = 5.0

Keys are addressed as ``section.key``; ``--set section.key=value`` on the
command line overrides the file. Values are Python literals (numbers,
booleans, tuples/lists); anything that does not parse as a literal is kept
as a string.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .emd import AdaptSchedule
from .segnet import SegNetConfig
from .synthdata import DomainSpec
from .trainer import TrainRunConfig


class ConfigError(ValueError):
    pass


# The adaptation recipe used by ``adapt`` unless overridden: a distillation
# warm-up whose rate anneals from 3e-3, then the schedule at 1e-4.
ADAPT_DEFAULTS: Dict[str, Any] = {
    "run.lr": 1e-4,
    "run.warmup_lr": 3e-3,
    "run.warmup_iters": 600,
    "schedule.total_iters": 300,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "bbuda": {},
    # the ablation without entropy minimisation
    "bbuda-ent": {"schedule.alpha_start": 0.0, "schedule.alpha_end": 0.0},
}


def parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_text(text: str, source: str = "<string>") -> Dict[str, Any]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
    flat: Dict[str, Any] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[f"{section}.{key}"] = parse_value(value)
    return flat


def load_file(path) -> Dict[str, Any]:
    path = Path(path)
    return parse_text(path.read_text(), source=str(path))


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        key = key.strip()
        if not sep or "." not in key:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        out[key] = parse_value(value)
    return out


def dump_text(flat: Dict[str, Any]) -> str:
    sections: Dict[str, Dict[str, Any]] = {}
    for dotted, value in flat.items():
        section, _, key = dotted.partition(".")
        sections.setdefault(section, {})[key] = value
    lines = []
    for section, items in sections.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v!r}" for k, v in items.items()]
        lines.append("")
    return "\n".join(lines)


def _section(flat: Dict[str, Any], name: str) -> Dict[str, Any]:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}


def _build(cls, values: Dict[str, Any], section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


_RUN_SECTIONS = ("run", "net", "schedule")


def build_run_config(flat: Dict[str, Any]) -> TrainRunConfig:
    """Materialise a :class:`TrainRunConfig` from ``run``/``net``/``schedule`` keys."""
    extra = sorted({k.partition(".")[0] for k in flat} - set(_RUN_SECTIONS))
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(extra)}")
    run = _section(flat, "run")
    for nested in ("net", "schedule"):
        if nested in run:
            raise ConfigError(f"use the [{nested}] section instead of run.{nested}")
    net = _build(SegNetConfig, _section(flat, "net"), "net")
    schedule = _build(AdaptSchedule, _section(flat, "schedule"), "schedule")
    return _build(TrainRunConfig, dict(run, net=net, schedule=schedule), "run")


def flatten_run_config(config: TrainRunConfig) -> Dict[str, Any]:
    """Inverse of :func:`build_run_config`: every field, defaults included."""
    flat: Dict[str, Any] = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            section = f.name
            for g in dataclasses.fields(value):
                flat[f"{section}.{g.name}"] = getattr(value, g.name)
        else:
            flat[f"run.{f.name}"] = value
    return flat


def resolve_run_config(
    path: Optional[str] = None,
    overrides: Iterable[str] = (),
    base: Optional[Dict[str, Any]] = None,
    preset: Optional[str] = None,
) -> TrainRunConfig:
    """Layer ``base`` < preset < config file < ``--set`` overrides."""
    flat: Dict[str, Any] = dict(base or {})
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        flat.update(PRESETS[preset])
    if path is not None:
        flat.update(load_file(path))
    flat.update(parse_overrides(overrides))
    return build_run_config(flat)


def resolve_domain_spec(base: DomainSpec, path: Optional[str] = None,
                        overrides: Iterable[str] = ()) -> DomainSpec:
    """Domain specs use a single ``[domain]`` section in the same dialect."""
    flat: Dict[str, Any] = {}
    if path is not None:
        flat.update(load_file(path))
    flat.update(parse_overrides(overrides))
    extra = sorted({k.partition(".")[0] for k in flat} - {"domain"})
    if extra:
        raise ConfigError(f"unknown section(s) in domain spec: {', '.join(extra)}")
    values = _section(flat, "domain")
    known = {f.name for f in dataclasses.fields(DomainSpec)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [domain]: {', '.join(unknown)}")
    try:
        return base.replace(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[domain]: {exc}") from None
