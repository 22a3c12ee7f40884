"""Flat ``key = value`` configuration with profile defaults and overrides.

Blank lines and ``#`` comments are ignored. Keys belong to the generator
(:class:`SynthConfig`), to training (:class:`TrainConfig`), or both (``seed``).
``profile`` selects ``desk`` (default) or ``full`` defaults, and ``lambda``
is accepted for the smoothness weight ``lam``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

from .synth import DESK_PROFILE, FULL_PROFILE, SynthConfig
from .training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config_text", "load_config_file", "resolve_config", "PROFILES"]

PROFILES = {
    "desk": {"synth": DESK_PROFILE, "train": {"batch_size": 16, "max_epochs": 50}},
    "full": {"synth": FULL_PROFILE, "train": {"batch_size": 64, "max_epochs": 200}},
}
ALIASES = {"lambda": "lam", "students": "n_students", "questions": "n_questions", "concepts": "n_concepts"}
SHARED = {"seed"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    profile: str
    synth: SynthConfig
    train: TrainConfig

    def to_dict(self) -> dict:
        return {"profile": self.profile, "synth": asdict(self.synth), "train": asdict(self.train)}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config_file(path) -> dict[str, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config_text(text, str(p))


def _coerce(value, typ, key: str):
    if not isinstance(value, str):
        return value
    try:
        if typ in (bool, "bool"):
            v = value.lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


def _types(cls) -> dict:
    return {f.name: f.type for f in fields(cls)}


def resolve_config(file_values: Mapping | None = None, overrides: Mapping | None = None) -> RunConfig:
    """Profile defaults, then file values, then overrides (flags win)."""
    merged = {ALIASES.get(k, k): v for k, v in (file_values or {}).items()}
    merged.update({ALIASES.get(k, k): v for k, v in (overrides or {}).items() if v is not None})
    profile = str(merged.pop("profile", "desk"))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    s_types, t_types = _types(SynthConfig), _types(TrainConfig)
    synth_kw = dict(PROFILES[profile]["synth"])
    train_kw = dict(PROFILES[profile]["train"])
    for key, value in merged.items():
        known = False
        if key in s_types:
            synth_kw[key] = _coerce(value, s_types[key], key)
            known = True
        if key in t_types:
            train_kw[key] = _coerce(value, t_types[key], key)
            known = True
        if not known:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        synth = SynthConfig(**synth_kw)
        train = TrainConfig(**train_kw)
        synth.validate()
        train.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(profile, synth, train)
