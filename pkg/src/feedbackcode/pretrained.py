"""Run configurations and trained ParamSets shipped with the package.

``data/configs/<name>.json`` holds CLI configs; ``data/params/<name>.json``
holds the ParamSets those configs produce with ``feedbackcode train``, and
``data/losses/<name>.csv`` their training-loss window means.
The CLI accepts a bare shipped name anywhere it accepts a path.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .params import ParamSet, load_params

_DATA = resources.files(__package__) / "data"


def _names(kind: str) -> list[str]:
    folder = _DATA / kind
    if not folder.is_dir():
        return []
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def config_names() -> list[str]:
    return _names("configs")


def params_names() -> list[str]:
    return _names("params")


def config_path(name: str) -> Path:
    return Path(str(_DATA / "configs" / f"{name}.json"))


def params_path(name: str) -> Path:
    return Path(str(_DATA / "params" / f"{name}.json"))


def loss_summary_path(name: str) -> Path:
    """1000-step window means of the training loss that produced ``name``."""
    return Path(str(_DATA / "losses" / f"{name}.csv"))


def load(name: str) -> ParamSet:
    if name not in params_names():
        raise KeyError(f"no shipped ParamSet named {name!r}; available: {params_names()}")
    return load_params(params_path(name))


def resolve(value: str, kind: str) -> str:
    """Return ``value`` unless it is not a file but names a shipped item."""
    if Path(value).exists():
        return value
    names = config_names() if kind == "configs" else params_names()
    if value in names:
        return str(config_path(value) if kind == "configs" else params_path(value))
    return value
