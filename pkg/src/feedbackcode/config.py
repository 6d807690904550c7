"""Run-configuration schema for the command-line interface.

A config is a JSON object whose sections mirror the modules they feed.
Every key, its type, default and consumer is listed in ``SCHEMA``;
``schema_markdown()`` renders the same table for the README.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any

from . import pretrained
from .channel import NOISELESS
from .params import VariantSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field or line."""


@dataclass(frozen=True)
class Field:
    kind: str  # int | float | snr | bool | str | list[float] | list[snr] | list[str] | object
    default: Any
    module: str
    help: str


_T = TrainConfig()

SCHEMA: dict[str, dict[str, Field]] = {
    "": {
        "seed": Field("int", 0, "all", "master seed; --seed overrides"),
        "params": Field("str", None, "params", "ParamSet JSON (or shipped name) read by eval/analysis/calibrate"),
    },
    "train": {
        "K": Field("int", _T.K, "trainer", "message bits per block"),
        "batch_blocks": Field("int", _T.batch_blocks, "trainer", "blocks per gradient step"),
        "steps": Field("int", _T.steps, "trainer", "optimizer steps"),
        "lr": Field("float", _T.lr, "trainer", "initial Adam learning rate"),
        "lr_decay_at": Field("list[float]", list(_T.lr_decay_at), "trainer", "fractions of steps at which lr decays"),
        "lr_decay": Field("float", _T.lr_decay, "trainer", "multiplicative lr decay factor"),
        "beta1": Field("float", _T.beta1, "trainer", "Adam first-moment decay"),
        "beta2": Field("float", _T.beta2, "trainer", "Adam second-moment decay"),
        "adam_eps": Field("float", _T.adam_eps, "trainer", "Adam epsilon"),
        "clip_norm": Field("float", _T.clip_norm, "trainer", "global gradient-norm clip (<= 0 disables)"),
        "snr_f_db": Field("snr", _T.snr_f_db, "trainer", "training forward SNR in dB"),
        "snr_fb_db": Field("snr", _T.snr_fb_db, "trainer", "training feedback SNR in dB or \"noiseless\""),
        "variant": Field("object", VariantSpec().to_dict(), "codec",
                         "sign_type 1 or 2, s4 and s5 +1 or -1, n_hidden 5 or 7, knee_mode fixed or varying"),
        "calibration_blocks": Field("int", _T.calibration_blocks, "codec", "blocks for the final normalization run"),
        "init_scale": Field("float", _T.init_scale, "trainer", "scale of the initial encoder coefficients"),
    },
    "channel": {
        "snr_f_db": Field("snr", 0.0, "channel", "forward SNR in dB for evaluation and analysis"),
        "snr_fb_db": Field("snr", NOISELESS, "channel", "feedback SNR in dB or \"noiseless\""),
    },
    "ber": {
        "min_errors": Field("int", 100, "ber", "stop once this many bit errors are seen"),
        "max_bits": Field("float", 1e8, "ber", "stop after this many message bits"),
        "chunk_blocks": Field("int", 10_000, "ber", "blocks per work item"),
    },
    "sweep": {
        "snr_f_db": Field("list[snr]", [-1.0, 0.0, 1.0], "ber", "forward SNR grid"),
        "snr_fb_db": Field("list[snr]", [NOISELESS], "ber", "feedback SNR grid"),
        "params_by_snr_f": Field("object", None, "ber",
                                 "optional map from forward SNR (as a string) to a ParamSet path"),
    },
    "influence": {
        "targets": Field("list[str]", ["bit", "phase1_noise", "phase2_noise_1", "phase2_noise_2"], "analysis",
                         "perturbed inputs"),
        "deltas": Field("list[float]", [1.0, -1.0], "analysis", "additive noise perturbations (bits are flipped)"),
        "t": Field("int", 5, "analysis", "1-based perturbed position"),
        "samples": Field("int", 10_000, "analysis", "Monte-Carlo blocks"),
        "delta_threshold": Field("float", 0.05, "analysis", "relative threshold for influence length"),
    },
    "outliers": {
        "blocks": Field("int", 10_000, "analysis", "simulated blocks"),
        "threshold": Field("float", 0.1, "analysis", "abs(h - resting) above this is an outlier"),
    },
    "scatter": {
        "samples": Field("int", 50, "analysis", "blocks exported (rows = samples * K)"),
    },
    "pwl": {
        "input": Field("str", None, "analysis", "scatter CSV to fit; generated from params when null"),
        "parity": Field("str", "parity1", "analysis", "column fitted against n_eff: parity1 or parity2"),
        "penalty": Field("float", 1.0, "analysis", "segmented-least-squares cost per segment"),
        "max_points": Field("int", 5000, "analysis", "down-sampling cap"),
        "fix_knee_at_zero": Field("bool", False, "analysis", "pin the knee-fit breakpoint at 0"),
    },
    "calibrate": {
        "blocks": Field("int", 100_000, "codec", "calibration blocks"),
    },
}


def schema_markdown() -> str:
    lines = ["| key | type | default | module | meaning |", "|---|---|---|---|---|"]
    for section, fields in SCHEMA.items():
        for name, f in fields.items():
            key = f"{section}.{name}" if section else name
            lines.append(f"| `{key}` | {f.kind} | `{json.dumps(f.default)}` | {f.module} | {f.help} |")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# validation


def _check(kind: str, value, where: str):
    if value is None:
        return None
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{where}: expected a finite number, got {value!r}")
        return float(value)
    if kind == "snr":
        if isinstance(value, str):
            if value.strip().lower() != NOISELESS:
                raise ConfigError(f"{where}: expected a number or \"noiseless\", got {value!r}")
            return NOISELESS
        return _check("float", value, where)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if kind.startswith("list["):
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{where}: expected a non-empty list, got {value!r}")
        inner = kind[5:-1]
        return [_check(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if kind == "object":
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {value!r}")
        return dict(value)
    raise AssertionError(kind)


def resolve(raw: dict) -> dict:
    """Merge ``raw`` over the defaults; every leaf is type-checked."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    out: dict = {}
    for section, fields in SCHEMA.items():
        src = raw if section == "" else raw.get(section, {})
        if section and not isinstance(src, dict):
            raise ConfigError(f"{section}: expected an object")
        if section:
            unknown = sorted(set(src) - set(fields))
            if unknown:
                raise ConfigError(f"{section}.{unknown[0]}: unknown config key")
        dest = out if section == "" else out.setdefault(section, {})
        for name, f in fields.items():
            where = f"{section}.{name}" if section else name
            dest[name] = _check(f.kind, src.get(name, f.default), where)
    unknown = sorted(set(raw) - set(SCHEMA) - set(SCHEMA[""]))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config key")
    try:
        VariantSpec.from_dict(out["train"]["variant"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train.variant: {exc}") from None
    return out


def load(path) -> dict:
    """Parse and resolve a config file (``None`` gives the defaults)."""
    if path is None:
        return resolve({})
    path = pretrained.resolve(str(path), "configs")
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return resolve(raw)


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["variant"] = VariantSpec.from_dict(t["variant"])
    try:
        return TrainConfig(seed=cfg["seed"], **t)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
