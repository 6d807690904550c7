"""Parameter containers, flat-vector layout and JSON persistence.

Learnable scalars are addressed by name; ``param_names(variant)`` fixes the
order used for gradient vectors and optimizer state::

    encoder   e1 e2 k1 k2 k3 k4 [e3 m1 m2 m3 m4 m5] [lambda1 lambda2]
    decoder   d1_1 .. d1_4, ..., d5_1 .. d5_4, l1 .. l5
    power     w_<cls>, a1_<cls>, a2_<cls>  for cls in POSITION_CLASSES

The bracketed groups exist only for the 7-state encoder and the varying-knee
encoder respectively (43 / 49 / 45 scalars).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

SCHEMA_VERSION = 1

POSITION_CLASSES = ("first", "interior", "penultimate", "last")
STREAMS = ("phase1", "parity1", "parity2")
N_UNITS = 5

BASE_ENCODER = ("e1", "e2", "k1", "k2", "k3", "k4")
SEVEN_STATE_ENCODER = ("e3", "m1", "m2", "m3", "m4", "m5")
KNEE_ENCODER = ("lambda1", "lambda2")
DECODER_NAMES = tuple(f"d{j}_{q}" for j in range(1, N_UNITS + 1) for q in range(1, 5)) + tuple(
    f"l{j}" for j in range(1, N_UNITS + 1)
)
POWER_NAMES = tuple(f"{s}_{c}" for s in ("w", "a1", "a2") for c in POSITION_CLASSES)


class ParamFileError(ValueError):
    """Raised for malformed, unknown-keyed or wrong-arity parameter files."""


@dataclass(frozen=True)
class VariantSpec:
    sign_type: int = 1
    s4: int = 1
    s5: int = -1
    n_hidden: int = 5
    knee_mode: str = "fixed"

    def __post_init__(self):
        if self.sign_type not in (1, 2):
            raise ValueError(f"sign_type must be 1 or 2, got {self.sign_type!r}")
        if self.s4 not in (1, -1) or self.s5 not in (1, -1):
            raise ValueError("resting values s4, s5 must be +1 or -1")
        if self.n_hidden not in (5, 7):
            raise ValueError(f"n_hidden must be 5 or 7, got {self.n_hidden!r}")
        if self.knee_mode not in ("fixed", "varying"):
            raise ValueError(f"knee_mode must be 'fixed' or 'varying', got {self.knee_mode!r}")
        if self.n_hidden == 7 and self.knee_mode != "fixed":
            raise ValueError("the 7-state encoder only supports fixed knees")

    @property
    def is_baseline(self) -> bool:
        return (self.sign_type, self.s4, self.s5) == (1, 1, -1)

    def label(self) -> str:
        return f"type{self.sign_type}_h4{self.s4:+d}_h5{self.s5:+d}_n{self.n_hidden}_{self.knee_mode}"

    def to_dict(self) -> dict:
        return {
            "sign_type": self.sign_type,
            "s4": self.s4,
            "s5": self.s5,
            "n_hidden": self.n_hidden,
            "knee_mode": self.knee_mode,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "VariantSpec":
        _reject_unknown(d, ("sign_type", "s4", "s5", "n_hidden", "knee_mode"), "variant")
        return cls(**d)


def all_sign_variants(n_hidden: int = 5, knee_mode: str = "fixed") -> list[VariantSpec]:
    """The eight (sign type, h4 rest, h5 rest) combinations, baseline first."""
    return [
        VariantSpec(t, s4, s5, n_hidden, knee_mode)
        for t in (1, 2)
        for s4, s5 in ((1, -1), (-1, -1), (1, 1), (-1, 1))
    ]


def encoder_names(variant: VariantSpec) -> tuple[str, ...]:
    names = BASE_ENCODER
    if variant.n_hidden == 7:
        names = names + SEVEN_STATE_ENCODER
    if variant.knee_mode == "varying":
        names = names + KNEE_ENCODER
    return names


def param_names(variant: VariantSpec) -> tuple[str, ...]:
    return encoder_names(variant) + DECODER_NAMES + POWER_NAMES


@dataclass(frozen=True)
class BlockConfig:
    K: int

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")

    @property
    def padded_len(self) -> int:
        return self.K + 1

    @property
    def N(self) -> int:
        return 3 * self.padded_len

    @property
    def rate(self) -> float:
        return self.K / self.N


def position_classes(padded_len: int) -> np.ndarray:
    """Position-class index (into POSITION_CLASSES) for each of the padded steps."""
    cls = np.ones(padded_len, dtype=np.intp)
    if padded_len >= 3:
        cls[-2] = 2
    cls[-1] = 3
    cls[0] = 0
    return cls


@dataclass(frozen=True)
class ParamSet:
    """All learnable scalars of one interpretable encoder/decoder pair.

    ``values`` maps every name of ``param_names(variant)`` to a float.
    ``norm_consts`` are the frozen per-stream divisors (phase1, parity1,
    parity2); ``None`` until calibrated.
    """

    variant: VariantSpec
    values: Mapping[str, float]
    K: int = 50
    norm_consts: tuple[float, float, float] | None = None
    training_meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        expected = param_names(self.variant)
        missing = [n for n in expected if n not in self.values]
        extra = [n for n in self.values if n not in expected]
        if missing or extra:
            raise ParamFileError(
                f"parameter arity mismatch for {self.variant.label()}: "
                f"missing {missing or 'none'}, unexpected {extra or 'none'}"
            )
        BlockConfig(self.K)

    @property
    def names(self) -> tuple[str, ...]:
        return param_names(self.variant)

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(self.K)

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def to_vector(self) -> np.ndarray:
        return np.array([float(self.values[n]) for n in self.names])

    def with_vector(self, vector) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (len(self.names),):
            raise ValueError(f"expected {len(self.names)} values, got shape {vector.shape}")
        return replace(self, values=dict(zip(self.names, map(float, vector))))

    def with_values(self, **updates: float) -> "ParamSet":
        unknown = set(updates) - set(self.names)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        return replace(self, values={**self.values, **{k: float(v) for k, v in updates.items()}})

    def with_norm(self, norm_consts) -> "ParamSet":
        return replace(self, norm_consts=None if norm_consts is None else tuple(float(c) for c in norm_consts))

    def with_meta(self, **meta) -> "ParamSet":
        return replace(self, training_meta={**self.training_meta, **meta})

    # structured views ---------------------------------------------------
    @property
    def encoder(self) -> dict:
        return {n: self.values[n] for n in encoder_names(self.variant)}

    @property
    def decoder_d(self) -> np.ndarray:
        return np.array([[self.values[f"d{j}_{q}"] for q in range(1, 5)] for j in range(1, N_UNITS + 1)])

    @property
    def decoder_l(self) -> np.ndarray:
        return np.array([self.values[f"l{j}"] for j in range(1, N_UNITS + 1)])

    def power(self, stream: str) -> np.ndarray:
        return np.array([self.values[f"{stream}_{c}"] for c in POSITION_CLASSES])


# ---------------------------------------------------------------------------
# JSON persistence

_TOP_KEYS = ("schema_version", "variant", "encoder", "decoder", "power", "normalization", "block", "training_meta")


def _reject_unknown(d: Mapping, allowed, where: str) -> None:
    if not isinstance(d, Mapping):
        raise ParamFileError(f"{where}: expected an object, got {type(d).__name__}")
    for key in d:
        if key not in allowed:
            raise ParamFileError(f"{where}: unknown key {key!r}")


def to_document(params: ParamSet) -> dict:
    v = params.values
    doc = {
        "schema_version": SCHEMA_VERSION,
        "variant": params.variant.to_dict(),
        "encoder": {n: v[n] for n in encoder_names(params.variant)},
        "decoder": {
            "d": params.decoder_d.tolist(),
            "l": params.decoder_l.tolist(),
        },
        "power": {s: params.power(s).tolist() for s in ("w", "a1", "a2")},
        "normalization": None
        if params.norm_consts is None
        else dict(zip(STREAMS, params.norm_consts)),
        "block": {"K": params.K},
        "training_meta": dict(params.training_meta),
    }
    return doc


def from_document(doc: Mapping) -> ParamSet:
    _reject_unknown(doc, _TOP_KEYS, "document")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ParamFileError(f"unsupported schema_version {version!r}")
    for key in ("variant", "encoder", "decoder", "power", "block"):
        if key not in doc:
            raise ParamFileError(f"document: missing key {key!r}")
    try:
        variant = VariantSpec.from_dict(doc["variant"])
    except TypeError as exc:
        raise ParamFileError(f"variant: {exc}") from None
    enc = doc["encoder"]
    expected = encoder_names(variant)
    _reject_unknown(enc, expected, "encoder")
    if len(enc) != len(expected):
        missing = [n for n in expected if n not in enc]
        raise ParamFileError(
            f"encoder: {variant.label()} needs {len(expected)} scalars, got {len(enc)} (missing {missing})"
        )
    values = {n: _scalar(enc[n], f"encoder.{n}") for n in expected}

    dec = doc["decoder"]
    _reject_unknown(dec, ("d", "l"), "decoder")
    d = np.asarray(dec.get("d"), dtype=object)
    l = np.asarray(dec.get("l"), dtype=object)
    if d.shape != (N_UNITS, 4) or l.shape != (N_UNITS,):
        raise ParamFileError(f"decoder: expected d of shape ({N_UNITS}, 4) and l of length {N_UNITS}")
    for j in range(N_UNITS):
        for q in range(4):
            values[f"d{j + 1}_{q + 1}"] = _scalar(d[j, q], f"decoder.d[{j}][{q}]")
        values[f"l{j + 1}"] = _scalar(l[j], f"decoder.l[{j}]")

    power = doc["power"]
    _reject_unknown(power, ("w", "a1", "a2"), "power")
    for s in ("w", "a1", "a2"):
        arr = power.get(s)
        if not isinstance(arr, list) or len(arr) != len(POSITION_CLASSES):
            raise ParamFileError(f"power.{s}: expected {len(POSITION_CLASSES)} weights")
        for c, x in zip(POSITION_CLASSES, arr):
            values[f"{s}_{c}"] = _scalar(x, f"power.{s}")

    norm = doc.get("normalization")
    norm_consts = None
    if norm is not None:
        _reject_unknown(norm, STREAMS, "normalization")
        if set(norm) != set(STREAMS):
            raise ParamFileError(f"normalization: expected keys {STREAMS}")
        norm_consts = tuple(_scalar(norm[s], f"normalization.{s}") for s in STREAMS)

    block = doc["block"]
    _reject_unknown(block, ("K",), "block")
    if not isinstance(block.get("K"), int):
        raise ParamFileError("block.K: expected an integer")
    meta = doc.get("training_meta") or {}
    if not isinstance(meta, Mapping):
        raise ParamFileError("training_meta: expected an object")
    return ParamSet(variant, values, K=block["K"], norm_consts=norm_consts, training_meta=dict(meta))


def _scalar(x, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ParamFileError(f"{where}: expected a number, got {x!r}")
    return float(x)


_FLOAT_TOKEN = re.compile(r'"\x00F(\d+)\x00"')


def dumps(doc) -> str:
    """JSON text with every float written as ``%.16e`` (17 significant digits)."""
    floats: list[float] = []

    def mark(obj):
        if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
            return obj
        if isinstance(obj, (float, np.floating)):
            floats.append(float(obj))
            return f"\x00F{len(floats) - 1}\x00"
        if isinstance(obj, Mapping):
            return {str(k): mark(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [mark(v) for v in obj]
        if isinstance(obj, np.integer):
            return int(obj)
        raise TypeError(f"cannot serialise {type(obj).__name__}")

    text = json.dumps(mark(doc), indent=2, ensure_ascii=True)
    # json escapes \x00 as \u0000
    text = text.replace("\\u0000", "\x00")
    return _FLOAT_TOKEN.sub(lambda m: _fmt(floats[int(m.group(1))]), text) + "\n"


def _fmt(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError(f"non-finite scalar {x!r} cannot be stored")
    return f"{x:.16e}"


def save_params(params: ParamSet, path) -> None:
    Path(path).write_text(dumps(to_document(params)))


def load_params(path) -> ParamSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"parameter file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParamFileError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return from_document(doc)
