"""Interpretable feedback encoder (5/7 hidden states, fixed or varying knee),
power allocation, and the five-unit interpretable decoder.

The math lives in small elementwise helpers that accept floats, numpy arrays
or ``autodiff.Var``; the step-level API (``update_hidden``, ``parity_pair``)
and the batched simulator (``forward``) both call them, so evaluation and
training run the same expressions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .channel import ChannelConfig, ChannelRealization, sample_bits, sample_realizations
from .params import (
    N_UNITS,
    POSITION_CLASSES,
    BlockConfig,
    ParamSet,
    VariantSpec,
    param_names,
    position_classes,
)


# ---------------------------------------------------------------------------
# sign bookkeeping


@dataclass(frozen=True)
class VariantSigns:
    """Sign pattern of one equivalent code.

    ``stream2`` multiplies the whole second parity (and, to stay consistent,
    every use of the second phase-2 noise); it is +1 for Type 1 and -1 for
    Type 2.  ``h4_rest``/``h5_rest`` are the saturated values of h4/h5;
    ``coef4``/``coef5`` are the signs in front of ``e2*h4``/``e2*h5`` in the
    parities, chosen so the resting values cancel.
    """

    stream2: int
    h4_rest: int
    h5_rest: int
    coef4: int
    coef5: int

    def current_combiner(self, y1, y2):
        return y1 - self.stream2 * y2

    def future_combiner(self, y1, y2):
        return y1 + self.stream2 * y2


def variant_signs(spec: VariantSpec) -> VariantSigns:
    if not isinstance(spec, VariantSpec):
        raise TypeError(f"expected VariantSpec, got {type(spec).__name__}")
    stream2 = 1 if spec.sign_type == 1 else -1
    return VariantSigns(stream2=stream2, h4_rest=spec.s4, h5_rest=spec.s5, coef4=-spec.s4, coef5=spec.s5)


# ---------------------------------------------------------------------------
# elementwise building blocks


def bpsk(b):
    return 2 * np.asarray(b) - 1


def indicator(z):
    """1 where the argument is non-negative, else 0 (so indicator(0) == 1)."""
    return (np.asarray(ad.value(z)) >= 0).astype(np.float64)


def nonrecurrent_term(b, n_eff, lambda1=0.0, lambda2=0.0):
    """Knee-gated phase-1 noise ``u * I(-(2b-1) u)``.

    ``u = n_eff + lambda1`` for b = 0 and ``u = n_eff - lambda2`` for b = 1.
    The indicator is evaluated on values only, so under differentiation it
    acts as a constant mask.
    """
    b = np.asarray(b)
    zero = (b == 0).astype(np.float64)
    u = n_eff + lambda1 * zero - lambda2 * (1.0 - zero)
    return u * indicator(-bpsk(b) * ad.value(u))


def _canonical_h45(p: Callable, signs: VariantSigns, prev_bit, prev_n, prev_m1, prev_m2, active):
    """Baseline-oriented h4/h5 (resting at +1 / -1)."""
    arg = -p("k1") * prev_n + p("k2") * prev_m1 - (signs.stream2 * p("k3")) * prev_m2
    prev_bit = np.asarray(prev_bit)
    active = np.asarray(active, dtype=bool)
    on0 = (active & (prev_bit == 0)).astype(np.float64)
    on1 = (active & (prev_bit == 1)).astype(np.float64)
    g4 = ad.tanh(arg + p("k4")) * on0 + (1.0 - on0)
    g5 = ad.tanh(arg - p("k4")) * on1 - (1.0 - on1)
    return g4, g5


def _h67(p: Callable, signs: VariantSigns, prev_m1, prev_m2, g4_prev, g5_prev, h6_prev, h7_prev, active):
    drive = p("m1") * prev_m1 + (signs.stream2 * p("m2")) * prev_m2
    on = np.asarray(active, dtype=np.float64)
    h6 = ad.tanh(drive + p("m3") * g4_prev + p("m4") * h7_prev + p("m5")) * on + (1.0 - on)
    h7 = ad.tanh(-drive - p("m3") * g5_prev + p("m4") * h6_prev + p("m5")) * on + (1.0 - on)
    return h6, h7


def _parities(p: Callable, signs: VariantSigns, nonrec, h4, h5, h6=None, h7=None):
    corr = (signs.coef4 * p("e2")) * h4 + (signs.coef5 * p("e2")) * h5
    if h6 is not None:
        corr = corr + (-p("e3")) * h6 + p("e3") * h7
    lead = p("e1") * nonrec
    c1 = lead + corr
    c2 = signs.stream2 * (-lead + corr)
    return c1, c2


# ---------------------------------------------------------------------------
# step-level API


@dataclass
class EncoderState:
    """Encoder memory entering phase-2 step i.

    ``h`` holds (h4, h5[, h6, h7]) from step i-1 as actually produced (sign
    convention of the variant); the observations are the effective
    (forward + feedback) noises of step i-1.  ``first`` marks i = 1.
    """

    h: np.ndarray
    prev_bit: int = 0
    prev_phase1_obs: float = 0.0
    prev_phase2_obs: tuple[float, float] = (0.0, 0.0)
    first: bool = False

    @classmethod
    def initial(cls, variant: VariantSpec) -> "EncoderState":
        return cls(h=resting_hidden(variant), first=True)


def resting_hidden(variant: VariantSpec) -> np.ndarray:
    rest = [variant.s4, variant.s5]
    if variant.n_hidden == 7:
        rest += [1, 1]
    return np.array(rest, dtype=np.float64)


def _accessor(params) -> Callable:
    if isinstance(params, ParamSet):
        return params.values.__getitem__
    if hasattr(params, "__getitem__"):
        return params.__getitem__
    raise TypeError("params must be a ParamSet or a name -> value mapping")


def update_hidden(state: EncoderState, params, variant: VariantSpec) -> np.ndarray:
    p = _accessor(params)
    signs = variant_signs(variant)
    active = not state.first
    m1, m2 = state.prev_phase2_obs
    g4, g5 = _canonical_h45(p, signs, state.prev_bit, state.prev_phase1_obs, m1, m2, active)
    out = [signs.h4_rest * g4, -signs.h5_rest * g5]
    if variant.n_hidden == 7:
        g4_prev = signs.h4_rest * state.h[0]
        g5_prev = -signs.h5_rest * state.h[1]
        h6, h7 = _h67(p, signs, m1, m2, g4_prev, g5_prev, state.h[2], state.h[3], active)
        out += [h6, h7]
    return np.array([float(v) for v in out])


def parity_pair(nonrec, h, params, variant: VariantSpec) -> tuple[float, float]:
    p = _accessor(params)
    signs = variant_signs(variant)
    h = np.asarray(h, dtype=np.float64)
    extra = (h[2], h[3]) if variant.n_hidden == 7 else (None, None)
    c1, c2 = _parities(p, signs, nonrec, h[0], h[1], *extra)
    return float(c1), float(c2)


# ---------------------------------------------------------------------------
# batched simulator


@dataclass
class Forward:
    """Everything computed for a batch of blocks (leading axis B)."""

    bits: np.ndarray  # (B, K+1), padded
    nonrec: object  # (B, K+1)
    hidden: dict  # name -> (B, K+1)
    parity1: object  # raw c_{i,1}
    parity2: object
    x: tuple  # three transmitted streams, (B, K+1) each
    y: tuple  # three received streams
    norm: tuple  # divisors actually used
    O: object  # (B, K, 5)
    D: object  # (B, K)


class ParamView:
    """Name-based access into a flat parameter vector (ndarray or Var)."""

    def __init__(self, theta, variant: VariantSpec):
        self.theta = theta
        self.variant = variant
        self.index = {n: i for i, n in enumerate(param_names(variant))}

    def __call__(self, name):
        return self.theta[self.index[name]]

    def gather(self, names: np.ndarray):
        idx = np.vectorize(self.index.__getitem__, otypes=[np.intp])(names)
        return ad.take(self.theta, idx)


def _pad_bits(bits) -> np.ndarray:
    bits = np.asarray(bits)
    if bits.ndim == 1:
        bits = bits[None]
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("bits must be 0/1")
    return np.concatenate([bits.astype(np.int8), np.zeros((bits.shape[0], 1), np.int8)], axis=1)


def _shift(a):
    """Value of step i-1 at position i (zeros at i = 1)."""
    out = np.zeros_like(a)
    out[:, 1:] = a[:, :-1]
    return out


def encode_streams(view: ParamView, bits, realization: ChannelRealization):
    """Raw (pre-power) phase-1 symbols and parities for a batch of blocks."""
    variant = view.variant
    signs = variant_signs(variant)
    rz = realization.as_batch()
    b = _pad_bits(bits)
    B, L = b.shape
    if rz.padded_len != L or len(rz) != B:
        raise ValueError(
            f"realization covers {len(rz)} blocks of length {rz.padded_len}, bits need {B} of length {L}"
        )
    n_eff = rz.phase1_observation
    m_eff = rz.phase2_observation
    if variant.knee_mode == "varying":
        nonrec = nonrecurrent_term(b, n_eff, view("lambda1"), view("lambda2"))
    else:
        nonrec = nonrecurrent_term(b, n_eff)

    prev_bit = _shift(b)
    prev_n = _shift(n_eff)
    prev_m1 = _shift(m_eff[..., 0])
    prev_m2 = _shift(m_eff[..., 1])
    active = np.broadcast_to(np.arange(L) >= 1, (B, L))
    g4, g5 = _canonical_h45(view, signs, prev_bit, prev_n, prev_m1, prev_m2, active)
    h4 = signs.h4_rest * g4
    h5 = -signs.h5_rest * g5
    hidden = {"h4": h4, "h5": h5}
    h6 = h7 = None
    if variant.n_hidden == 7:
        h6_steps, h7_steps = [], []
        h6_prev = h7_prev = np.ones(B)
        for i in range(L):
            if i == 0:
                h6_i, h7_i = np.ones(B), np.ones(B)
            else:
                h6_i, h7_i = _h67(
                    view, signs, prev_m1[:, i], prev_m2[:, i], g4[:, i - 1], g5[:, i - 1], h6_prev, h7_prev, True
                )
            h6_steps.append(h6_i)
            h7_steps.append(h7_i)
            h6_prev, h7_prev = h6_i, h7_i
        h6 = ad.stack(h6_steps, axis=1)
        h7 = ad.stack(h7_steps, axis=1)
        hidden.update(h6=h6, h7=h7)
    c1, c2 = _parities(view, signs, nonrec, h4, h5, h6, h7)
    return b, nonrec, hidden, c1, c2


def _weighted_streams(view: ParamView, b, c1, c2):
    L = b.shape[1]
    cls = np.array(POSITION_CLASSES)[position_classes(L)]
    w = view.gather(np.char.add("w_", cls))
    a1 = view.gather(np.char.add("a1_", cls))
    a2 = view.gather(np.char.add("a2_", cls))
    return (w * bpsk(b).astype(np.float64), a1 * c1, a2 * c2)


def _rms(x):
    return ad.sqrt(ad.mean(x * x))


def decode_streams(gather: Callable, signs: VariantSigns, y0, y1, y2):
    """Five-unit decoder on received streams of shape (B, K+1); returns (O, D).

    ``gather`` maps an array of parameter names to an array of values.
    """
    K = y0.shape[1] - 1
    cur = signs.current_combiner(y1[:, :K], y2[:, :K])
    fut = signs.future_combiner(y1[:, 1:], y2[:, 1:])
    feats = ad.stack([y0[:, :K], -cur, -fut, np.ones((y0.shape[0], K))], axis=-1)
    names = np.array([[f"d{j}_{q}" for j in range(1, N_UNITS + 1)] for q in range(1, 5)])
    W = gather(names)  # (4, 5)
    O = ad.tanh(ad.matmul(feats, W))
    lw = gather(np.array([[f"l{j}"] for j in range(1, N_UNITS + 1)]))
    logit = ad.matmul(O, lw)[..., 0]
    return O, ad.sigmoid(logit)


def forward(view: ParamView, bits, realization: ChannelRealization, norm=None) -> Forward:
    """Encoder, power allocation, forward channel and decoder for a batch.

    ``norm=None`` normalises each stream by its RMS over the batch (training
    mode); otherwise ``norm`` gives the three frozen divisors.
    """
    rz = realization.as_batch()
    b, nonrec, hidden, c1, c2 = encode_streams(view, bits, rz)
    streams = _weighted_streams(view, b, c1, c2)
    if norm is None:
        norm = tuple(_rms(s) for s in streams)
    else:
        _check_norm(norm)
    x = tuple(s / d for s, d in zip(streams, norm))
    y = (
        x[0] + rz.phase1_noise,
        x[1] + rz.phase2_noise[..., 0],
        x[2] + rz.phase2_noise[..., 1],
    )
    O, D = decode_streams(view.gather, variant_signs(view.variant), *y)
    return Forward(b, nonrec, hidden, c1, c2, x, y, norm, O, D)


def _check_norm(norm):
    if len(norm) != 3:
        raise ValueError("expected three normalization divisors")
    for d in norm:
        if not np.isfinite(ad.value(d)) or ad.value(d) == 0:
            raise ValueError(f"normalization divisor must be finite and non-zero, got {ad.value(d)}")


def simulate(params: ParamSet, bits, realization: ChannelRealization, norm=None) -> Forward:
    """Evaluate a ParamSet (frozen normalization unless ``norm`` overrides)."""
    if norm is None:
        if params.norm_consts is None:
            raise ValueError("ParamSet has no calibrated normalization; run calibrate_normalization first")
        norm = params.norm_consts
    view = ParamView(params.to_vector(), params.variant)
    return forward(view, bits, realization, norm=norm)


# ---------------------------------------------------------------------------
# power allocation


@dataclass(frozen=True)
class PowerAllocation:
    w: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    norm_consts: tuple[float, float, float] | None = None

    @classmethod
    def from_params(cls, params: ParamSet) -> "PowerAllocation":
        return cls(params.power("w"), params.power("a1"), params.power("a2"), params.norm_consts)


def to_layout(s0, s1, s2) -> np.ndarray:
    """Streams (.., K+1) -> codeword layout [c_1..c_{K+1}, c_{1,1}, c_{1,2}, ...]."""
    s0, s1, s2 = (np.asarray(s) for s in (s0, s1, s2))
    parity = np.stack([s1, s2], axis=-1).reshape(s1.shape[:-1] + (-1,))
    return np.concatenate([s0, parity], axis=-1)


def from_layout(x, padded_len: int):
    x = np.asarray(x)
    if x.shape[-1] != 3 * padded_len:
        raise ValueError(f"expected {3 * padded_len} symbols per block, got {x.shape[-1]}")
    s0 = x[..., :padded_len]
    parity = x[..., padded_len:].reshape(x.shape[:-1] + (padded_len, 2))
    return s0, parity[..., 0], parity[..., 1]


def apply_power_allocation(streams, alloc: PowerAllocation) -> np.ndarray:
    """Weight each stream by position class and divide by its frozen divisor.

    ``streams`` is (phase-1 BPSK, raw parity 1, raw parity 2), each (.., K+1).
    Returns symbols in codeword layout.
    """
    if alloc.norm_consts is None:
        raise ValueError("power allocation has no normalization constants")
    if any(c == 0 for c in alloc.norm_consts):
        raise ValueError("normalization constant is zero")
    L = np.asarray(streams[0]).shape[-1]
    cls = position_classes(L)
    out = [
        weights[cls] * np.asarray(s, dtype=np.float64) / c
        for s, weights, c in zip(streams, (alloc.w, alloc.a1, alloc.a2), alloc.norm_consts)
    ]
    return to_layout(*out)


def calibrate_normalization(params: ParamSet, config: ChannelConfig, blocks: int = 10_000, seed: int = 0,
                            chunk: int = 5_000) -> tuple[float, float, float]:
    """Per-stream RMS of the weighted, pre-normalization symbols."""
    if blocks < 1:
        raise ValueError("blocks must be positive")
    view = ParamView(params.to_vector(), params.variant)
    L = params.K + 1
    sums = np.zeros(3)
    count = 0
    for start in range(0, blocks, chunk):
        n = min(chunk, blocks - start)
        bits = sample_bits(seed, params.K, start, n)
        rz = sample_realizations(config, L, seed, start, n)
        b, _, _, c1, c2 = encode_streams(view, bits, rz)
        streams = _weighted_streams(view, b, c1, c2)
        sums += [float(np.sum(np.square(s))) for s in streams]
        count += b.size
    rms = np.sqrt(sums / count)
    for name, r in zip(("phase1", "parity1", "parity2"), rms):
        if not np.isfinite(r) or r == 0:
            raise ValueError(f"degenerate {name} stream: RMS is {r}")
    return tuple(float(r) for r in rms)


# ---------------------------------------------------------------------------
# single-block episode and decoder


@dataclass
class Episode:
    bits: np.ndarray  # K+1, padded
    x: np.ndarray  # N, codeword layout
    y: np.ndarray
    h_traj: dict
    raw_parities: np.ndarray  # (K+1, 2)
    nonrec: np.ndarray


def run_encoder(bits, realization: ChannelRealization, params: ParamSet, variant: VariantSpec | None = None) -> Episode:
    bits = np.asarray(bits)
    if variant is not None and variant != params.variant:
        raise ValueError("variant does not match the ParamSet")
    if bits.ndim != 1 or bits.shape[0] != params.K:
        raise ValueError(f"expected {params.K} bits, got shape {bits.shape}")
    if realization.batched or realization.padded_len != params.K + 1:
        raise ValueError(f"expected a single-block realization of length {params.K + 1}")
    norm = params.norm_consts if params.norm_consts is not None else (1.0, 1.0, 1.0)
    fw = simulate(params, bits, realization, norm=norm)
    return Episode(
        bits=fw.bits[0],
        x=to_layout(*(s[0] for s in fw.x)),
        y=to_layout(*(s[0] for s in fw.y)),
        h_traj={k: np.asarray(v)[0] for k, v in fw.hidden.items()},
        raw_parities=np.stack([fw.parity1[0], fw.parity2[0]], axis=-1),
        nonrec=np.asarray(fw.nonrec)[0],
    )


@dataclass(frozen=True)
class DecoderParams:
    d: np.ndarray  # (5, 4)
    l: np.ndarray  # (5,)

    def __post_init__(self):
        if np.shape(self.d) != (N_UNITS, 4) or np.shape(self.l) != (N_UNITS,):
            raise ValueError(f"decoder needs d of shape ({N_UNITS}, 4) and l of length {N_UNITS}")

    @classmethod
    def from_params(cls, params: ParamSet) -> "DecoderParams":
        return cls(params.decoder_d, params.decoder_l)


@dataclass
class DecoderActivations:
    O: np.ndarray
    D: np.ndarray
    b_hat: np.ndarray


def decode(y, dec: DecoderParams, block: BlockConfig, variant: VariantSpec | None = None) -> DecoderActivations:
    """Decode received symbols in codeword layout, ``(N,)`` or ``(B, N)``."""
    variant = variant or VariantSpec()
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    y0, y1, y2 = from_layout(np.atleast_2d(y), block.padded_len)
    values = {f"d{j + 1}_{q + 1}": dec.d[j][q] for j in range(N_UNITS) for q in range(4)}
    values.update({f"l{j + 1}": dec.l[j] for j in range(N_UNITS)})
    gather = np.vectorize(values.__getitem__, otypes=[np.float64])
    O, D = decode_streams(gather, variant_signs(variant), y0, y1, y2)
    b_hat = (D >= 0.5).astype(np.int8)
    if single:
        return DecoderActivations(O[0], D[0], b_hat[0])
    return DecoderActivations(O, D, b_hat)


def hard_decisions(D) -> np.ndarray:
    return (np.asarray(D) >= 0.5).astype(np.int8)
