"""Gradient training of the interpretable encoder/decoder pair.

The loss is the mean binary cross-entropy of the decoder's soft estimates
over the K message bits (the padded bit is excluded).  During training each
stream is normalised by its RMS over the current batch, and that statistic
is differentiated through; after training the normalization is frozen by a
separate calibration run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .channel import ChannelConfig, ChannelRealization, sample_bits, sample_realizations
from .codec import ParamView, calibrate_normalization, forward
from .params import (
    DECODER_NAMES,
    POWER_NAMES,
    ParamSet,
    VariantSpec,
    param_names,
)

log = logging.getLogger(__name__)

BCE_EPS = 1e-12

# training batches are drawn far from the block indices used for calibration
# and evaluation under the same seed
TRAIN_SEED_SALT = 0x7452_4149_4E00


@dataclass
class TrainConfig:
    K: int = 50
    batch_blocks: int = 1000
    steps: int = 20_000
    lr: float = 1e-2
    lr_decay_at: tuple = (0.6, 0.85)
    lr_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    snr_f_db: float = 0.0
    snr_fb_db: object = "noiseless"
    seed: int = 0
    variant: VariantSpec = field(default_factory=VariantSpec)
    calibration_blocks: int = 100_000
    init_scale: float = 1.0

    def __post_init__(self):
        if isinstance(self.variant, dict):
            self.variant = VariantSpec.from_dict(self.variant)
        self.lr_decay_at = tuple(self.lr_decay_at)
        if self.batch_blocks < 1:
            raise ValueError("batch_blocks must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    @property
    def channel(self) -> ChannelConfig:
        return ChannelConfig.from_snr(self.snr_f_db, self.snr_fb_db)

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``."""
        lr = self.lr
        for frac in self.lr_decay_at:
            if step > frac * self.steps:
                lr *= self.lr_decay
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.to_dict()
        d["lr_decay_at"] = list(self.lr_decay_at)
        return d


# ---------------------------------------------------------------------------
# loss and gradient


def bce(D, b):
    """Mean binary cross-entropy; D is clamped to [1e-12, 1 - 1e-12] first."""
    b = np.asarray(b, dtype=np.float64)
    if np.shape(ad.value(D)) != b.shape:
        raise ValueError(f"length mismatch: {np.shape(ad.value(D))} vs {b.shape}")
    Dc = ad.clip(D, BCE_EPS, 1.0 - BCE_EPS)
    terms = b * ad.log(Dc) + (1.0 - b) * ad.log(1.0 - Dc)
    return -ad.mean(terms)


def _batch_loss(theta, variant: VariantSpec, bits, realization: ChannelRealization):
    bits = np.asarray(bits)
    if bits.ndim != 2 or bits.shape[0] == 0:
        raise ValueError("empty batch")
    fw = forward(ParamView(theta, variant), bits, realization, norm=None)
    return bce(fw.D, bits)


def forward_loss(params: ParamSet, bits, realization: ChannelRealization) -> float:
    return float(_batch_loss(params.to_vector(), params.variant, bits, realization))


def loss_and_gradient(vector, variant: VariantSpec, bits, realization: ChannelRealization):
    theta = ad.Var(np.asarray(vector, dtype=np.float64).copy())
    loss = _batch_loss(theta, variant, bits, realization)
    loss.backward()
    grad = theta.grad if theta.grad is not None else np.zeros_like(theta.value)
    return float(loss.value), grad


def gradient(params: ParamSet, bits, realization: ChannelRealization) -> np.ndarray:
    """Reverse-mode gradient of ``forward_loss``, ordered as ``params.names``."""
    return loss_and_gradient(params.to_vector(), params.variant, bits, realization)[1]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params, grad, step_index: int, config: TrainConfig, state: AdamState, lr: Optional[float] = None):
    """One bias-corrected Adam update; returns the new parameter vector.

    ``state`` is updated in place.  ``params`` may be a vector or a ParamSet
    (a ParamSet is returned in that case).
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    as_set = isinstance(params, ParamSet)
    vec = params.to_vector() if as_set else np.asarray(params, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    lr = config.lr if lr is None else lr
    state.m = config.beta1 * state.m + (1 - config.beta1) * g
    state.v = config.beta2 * state.v + (1 - config.beta2) * g * g
    m_hat = state.m / (1 - config.beta1**step_index)
    v_hat = state.v / (1 - config.beta2**step_index)
    new = vec - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params.with_vector(new) if as_set else new


def clip_by_norm(grad: np.ndarray, bound: float) -> np.ndarray:
    norm = float(np.sqrt(np.sum(grad * grad)))
    if bound is None or bound <= 0 or norm <= bound:
        return grad
    return grad * (bound / norm)


# ---------------------------------------------------------------------------
# training loop


def initial_params(config: TrainConfig) -> ParamSet:
    """Starting point: small positive encoder coefficients with a saturating
    bias k4, unit power weights, and a decoder that starts near "read y_i"."""
    rng = np.random.default_rng([config.seed, 0x1A17])
    variant = config.variant
    s = config.init_scale
    values = {}
    for name in ("e1", "e2", "k1", "k2", "k3"):
        values[name] = s * rng.uniform(0.5, 1.5)
    values["k4"] = rng.uniform(2.0, 3.0)
    if variant.n_hidden == 7:
        values["e3"] = s * rng.uniform(0.5, 1.5)
        for name in ("m1", "m2"):
            values[name] = s * rng.uniform(0.5, 1.5)
        values["m3"] = rng.uniform(-0.5, 0.5)
        values["m4"] = rng.uniform(-0.5, 0.5)
        values["m5"] = rng.uniform(2.0, 3.0)
    if variant.knee_mode == "varying":
        values["lambda1"] = 0.0
        values["lambda2"] = 0.0
    for j in range(1, 6):
        values[f"d{j}_1"] = rng.uniform(0.5, 1.5)
        values[f"d{j}_2"] = rng.uniform(0.0, 1.0)
        values[f"d{j}_3"] = rng.uniform(0.0, 1.0)
        values[f"d{j}_4"] = rng.uniform(-0.1, 0.1)
        values[f"l{j}"] = rng.uniform(0.5, 1.5)
    for name in POWER_NAMES:
        values[name] = 1.0
    assert set(values) == set(param_names(variant))
    return ParamSet(variant, values, K=config.K)


def training_batch(config: TrainConfig, step: int):
    """Bits and noise for 1-based ``step``; a pure function of (seed, step)."""
    seed = (config.seed ^ TRAIN_SEED_SALT) & ((1 << 63) - 1)
    start = (step - 1) * config.batch_blocks
    bits = sample_bits(seed, config.K, start, config.batch_blocks)
    rz = sample_realizations(config.channel, config.K + 1, seed, start, config.batch_blocks)
    return bits, rz


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: ParamSet
    losses: list
    lrs: list


def train(config: TrainConfig, initial: ParamSet | None = None, log_every: int = 0) -> TrainResult:
    params = initial if initial is not None else initial_params(config)
    if params.variant != config.variant:
        raise ValueError("initial ParamSet variant differs from config.variant")
    vec = params.to_vector()
    state = AdamState.zeros(vec.size)
    losses, lrs = [], []
    for step in range(1, config.steps + 1):
        bits, rz = training_batch(config, step)
        loss, grad = loss_and_gradient(vec, config.variant, bits, rz)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"non-finite loss/gradient at step {step}: loss={loss}")
        grad = clip_by_norm(grad, config.clip_norm)
        lr = config.lr_at(step)
        vec = adam_step(vec, grad, step, config, state, lr=lr)
        losses.append(loss)
        lrs.append(lr)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.6g lr %.3g", step, float(np.mean(losses[-log_every:])), lr)
    params = params.with_vector(vec)
    if config.steps > 0 or params.norm_consts is None:
        norm = calibrate_normalization(params, config.channel, config.calibration_blocks, seed=config.seed)
        params = params.with_norm(norm)
    params = params.with_meta(
        snr_f_db=config.snr_f_db,
        snr_fb_db=config.snr_fb_db,
        seed=config.seed,
        steps=config.steps,
        config=config.to_dict(),
    )
    return TrainResult(params, losses, lrs)
