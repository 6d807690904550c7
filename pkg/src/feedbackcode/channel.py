"""AWGN forward channel and delayed noisy feedback channel.

Noise is drawn from a counter-based generator (numpy's Philox4x64) keyed by
``(seed, stream tag)``.  Every block owns a fixed, contiguous window of the
counter space, so the noise of block ``b`` depends only on ``(seed, b, K)``
and never on how blocks are split between workers.

Gaussian samples come from the Box-Muller transform applied to 53-bit
uniforms taken from consecutive pairs of raw 64-bit outputs::

    u1 = ((r0 >> 11) + 1) * 2**-53        # (0, 1]
    u2 = (r1 >> 11) * 2**-53              # [0, 1)
    z0 = sqrt(-2 ln u1) * cos(2 pi u2)
    z1 = sqrt(-2 ln u1) * sin(2 pi u2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

NOISELESS = "noiseless"

FORWARD_TAG = 0
FEEDBACK_TAG = 1

_MASK64 = (1 << 64) - 1

SnrDb = Union[float, int, str, None]


def _is_noiseless(snr_db: SnrDb) -> bool:
    if snr_db is None:
        return True
    if isinstance(snr_db, str):
        if snr_db.strip().lower() == NOISELESS:
            return True
        raise ValueError(f"unrecognised SNR value {snr_db!r}")
    return math.isinf(snr_db) and snr_db > 0


def snr_to_sigma(snr_db: SnrDb) -> float:
    """Noise standard deviation for an SNR of ``-10 log10(sigma**2)`` dB.

    ``"noiseless"`` (or ``None``/``+inf``) maps to 0.
    """
    if _is_noiseless(snr_db):
        return 0.0
    snr_db = float(snr_db)
    if not math.isfinite(snr_db):
        raise ValueError(f"SNR must be finite or 'noiseless', got {snr_db}")
    return math.sqrt(10.0 ** (-snr_db / 10.0))


@dataclass(frozen=True)
class ChannelConfig:
    sigma_f: float
    sigma_fb: float
    snr_f_db: SnrDb = None
    snr_fb_db: SnrDb = NOISELESS

    def __post_init__(self):
        if self.sigma_f < 0 or self.sigma_fb < 0:
            raise ValueError("noise standard deviations must be non-negative")

    @classmethod
    def from_snr(cls, snr_f_db: SnrDb, snr_fb_db: SnrDb = NOISELESS) -> "ChannelConfig":
        return cls(
            sigma_f=snr_to_sigma(snr_f_db),
            sigma_fb=snr_to_sigma(snr_fb_db),
            snr_f_db=NOISELESS if _is_noiseless(snr_f_db) else float(snr_f_db),
            snr_fb_db=NOISELESS if _is_noiseless(snr_fb_db) else float(snr_fb_db),
        )

    @property
    def noiseless_feedback(self) -> bool:
        return self.sigma_fb == 0.0

    def describe(self) -> dict:
        return {
            "snr_f_db": self.snr_f_db,
            "snr_fb_db": self.snr_fb_db,
            "sigma_f": self.sigma_f,
            "sigma_fb": self.sigma_fb,
        }


@dataclass
class ChannelRealization:
    """Noise for one block, or a batch of blocks along a leading axis.

    Shapes (batched): ``phase1_noise`` and ``fb_phase1_noise`` are
    ``(B, K+1)``; ``phase2_noise`` and ``fb_phase2_noise`` are ``(B, K+1, 2)``.
    A single block drops the leading axis.
    """

    phase1_noise: np.ndarray
    phase2_noise: np.ndarray
    fb_phase1_noise: np.ndarray
    fb_phase2_noise: np.ndarray

    @property
    def padded_len(self) -> int:
        return self.phase1_noise.shape[-1]

    @property
    def batched(self) -> bool:
        return self.phase1_noise.ndim == 2

    def __len__(self) -> int:
        return self.phase1_noise.shape[0] if self.batched else 1

    def as_batch(self) -> "ChannelRealization":
        if self.batched:
            return self
        return ChannelRealization(*(a[None] for a in self._arrays()))

    def block(self, index: int) -> "ChannelRealization":
        return ChannelRealization(*(a[index] for a in self.as_batch()._arrays()))

    def _arrays(self):
        return (self.phase1_noise, self.phase2_noise, self.fb_phase1_noise, self.fb_phase2_noise)

    def copy(self) -> "ChannelRealization":
        return ChannelRealization(*(a.copy() for a in self._arrays()))

    @property
    def phase1_observation(self) -> np.ndarray:
        """What the encoder recovers from phase-1 feedback: ``n + n_fb``."""
        return self.phase1_noise + self.fb_phase1_noise

    @property
    def phase2_observation(self) -> np.ndarray:
        return self.phase2_noise + self.fb_phase2_noise

    def map_stream2_sign(self) -> "ChannelRealization":
        """Negate the second phase-2 stream (forward and feedback noise)."""
        p2 = self.phase2_noise.copy()
        f2 = self.fb_phase2_noise.copy()
        p2[..., 1] = -p2[..., 1]
        f2[..., 1] = -f2[..., 1]
        return ChannelRealization(self.phase1_noise.copy(), p2, self.fb_phase1_noise.copy(), f2)

    @staticmethod
    def concatenate(parts) -> "ChannelRealization":
        parts = [p.as_batch() for p in parts]
        return ChannelRealization(
            *(np.concatenate(arrs, axis=0) for arrs in zip(*(p._arrays() for p in parts)))
        )

    @staticmethod
    def zeros(padded_len: int, blocks: int | None = None) -> "ChannelRealization":
        lead = () if blocks is None else (blocks,)
        return ChannelRealization(
            np.zeros(lead + (padded_len,)),
            np.zeros(lead + (padded_len, 2)),
            np.zeros(lead + (padded_len,)),
            np.zeros(lead + (padded_len, 2)),
        )


def _block_stride(n_normals: int) -> int:
    # raw draws per block, padded to whole Philox counter blocks (4 x uint64)
    return -(-n_normals // 4) * 4


def standard_normals(seed: int, tag: int, start_block: int, blocks: int, per_block: int) -> np.ndarray:
    """Standard normal draws for ``blocks`` consecutive blocks.

    Returns an array of shape ``(blocks, per_block)``.  Row ``j`` is a pure
    function of ``(seed, tag, start_block + j, per_block)``.
    """
    if start_block < 0 or blocks < 0:
        raise ValueError("block indices must be non-negative")
    stride = _block_stride(per_block)
    out = np.empty((blocks, per_block))
    if blocks == 0:
        return out
    # Philox advances its counter before each 4-word output block.
    bg = np.random.Philox(key=[seed & _MASK64, tag], counter=[start_block * stride // 4, 0, 0, 0])
    raw = bg.random_raw(blocks * stride).reshape(blocks, stride)
    r0 = raw[:, 0::2]
    r1 = raw[:, 1::2]
    u1 = ((r0 >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (r1 >> np.uint64(11)).astype(np.float64) * 2.0**-53
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty((blocks, stride))
    z[:, 0::2] = radius * np.cos(angle)
    z[:, 1::2] = radius * np.sin(angle)
    out[:] = z[:, :per_block]
    return out


def sample_realizations(
    config: ChannelConfig, padded_len: int, seed: int, start_block: int, blocks: int
) -> ChannelRealization:
    """Noise for blocks ``start_block .. start_block + blocks - 1``."""
    if padded_len < 2:
        raise ValueError("padded block length must be at least 2 (K >= 1)")
    L = padded_len
    fwd = standard_normals(seed, FORWARD_TAG, start_block, blocks, 3 * L)
    fwd *= config.sigma_f
    if config.sigma_fb > 0:
        fb = standard_normals(seed, FEEDBACK_TAG, start_block, blocks, 3 * L)
        fb *= config.sigma_fb
    else:
        fb = np.zeros((blocks, 3 * L))
    return ChannelRealization(
        phase1_noise=fwd[:, :L],
        phase2_noise=fwd[:, L:].reshape(blocks, L, 2),
        fb_phase1_noise=fb[:, :L],
        fb_phase2_noise=fb[:, L:].reshape(blocks, L, 2),
    )


def sample_realization(config: ChannelConfig, padded_len: int, seed: int, block_index: int) -> ChannelRealization:
    return sample_realizations(config, padded_len, seed, block_index, 1).block(0)


def apply_forward(x, n):
    return x + n


def apply_feedback(y, n_fb):
    return y + n_fb


BITS_TAG = 2


def sample_bits(seed: int, K: int, start_block: int, blocks: int) -> np.ndarray:
    """Uniform message bits, ``(blocks, K)`` of dtype int8, counter-keyed like the noise."""
    stride = _block_stride(K)
    bg = np.random.Philox(key=[seed & _MASK64, BITS_TAG], counter=[start_block * stride // 4, 0, 0, 0])
    raw = bg.random_raw(blocks * stride).reshape(blocks, stride)[:, :K]
    return (raw >> np.uint64(63)).astype(np.int8)
