"""Monte-Carlo bit-error-rate estimation with early stopping and Wilson intervals.

Blocks are grouped into fixed-size chunks; chunk ``c`` always covers blocks
``c*chunk_blocks .. (c+1)*chunk_blocks - 1`` and its noise comes from the
counter-based generator, so results do not depend on the worker count.
Chunks are merged in index order and the stopping rule is checked after
each merged chunk, so a run may overshoot ``min_errors`` by part of a chunk.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Union

import numpy as np
from scipy.stats import norm as _normal

from .channel import ChannelConfig, sample_bits, sample_realizations
from .codec import hard_decisions, simulate
from .params import ParamSet, dumps, to_document

Z95 = float(_normal.ppf(0.975))
Z95_ONE_SIDED = float(_normal.ppf(0.95))

CSV_COLUMNS = ("snr_f_db", "snr_fb_db", "bits", "errors", "ber", "ci_low", "ci_high", "seed", "params_file_hash")


def wilson_interval(errors: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Two-sided Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    p = errors / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def ber_interval(errors: int, n: int) -> tuple[float, float]:
    """95% Wilson interval; with zero errors the one-sided 95% upper bound."""
    if errors == 0:
        z2 = Z95_ONE_SIDED**2
        return 0.0, z2 / (n + z2)
    return wilson_interval(errors, n)


def params_hash(params: ParamSet) -> str:
    return hashlib.sha256(dumps(to_document(params)).encode()).hexdigest()


@dataclass
class BerEstimate:
    bit_errors: int
    bits_tested: int
    ber: float
    ci_low: float
    ci_high: float
    seed: int
    config: dict = field(default_factory=dict)
    params_file_hash: str = ""
    blocks: int = 0

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci_high - self.ci_low)

    def row(self) -> dict:
        return {
            "snr_f_db": self.config.get("snr_f_db"),
            "snr_fb_db": self.config.get("snr_fb_db"),
            "bits": self.bits_tested,
            "errors": self.bit_errors,
            "ber": self.ber,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "seed": self.seed,
            "params_file_hash": self.params_file_hash,
        }


def count_errors(params: ParamSet, channel: ChannelConfig, seed: int, start_block: int, blocks: int) -> int:
    """Bit errors over the K message bits of the given blocks."""
    bits = sample_bits(seed, params.K, start_block, blocks)
    rz = sample_realizations(channel, params.K + 1, seed, start_block, blocks)
    fw = simulate(params, bits, rz)
    return int(np.count_nonzero(hard_decisions(fw.D) != bits))


def _count_job(args):
    return count_errors(*args)


def estimate_ber(
    params: ParamSet,
    channel: ChannelConfig,
    min_errors: int = 100,
    max_bits: float = 1e8,
    seed: int = 0,
    chunk_blocks: int = 10_000,
    workers: int = 1,
) -> BerEstimate:
    if min_errors < 1:
        raise ValueError("min_errors must be >= 1")
    K = params.K
    if max_bits < K:
        raise ValueError(f"max_bits must be at least K = {K}")
    if params.norm_consts is None:
        raise ValueError("ParamSet is not calibrated")
    max_blocks = int(max_bits) // K
    chunks = []
    start = 0
    while start < max_blocks:
        n = min(chunk_blocks, max_blocks - start)
        chunks.append((start, n))
        start += n

    errors = 0
    blocks = 0
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        i = 0
        while i < len(chunks) and errors < min_errors:
            wave = chunks[i : i + max(1, workers)]
            jobs = [(params, channel, seed, s, n) for s, n in wave]
            results = list(pool.map(_count_job, jobs)) if pool else [_count_job(j) for j in jobs]
            for (s, n), e in zip(wave, results):
                errors += e
                blocks += n
                i += 1
                if errors >= min_errors:
                    break
    finally:
        if pool:
            pool.shutdown()
    bits = blocks * K
    lo, hi = ber_interval(errors, bits)
    return BerEstimate(
        bit_errors=errors,
        bits_tested=bits,
        ber=errors / bits,
        ci_low=lo,
        ci_high=hi,
        seed=seed,
        config=channel.describe(),
        params_file_hash=params_hash(params),
        blocks=blocks,
    )


ParamSource = Union[ParamSet, Mapping, Callable]


def _resolve(params: ParamSource, snr_f, snr_fb) -> ParamSet:
    if isinstance(params, ParamSet):
        return params
    if callable(params):
        return params(snr_f, snr_fb)
    for key in ((snr_f, snr_fb), snr_f):
        if key in params:
            return params[key]
    raise KeyError(f"no parameters for snr_f={snr_f}, snr_fb={snr_fb}")


def sweep(
    params: ParamSource,
    snr_f_list: Iterable,
    snr_fb_list: Iterable = ("noiseless",),
    min_errors: int = 100,
    max_bits: float = 1e8,
    seed: int = 0,
    chunk_blocks: int = 10_000,
    workers: int = 1,
) -> list[BerEstimate]:
    """One estimate per (snr_f, snr_fb) grid point.

    ``params`` is a single ParamSet, a mapping keyed by ``(snr_f, snr_fb)`` or
    ``snr_f``, or a callable ``(snr_f, snr_fb) -> ParamSet``.
    """
    snr_f_list = list(snr_f_list)
    snr_fb_list = list(snr_fb_list)
    if not snr_f_list or not snr_fb_list:
        raise ValueError("SNR lists must be non-empty")
    out = []
    for snr_fb in snr_fb_list:
        for snr_f in snr_f_list:
            p = _resolve(params, snr_f, snr_fb)
            est = estimate_ber(
                p,
                ChannelConfig.from_snr(snr_f, snr_fb),
                min_errors=min_errors,
                max_bits=max_bits,
                seed=seed,
                chunk_blocks=chunk_blocks,
                workers=workers,
            )
            out.append(est)
    return out


def to_csv(estimates: Iterable[BerEstimate]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for est in estimates:
        row = est.row()
        for key in ("ber", "ci_low", "ci_high"):
            row[key] = f"{row[key]:.6e}"
        writer.writerow(row)
    return buf.getvalue()
