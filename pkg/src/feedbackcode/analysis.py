"""Interpretation instruments: influence length, hidden-state outliers,
parity scatter export, segmented least squares and knee fitting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .channel import ChannelConfig, ChannelRealization, sample_bits, sample_realizations
from .codec import ParamView, encode_streams
from .params import ParamSet

TARGETS = ("bit", "phase1_noise", "phase2_noise_1", "phase2_noise_2")

# bit/noise streams for analysis runs are keyed apart from training/evaluation
ANALYSIS_SEED_SALT = 0x414E_414C_5953


# ---------------------------------------------------------------------------
# influence length

ParityFn = Callable[[np.ndarray, ChannelRealization], np.ndarray]


def interpretable_encoder(params: ParamSet) -> ParityFn:
    """Encoder step interface: ``(bits (B, K), realization) -> raw parities (B, K+1, 2)``."""
    view = ParamView(params.to_vector(), params.variant)

    def parities(bits, realization):
        _, _, _, c1, c2 = encode_streams(view, bits, realization)
        return np.stack([c1, c2], axis=-1)

    parities.K = params.K
    return parities


@dataclass(frozen=True)
class PerturbSpec:
    target: str
    delta: float = 1.0
    t: int = 5
    samples: int = 10_000
    delta_threshold: float = 0.05

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.t < 1:
            raise ValueError("t is 1-based")


@dataclass
class InfluenceCurve:
    """Expected L1 parity change at steps t..K (1-based)."""

    t: int
    values: np.ndarray

    @property
    def steps(self) -> np.ndarray:
        return np.arange(self.t, self.t + len(self.values))

    def to_csv(self) -> str:
        return _csv(("i", "L"), ((int(i), f"{v:.17g}") for i, v in zip(self.steps, self.values)))


def perturb(bits: np.ndarray, realization: ChannelRealization, spec: PerturbSpec):
    """Copies of (bits, realization) with the targeted element at step t changed."""
    bits = np.array(bits, copy=True)
    rz = realization.as_batch().copy()
    i = spec.t - 1
    if spec.target == "bit":
        bits[:, i] ^= 1
    elif spec.target == "phase1_noise":
        rz.phase1_noise[:, i] -= spec.delta
    else:
        j = 0 if spec.target == "phase2_noise_1" else 1
        rz.phase2_noise[:, i, j] -= spec.delta
    return bits, rz


def perturbation_curve(
    encoder: ParityFn | ParamSet,
    spec: PerturbSpec,
    config: ChannelConfig,
    seed: int = 0,
    K: int | None = None,
) -> InfluenceCurve:
    """Monte-Carlo estimate of ``E || f(P_i) - f(P_i perturbed) ||_1`` for i = t..K.

    The perturbed and unperturbed runs share every random draw.
    """
    if isinstance(encoder, ParamSet):
        K = encoder.K
        encoder = interpretable_encoder(encoder)
    K = K if K is not None else getattr(encoder, "K", None)
    if K is None:
        raise ValueError("block length K is required for a bare encoder function")
    if spec.t > K:
        raise ValueError(f"perturbation position t={spec.t} exceeds K={K}")
    seed = seed ^ ANALYSIS_SEED_SALT
    bits = sample_bits(seed, K, 0, spec.samples)
    rz = sample_realizations(config, K + 1, seed, 0, spec.samples)
    base = np.asarray(encoder(bits, rz))
    pb, prz = perturb(bits, rz, spec)
    moved = np.asarray(encoder(pb, prz))
    diff = np.abs(base - moved).sum(axis=-1).mean(axis=0)  # (K+1,)
    return InfluenceCurve(spec.t, diff[spec.t - 1 : K])


def influence_length(curve: InfluenceCurve | Sequence[float], delta_threshold: float = 0.05) -> int:
    values = np.asarray(curve.values if isinstance(curve, InfluenceCurve) else curve, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty influence curve")
    return int(np.count_nonzero(values > delta_threshold * values.max()))


# ---------------------------------------------------------------------------
# outliers


@dataclass
class OutlierReport:
    threshold: float
    # (state, previous bit) -> fraction of steps with |h - rest| > threshold
    fractions: dict
    counts: dict
    histograms: dict = field(default_factory=dict)
    bin_edges: np.ndarray = field(default_factory=lambda: np.linspace(-1, 1, 41))

    def fraction(self, state: str, prev_bit: int | None = None) -> float:
        if prev_bit is not None:
            return self.fractions[(state, prev_bit)]
        total = sum(self.counts[(state, b)] for b in (0, 1))
        flagged = sum(self.fractions[(state, b)] * self.counts[(state, b)] for b in (0, 1))
        return flagged / total if total else 0.0

    def overall(self) -> float:
        states = sorted({s for s, _ in self.fractions})
        total = sum(self.counts[(s, b)] for s in states for b in (0, 1))
        flagged = sum(self.fractions[k] * self.counts[k] for k in self.fractions)
        return flagged / total if total else 0.0

    def histogram_csv(self) -> str:
        rows = []
        for (state, b), hist in sorted(self.histograms.items()):
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], hist):
                rows.append((state, b, f"{lo:.4f}", f"{hi:.4f}", int(c)))
        return _csv(("state", "prev_bit", "bin_low", "bin_high", "count"), rows)

    def summary_csv(self) -> str:
        rows = [
            (s, b, self.counts[(s, b)], f"{self.fractions[(s, b)]:.6e}") for s, b in sorted(self.fractions)
        ]
        return _csv(("state", "prev_bit", "steps", "outlier_fraction"), rows)


def hidden_outliers(params: ParamSet, bits, realization: ChannelRealization, threshold: float = 0.1) -> OutlierReport:
    """Tabulate hidden-state excursions for explicit inputs."""
    bits = np.atleast_2d(np.asarray(bits))
    view = ParamView(params.to_vector(), params.variant)
    b, _, hidden, _, _ = encode_streams(view, bits, realization.as_batch())
    rest = {"h4": params.variant.s4, "h5": params.variant.s5, "h6": 1.0, "h7": 1.0}
    prev_bit = b[:, :-1]
    edges = np.linspace(-1, 1, 41)
    fractions, counts, hists = {}, {}, {}
    for name, h in hidden.items():
        h = np.asarray(h)[:, 1:]  # step 1 is pinned at rest
        dev = np.abs(h - rest[name]) > threshold
        for bv in (0, 1):
            sel = prev_bit == bv
            n = int(sel.sum())
            counts[(name, bv)] = n
            fractions[(name, bv)] = float(dev[sel].sum() / n) if n else 0.0
            hists[(name, bv)] = np.histogram(np.clip(h[sel], -1, 1), bins=edges)[0]
    return OutlierReport(threshold, fractions, counts, hists, edges)


def outlier_stats(
    params: ParamSet, config: ChannelConfig, blocks: int = 10_000, threshold: float = 0.1, seed: int = 0
) -> OutlierReport:
    if blocks < 1:
        raise ValueError("blocks must be >= 1")
    seed = seed ^ ANALYSIS_SEED_SALT
    bits = sample_bits(seed, params.K, 0, blocks)
    rz = sample_realizations(config, params.K + 1, seed, 0, blocks)
    return hidden_outliers(params, bits, rz, threshold)


# ---------------------------------------------------------------------------
# scatter export

SCATTER_COLUMNS = ("i", "bit", "n_eff", "parity1", "parity2")


def scatter_export(params: ParamSet, config: ChannelConfig, samples: int = 50, seed: int = 0) -> np.ndarray:
    """Rows (i, bit, n_eff, c_{i,1}, c_{i,2}) for ``samples`` blocks x K steps.

    ``n_eff`` is the phase-1 noise as the encoder sees it (forward plus
    feedback).  Parities are raw, before power allocation.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    seed = seed ^ ANALYSIS_SEED_SALT
    K = params.K
    bits = sample_bits(seed, K, 0, samples)
    rz = sample_realizations(config, K + 1, seed, 0, samples)
    view = ParamView(params.to_vector(), params.variant)
    _, _, _, c1, c2 = encode_streams(view, bits, rz)
    i = np.broadcast_to(np.arange(1, K + 1), (samples, K))
    cols = [i, bits, rz.phase1_observation[:, :K], np.asarray(c1)[:, :K], np.asarray(c2)[:, :K]]
    rows = np.stack([np.asarray(c, dtype=np.float64).T.ravel() for c in cols], axis=1)
    return rows  # ordered by i, then sample


def scatter_csv(rows: np.ndarray) -> str:
    return _csv(
        SCATTER_COLUMNS,
        ((int(r[0]), int(r[1]), f"{r[2]:.17g}", f"{r[3]:.17g}", f"{r[4]:.17g}") for r in rows),
    )


# ---------------------------------------------------------------------------
# segmented least squares


@dataclass
class Segment:
    x_start: float
    x_end: float
    slope: float
    intercept: float
    n_points: int
    sse: float


@dataclass
class PwlFit:
    segments: list
    total_sse: float
    penalty: float

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def breakpoints(self) -> np.ndarray:
        """x where each segment after the first begins."""
        return np.array([s.x_start for s in self.segments[1:]])

    @property
    def objective(self) -> float:
        return self.total_sse + self.penalty * self.n_segments

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        idx = np.searchsorted(self.breakpoints, x, side="right")
        slope = np.array([s.slope for s in self.segments])[idx]
        icpt = np.array([s.intercept for s in self.segments])[idx]
        return slope * x + icpt

    def to_csv(self) -> str:
        return _csv(
            ("segment", "x_start", "x_end", "slope", "intercept", "n_points", "sse"),
            (
                (k, f"{s.x_start:.17g}", f"{s.x_end:.17g}", f"{s.slope:.17g}", f"{s.intercept:.17g}", s.n_points,
                 f"{s.sse:.17g}")
                for k, s in enumerate(self.segments)
            ),
        )


def _validate_points(x, y, min_points: int):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y must have the same length")
    if x.size < min_points:
        raise ValueError(f"need at least {min_points} points, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("points must be finite")
    return x, y


def _segment_stats(x, y):
    """Prefix sums for O(1) least-squares error of any contiguous run."""
    z = np.zeros(1)
    return tuple(np.concatenate([z, np.cumsum(v)]) for v in (np.ones_like(x), x, y, x * x, x * y, y * y))


def _line_fit(S, i, j):
    """Slope, intercept and SSE of the LS line through points i..j-1 (arrays allowed)."""
    n, sx, sy, sxx, sxy, syy = (s[j] - s[i] for s in S)
    mx = sx / n
    my = sy / n
    cxx = sxx - sx * mx
    cxy = sxy - sx * my
    cyy = syy - sy * my
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(cxx > 1e-300, cxy / np.where(cxx > 1e-300, cxx, 1.0), 0.0)
    sse = np.maximum(cyy - slope * cxy, 0.0)
    return slope, my - slope * mx, sse


def segmented_least_squares(x, y, penalty: float, max_points: int = 5000) -> PwlFit:
    """Exact dynamic-programming minimiser of SSE + penalty * (number of segments).

    Points must be sorted by x.  Segments only break where x strictly
    increases; ties in the objective go to fewer segments.  Inputs longer
    than ``max_points`` are down-sampled evenly first.
    """
    x, y = _validate_points(x, y, 2)
    if penalty < 0:
        raise ValueError("penalty must be non-negative")
    if np.any(np.diff(x) < 0):
        raise ValueError("points must be sorted by x")
    if x.size > max_points:
        keep = np.unique(np.linspace(0, x.size - 1, max_points).round().astype(int))
        x, y = x[keep], y[keep]
    n = x.size
    S = _segment_stats(x, y)
    # a segment may start at k only if x[k] > x[k-1]
    can_start = np.concatenate([[True], np.diff(x) > 0])
    starts = np.flatnonzero(can_start)
    best = np.full(n + 1, np.inf)
    nseg = np.zeros(n + 1, dtype=np.int64)
    back = np.zeros(n + 1, dtype=np.int64)
    best[0] = 0.0
    ends_ok = np.concatenate([can_start[1:], [True]])  # segment may end after point j-1
    tol = 1e-12
    for j in range(1, n + 1):
        if not ends_ok[j - 1]:
            continue
        i = starts[starts < j]
        _, _, sse = _line_fit(S, i, j)
        cost = best[i] + sse + penalty
        m = cost.min()
        near = np.flatnonzero(cost <= m + tol * max(1.0, abs(m)))
        pick = near[np.argmin(nseg[i[near]])]
        best[j] = cost[pick]
        nseg[j] = nseg[i[pick]] + 1
        back[j] = i[pick]
    segments = []
    j = n
    while j > 0:
        i = back[j]
        slope, icpt, sse = (float(v) for v in _line_fit(S, i, j))
        segments.append(Segment(float(x[i]), float(x[j - 1]), slope, icpt, int(j - i), sse))
        j = i
    segments.reverse()
    return PwlFit(segments, float(sum(s.sse for s in segments)), float(penalty))


def brute_force_segmentation(x, y, penalty: float) -> float:
    """Minimum objective by enumerating every segmentation (for small n)."""
    x, y = _validate_points(x, y, 1)
    n = x.size
    if n > 16:
        raise ValueError("brute force is limited to 16 points")
    S = _segment_stats(x, y)
    cuts_allowed = [k for k in range(1, n) if x[k] > x[k - 1]]
    best = np.inf
    for mask in range(1 << len(cuts_allowed)):
        cuts = [c for b, c in enumerate(cuts_allowed) if mask >> b & 1]
        bounds = [0] + cuts + [n]
        total = 0.0
        for a, b in zip(bounds[:-1], bounds[1:]):
            _, _, sse = _line_fit(S, a, b)
            total += float(sse) + penalty
        best = min(best, total)
    return best


# ---------------------------------------------------------------------------
# knee fit


@dataclass
class KneeFit:
    slope: float
    knee: float
    side: str  # which side of the knee is steep: "right" (x >= knee) or "left"
    sse: float

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        on = x >= self.knee if self.side == "right" else x <= self.knee
        return np.where(on, self.slope * (x - self.knee), 0.0)


def _knee_candidates_right(x, y):
    """Best (sse, slope, knee) with the steep part on x >= knee, flat part = 0."""
    n = x.size
    # suffix sums over the steep set {k, .., n-1}
    def suffix(v):
        return np.concatenate([np.cumsum(v[::-1])[::-1], [0.0]])

    cnt = suffix(np.ones(n))
    sx, sy, sxx, sxy, syy = (suffix(v) for v in (x, y, x * x, x * y, y * y))
    flat_yy = syy[0] - syy  # sum y^2 over points before k
    best = (np.inf, 0.0, 0.0)

    def score(k, knee):
        # points k.. are steep: y ~ s (x - knee)
        a = sxy[k] - knee * sy[k]
        b = sxx[k] - 2 * knee * sx[k] + knee * knee * cnt[k]
        fit = a * a / b if b > 0 else 0.0
        return max(flat_yy[k] + syy[k] - fit, 0.0), (a / b if b > 0 else 0.0)

    for k in range(0, n - 1):
        # knee placed exactly on a data point
        sse, s = score(k, x[k])
        if sse < best[0]:
            best = (sse, s, x[k])
        # unconstrained line on the same steep set; keep it if its root
        # falls inside (x[k-1], x[k]] so the set is consistent
        m = cnt[k]
        vxx = sxx[k] - sx[k] ** 2 / m
        if vxx <= 0:
            continue
        slope = (sxy[k] - sx[k] * sy[k] / m) / vxx
        icpt = (sy[k] - slope * sx[k]) / m
        if slope == 0:
            continue
        knee = -icpt / slope
        lo = x[k - 1] if k > 0 else -np.inf
        if lo < knee <= x[k]:
            sse, s = score(k, knee)
            if sse < best[0]:
                best = (sse, s, knee)
    return best


def knee_fit(x, y, fix_knee_at_zero: bool = False, side: str | None = None) -> KneeFit:
    """Two-piece fit with a zero flat part and a sloped part past the knee.

    ``side`` picks which side is sloped ("right": x >= knee, as for bit 0;
    "left": x <= knee, as for bit 1); by default both are tried.
    """
    x, y = _validate_points(x, y, 4)
    if np.ptp(x) == 0:
        raise ValueError("degenerate input: all x are equal")
    sides = (side,) if side else ("right", "left")
    fits = []
    for sd in sides:
        if sd not in ("right", "left"):
            raise ValueError("side must be 'right' or 'left'")
        xs, ys = (x, y) if sd == "right" else (-x, y)
        order = np.argsort(xs, kind="stable")
        xs, ys = xs[order], ys[order]
        if fix_knee_at_zero:
            on = xs >= 0
            sxx = float(np.sum(xs[on] ** 2))
            slope = float(np.sum(xs[on] * ys[on]) / sxx) if sxx > 0 else 0.0
            sse = float(np.sum(ys[~on] ** 2) + np.sum((ys[on] - slope * xs[on]) ** 2))
            knee = 0.0
        else:
            sse, slope, knee = _knee_candidates_right(xs, ys)
        if sd == "left":
            # y = s (x' - k') with x' = -x  ->  y = -s (x - (-k'))
            slope, knee = -slope, -knee
        fits.append(KneeFit(float(slope), float(knee), sd, float(sse)))
    return min(fits, key=lambda f: f.sse)


# ---------------------------------------------------------------------------


def _csv(header: Iterable[str], rows: Iterable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
