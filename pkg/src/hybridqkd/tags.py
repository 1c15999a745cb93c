"""Classical analysis of two time-tag streams.

Everything downstream of the detectors and upstream of the protocol lives
here: finding the inter-stream delay by cross-correlating tag times,
pairing tags into coincidences inside a fixed window, aggregating pair
counts per detector combination, and turning counts into correlation
coefficients and a CHSH value with Poisson error bars.

Conventions
-----------
* ``delay`` is Bob's time minus Alice's time for a correlated pair; a pair
  matches when ``|t_a - (t_b - delay)| <= window / 2``.
* The coincidence window is a full width; with integer picosecond tags the
  acceptance test is ``|diff| <= window // 2``.
* Correlation estimates are computed from detector-pair count sets.  A
  detector pair belongs to the "plus" set when the product of its port
  labels (the +/- wiring of each analyzer output) is positive, which folds
  the one flipped analyzer's sign convention into the counts themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .optics import TagStream
from .quantum import MeasurementSetting, standard_settings

__all__ = [
    "InsufficientDataError",
    "NoCorrelationError",
    "InsufficientStatisticsError",
    "DelayEstimate",
    "CoincidenceMatrix",
    "EstimatedCorrelation",
    "WindowPoint",
    "estimate_delay",
    "match_coincidences",
    "build_matrix",
    "correlation_from_counts",
    "standard_pair_sets",
    "key_pair_sets",
    "chsh_from_counts",
    "qber_from_matrix",
    "window_sweep",
    "accidental_pair_rate",
    "matrix_csv",
    "estimates_csv",
]

CHSH_TERMS = (("a0", "b0"), ("a0", "b1"), ("a1", "b0"), ("a1", "b1"))


class InsufficientDataError(ValueError):
    """A stream is empty or too small for the requested estimate."""


class NoCorrelationError(ValueError):
    """The cross-correlation histogram has no significant peak."""


class InsufficientStatisticsError(ValueError):
    """A correlation estimate was requested from zero counts."""


# ---------------------------------------------------------------------------
# delay estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DelayEstimate:
    """Result of the cross-correlation delay search."""

    delay_ps: int
    significance: float
    peak_count: int
    background_mean: float
    bin_width_ps: int


def _times(stream) -> np.ndarray:
    if isinstance(stream, TagStream):
        return stream.times
    return np.ascontiguousarray(stream, dtype=np.int64)


def _poisson_tail_log_bound(k: float, mu: float) -> float:
    """Chernoff upper bound on log P(Poisson(mu) >= k), valid for k > mu."""
    if k <= mu:
        return 0.0
    return k - mu - k * math.log(k / mu)


def _peak_bin(hist: np.ndarray, smooth_bins: int) -> int:
    """Locate the peak: argmax of a short moving sum (robust to jitter
    spreading the peak over neighbors), then the largest raw bin inside
    that neighborhood.  All ties resolve to the smaller index, i.e. the
    smaller delay."""
    if hist.shape[0] <= smooth_bins:
        return int(np.argmax(hist))
    kernel = np.ones(smooth_bins, dtype=np.int64)
    windowed = np.convolve(hist, kernel, mode="same")
    center = int(np.argmax(windowed))
    half = smooth_bins // 2
    lo = max(0, center - half)
    hi = min(hist.shape[0], center + half + 1)
    return lo + int(np.argmax(hist[lo:hi]))


def _refine_centroid(hist: np.ndarray, peak: int, background_mean: float) -> float:
    """Background-subtracted centroid of the bins around ``peak``.

    Detector jitter spreads the coincidence peak over several fine bins, so
    the raw argmax wanders by a bin or two under Poisson noise; the local
    centroid is stable to a fraction of a bin.  The centroid window is sized
    from the peak's own half-maximum width so a broad peak is covered in
    full, while a jitter-free single-bin peak keeps a tight window and an
    exact result.  Returns a fractional bin index.
    """
    threshold = background_mean + 0.5 * (float(hist[peak]) - background_mean)
    left = peak
    while left > 0 and hist[left - 1] > threshold:
        left -= 1
    right = peak
    while right < hist.shape[0] - 1 and hist[right + 1] > threshold:
        right += 1
    span = min(max(4, (3 * (right - left + 1)) // 2), (hist.shape[0] - 1) // 2)

    def centroid(center: int) -> float:
        lo = max(0, center - span)
        hi = min(hist.shape[0], center + span + 1)
        weights = hist[lo:hi].astype(np.float64) - background_mean
        np.clip(weights, 0.0, None, out=weights)
        total = weights.sum()
        if total <= 0.0:
            return float(center)
        return float(np.dot(weights, np.arange(lo, hi, dtype=np.float64))
                     / total)

    # a second pass centred on the first estimate removes the asymmetry a
    # window centred on the (noisy) argmax bin would otherwise introduce
    return centroid(int(round(centroid(peak))))


def _check_peak(hist: np.ndarray, peak: int, min_significance: float,
                max_false_alarm: float, min_peak_count: int):
    """Demand the peak stand out from a Poisson-flat background.

    Two tests must both pass: the peak exceeds the off-peak mean by
    ``min_significance`` standard deviations, and the Bonferroni-corrected
    Poisson tail probability of any bin reaching the peak count is below
    ``max_false_alarm``.  The second test is what reliably rejects
    independent streams, where a lucky accidental bin can clear a
    mean-based threshold alone.
    """
    nbins = hist.shape[0]
    peak_count = int(hist[peak])
    bg = np.delete(hist, slice(max(0, peak - 2), min(nbins, peak + 3)))
    mu = float(bg.mean()) if bg.size else 0.0
    sigma = math.sqrt(max(mu, 1e-9))
    significance = (peak_count - mu) / sigma
    if peak_count < min_peak_count:
        raise NoCorrelationError(
            f"correlation peak has only {peak_count} counts")
    if significance < min_significance:
        raise NoCorrelationError(
            f"peak {peak_count} is {significance:.1f} sigma above the "
            f"background mean {mu:.2f}; need {min_significance}")
    log_tail = _poisson_tail_log_bound(peak_count, max(mu, 1e-3))
    if log_tail + math.log(nbins) > math.log(max_false_alarm):
        raise NoCorrelationError(
            "peak is consistent with an accidental fluctuation "
            f"(log tail bound {log_tail:.1f} over {nbins} bins)")
    return peak_count, mu, significance


def estimate_delay(a, b, search_range_ps: int = 2**28, bin_width_ps: int = 16,
                   *, coarse_bin_ps: int = 4096,
                   max_coarse_tags: int = 1 << 18, max_fine_tags: int = 1 << 21,
                   min_significance: float = 5.0, max_false_alarm: float = 1e-6,
                   min_peak_count: int = 8) -> DelayEstimate:
    """Find the delay (Bob minus Alice) by cross-correlation of tag times.

    A coarse histogram over the full +-``search_range_ps`` locates the
    peak on a time-ordered prefix of each stream (prefixes preserve the
    coincidence overlap; random thinning would suppress it quadratically).
    An exact fine histogram at ``bin_width_ps`` around the coarse peak then
    gives the delay as the peak bin's center.

    Raises InsufficientDataError for empty streams and NoCorrelationError
    when no significant peak exists (e.g. independent streams).
    """
    ta, tb = _times(a), _times(b)
    if ta.size == 0 or tb.size == 0:
        raise InsufficientDataError("cannot estimate a delay from an "
                                    "empty tag stream")
    if bin_width_ps < 1:
        raise ValueError("bin_width_ps must be >= 1")
    if search_range_ps < bin_width_ps:
        raise ValueError("search_range_ps must cover at least one bin")
    coarse_bin_ps = max(bin_width_ps, coarse_bin_ps)

    # --- coarse stage ---------------------------------------------------
    ca, cb = ta[:max_coarse_tags], tb[:max_coarse_tags]
    hist = kernels.diff_histogram(ca, cb, -search_range_ps, search_range_ps,
                                  coarse_bin_ps)
    peak = _peak_bin(hist, smooth_bins=3)
    _check_peak(hist, peak, min_significance, max_false_alarm, min_peak_count)
    coarse_center = -search_range_ps + peak * coarse_bin_ps + coarse_bin_ps // 2

    # --- fine stage -------------------------------------------------------
    span = 2 * coarse_bin_ps
    fa, fb = ta[:max_fine_tags], tb[:max_fine_tags]
    lo = coarse_center - span
    hist = kernels.diff_histogram(fa, fb, lo, coarse_center + span,
                                  bin_width_ps)
    peak = _peak_bin(hist, smooth_bins=5)
    peak_count, mu, significance = _check_peak(
        hist, peak, min_significance, max_false_alarm, min_peak_count)
    center = _refine_centroid(hist, peak, mu)
    delay = lo + int(round(center * bin_width_ps)) + bin_width_ps // 2
    return DelayEstimate(delay_ps=int(delay), significance=float(significance),
                         peak_count=peak_count, background_mean=mu,
                         bin_width_ps=bin_width_ps)


# ---------------------------------------------------------------------------
# coincidence matching
# ---------------------------------------------------------------------------

def match_coincidences(a, b, window_ps: int, delay_ps: int):
    """Pair tags with ``|t_a - (t_b - delay)| <= window/2``.

    Greedy in global time order: each tag pairs with its nearest unpaired
    counterpart, distance ties breaking toward the earlier counterpart.
    Returns (alice_indices, bob_indices), sorted by Alice index; each tag
    appears at most once.
    """
    if window_ps < 1:
        raise ValueError("window_ps must be >= 1")
    ta, tb = _times(a), _times(b)
    ai, bi = kernels.match_nearest(ta, tb - np.int64(delay_ps),
                                   window_ps // 2)
    order = np.argsort(ai, kind="stable")
    return ai[order], bi[order]


# ---------------------------------------------------------------------------
# count accumulation and estimates
# ---------------------------------------------------------------------------

@dataclass
class CoincidenceMatrix:
    """Coincidence counts keyed by (alice detector, bob detector)."""

    counts: dict = field(default_factory=dict)
    window_ps: int = 0
    delay_ps: int = 0
    accumulation_ps: int = 0

    def total(self) -> int:
        return sum(self.counts.values())

    def get(self, alice_det: int, bob_det: int) -> int:
        return self.counts.get((alice_det, bob_det), 0)


def build_matrix(a: TagStream, b: TagStream, pairs, window_ps: int,
                 delay_ps: int) -> CoincidenceMatrix:
    """Aggregate matched pairs by detector-channel combination."""
    ai, bi = pairs
    counts: dict = {}
    if len(ai):
        combo = a.channels[ai].astype(np.int64) * 256 + b.channels[bi]
        uniq, n = np.unique(combo, return_counts=True)
        counts = {(int(u) // 256, int(u) % 256): int(c)
                  for u, c in zip(uniq, n)}
    return CoincidenceMatrix(counts=counts, window_ps=window_ps,
                             delay_ps=delay_ps,
                             accumulation_ps=a.duration_ps)


@dataclass(frozen=True)
class EstimatedCorrelation:
    value: float
    std_error: float
    total_counts: int


def correlation_from_counts(m: CoincidenceMatrix, plus_pairs,
                            minus_pairs) -> EstimatedCorrelation:
    """E = (sum(plus) - sum(minus)) / total with Poisson error propagation.

    ``plus_pairs``/``minus_pairs`` are disjoint sets of (alice detector,
    bob detector) tuples.
    """
    plus_pairs, minus_pairs = set(plus_pairs), set(minus_pairs)
    if plus_pairs & minus_pairs:
        raise ValueError("plus and minus detector-pair sets overlap")
    n_plus = sum(m.get(*p) for p in plus_pairs)
    n_minus = sum(m.get(*p) for p in minus_pairs)
    total = n_plus + n_minus
    if total == 0:
        raise InsufficientStatisticsError(
            "no coincidences in the requested detector pairs")
    value = (n_plus - n_minus) / total
    std_error = math.sqrt(4.0 * n_plus * n_minus / total**3)
    return EstimatedCorrelation(value=value, std_error=std_error,
                                total_counts=total)


def _port_label(setting: MeasurementSetting, port: int) -> int:
    return 1 if port == setting.plus_port else -1


def _pair_sets_for(a_set: MeasurementSetting, b_set: MeasurementSetting):
    plus, minus = set(), set()
    for xa in (1, -1):
        for xb in (1, -1):
            pa = a_set.port_for_outcome(xa)
            pb = b_set.port_for_outcome(xb)
            if _port_label(a_set, pa) * _port_label(b_set, pb) > 0:
                plus.add((pa, pb))
            else:
                minus.add((pa, pb))
    return frozenset(plus), frozenset(minus)


def standard_pair_sets() -> dict:
    """Plus/minus detector-pair sets for the four CHSH terms, derived from
    the standard analyzer wiring (port labels carry the sign convention)."""
    s = standard_settings()
    return {(an, bn): _pair_sets_for(s[an], s[bn]) for an, bn in CHSH_TERMS}


def key_pair_sets() -> tuple:
    """(correct, error) detector-pair sets for the key combination (a2, b0):
    H with the early slot and V with the late slot are the correct pairings."""
    s = standard_settings()
    return _pair_sets_for(s["a2"], s["b0"])


def chsh_from_counts(m: CoincidenceMatrix, basis_map=None):
    """S = E(a0,b0) + E(a0,b1) + E(a1,b0) - E(a1,b1) from counts, with the
    per-term errors summed in quadrature.  Returns (S, std_error)."""
    if basis_map is None:
        basis_map = standard_pair_sets()
    total_s, var = 0.0, 0.0
    for i, term in enumerate(CHSH_TERMS):
        plus, minus = basis_map[term]
        est = correlation_from_counts(m, plus, minus)
        sign = -1.0 if i == 3 else 1.0
        total_s += sign * est.value
        var += est.std_error**2
    return total_s, math.sqrt(var)


def qber_from_matrix(m: CoincidenceMatrix) -> EstimatedCorrelation:
    """Key-basis error fraction from all (a2, b0) coincidences: mismatched
    slot pairings over the total, with binomial std error."""
    correct, error = key_pair_sets()
    n_ok = sum(m.get(*p) for p in correct)
    n_err = sum(m.get(*p) for p in error)
    total = n_ok + n_err
    if total == 0:
        raise InsufficientStatisticsError("no key-basis coincidences")
    q = n_err / total
    return EstimatedCorrelation(value=q,
                                std_error=math.sqrt(max(q * (1 - q), 1e-12)
                                                    / total),
                                total_counts=total)


# ---------------------------------------------------------------------------
# sweeps and diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowPoint:
    window_ps: int
    s: float
    s_err: float
    pairs: int


def window_sweep(a: TagStream, b: TagStream, windows, delay_ps: int,
                 basis_map=None):
    """Recompute S on the same streams for each coincidence window."""
    windows = list(windows)
    if not windows:
        raise ValueError("need at least one window")
    out = []
    for w in windows:
        pairs = match_coincidences(a, b, w, delay_ps)
        m = build_matrix(a, b, pairs, w, delay_ps)
        s, err = chsh_from_counts(m, basis_map)
        out.append(WindowPoint(window_ps=int(w), s=s, s_err=err,
                               pairs=len(pairs[0])))
    return out


def accidental_pair_rate(a: TagStream, b: TagStream, window_ps: int) -> float:
    """Diagnostic estimate of uncorrelated pairs per second: the product of
    the two singles rates times the window width.  Not subtracted from any
    estimate; matches treating every coincidence as signal."""
    return a.rate_hz() * b.rate_hz() * (window_ps * 1e-12)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def matrix_csv(m: CoincidenceMatrix) -> str:
    lines = ["alice_det,bob_det,count"]
    for (da, db) in sorted(m.counts):
        lines.append(f"{da},{db},{m.counts[(da, db)]}")
    return "\n".join(lines) + "\n"


def estimates_csv(estimates: dict) -> str:
    """``term,value,std_error`` rows; values formatted stably for diffing."""
    lines = ["term,value,std_error"]
    for term, est in estimates.items():
        lines.append(f"{term},{est.value:.10g},{est.std_error:.10g}")
    return "\n".join(lines) + "\n"
