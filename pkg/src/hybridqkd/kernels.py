"""Inner loops over time-tag arrays: dead-time filtering, coincidence
matching, and windowed difference histograms.

Each kernel exists twice: a numba ``@njit`` build and a numpy/Python
reference build that produces bit-identical output.  The numba build is used
unless the environment variable ``HYBRIDQKD_DISABLE_NUMBA`` is set to a
truthy value or numba is not importable.  ``implementations()`` exposes both
builds so tests can assert equality and the benchmark can time them against
each other.

All times are int64 picoseconds and all inputs must be sorted ascending.
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("HYBRIDQKD_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled by HYBRIDQKD_DISABLE_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn
        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# dead-time filter
# ---------------------------------------------------------------------------

def _dead_time_filter_impl(times, dead_ps):
    n = times.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    last = np.int64(-1) - dead_ps
    for i in range(n):
        t = times[i]
        if t - last >= dead_ps:
            keep[i] = True
            last = t
    return keep


_dead_time_filter_nb = njit(cache=True)(_dead_time_filter_impl) if NUMBA_AVAILABLE else None


def _dead_time_filter_np(times, dead_ps):
    """Iterative vectorized form: each round drops the first tag of every run
    that sits within ``dead_ps`` of the preceding survivor."""
    n = times.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.bool_)
    if dead_ps <= 0:
        return np.ones(n, dtype=np.bool_)
    alive = np.arange(n)
    cur = times
    while cur.shape[0] > 1:
        close = np.empty(cur.shape[0], dtype=np.bool_)
        close[0] = False
        close[1:] = np.diff(cur) < dead_ps
        if not close.any():
            break
        # only remove tags whose predecessor survives this round; a tag that is
        # close to an also-removed predecessor may be fine afterwards
        first_of_run = close & ~np.concatenate(([False], close[:-1]))
        alive = alive[~first_of_run]
        cur = times[alive]
    keep = np.zeros(n, dtype=np.bool_)
    keep[alive] = True
    return keep


# ---------------------------------------------------------------------------
# greedy nearest-neighbor coincidence matching
# ---------------------------------------------------------------------------

def _match_nearest_impl(a, b, half_window):
    """Pair tags of two sorted streams, greedy in global time order.

    Each event, processed in merged time order (ties: stream a first), is
    paired with its nearest not-yet-paired counterpart within
    ``half_window`` (inclusive); equal distances break toward the earlier
    counterpart.  Events that find no free counterpart stay available and
    may be claimed by a later event on the other stream.

    Returns index arrays (ai, bi), in pairing order.
    """
    n = a.shape[0]
    m = b.shape[0]
    paired_a = np.zeros(n, dtype=np.bool_)
    paired_b = np.zeros(m, dtype=np.bool_)
    cap = n if n < m else m
    out_a = np.empty(cap, dtype=np.int64)
    out_b = np.empty(cap, dtype=np.int64)
    npairs = 0
    i = 0
    j = 0
    lo_b = 0
    lo_a = 0
    while i < n or j < m:
        take_a = i < n and (j >= m or a[i] <= b[j])
        if take_a:
            if not paired_a[i]:
                t = a[i]
                while lo_b < m and b[lo_b] < t - half_window:
                    lo_b += 1
                best = -1
                best_d = half_window + 1
                k = lo_b
                while k < m and b[k] <= t + half_window:
                    if not paired_b[k]:
                        d = b[k] - t
                        if d < 0:
                            d = -d
                        if d < best_d:  # ascending scan: first seen wins ties
                            best_d = d
                            best = k
                    k += 1
                if best >= 0:
                    paired_a[i] = True
                    paired_b[best] = True
                    out_a[npairs] = i
                    out_b[npairs] = best
                    npairs += 1
            i += 1
        else:
            if not paired_b[j]:
                t = b[j]
                while lo_a < n and a[lo_a] < t - half_window:
                    lo_a += 1
                best = -1
                best_d = half_window + 1
                k = lo_a
                while k < n and a[k] <= t + half_window:
                    if not paired_a[k]:
                        d = a[k] - t
                        if d < 0:
                            d = -d
                        if d < best_d:
                            best_d = d
                            best = k
                    k += 1
                if best >= 0:
                    paired_b[j] = True
                    paired_a[best] = True
                    out_a[npairs] = best
                    out_b[npairs] = j
                    npairs += 1
            j += 1
    return out_a[:npairs], out_b[:npairs]


_match_nearest_nb = njit(cache=True)(_match_nearest_impl) if NUMBA_AVAILABLE else None
_match_nearest_np = _match_nearest_impl  # the loop is the reference definition


# ---------------------------------------------------------------------------
# windowed difference histogram
# ---------------------------------------------------------------------------

def _diff_histogram_impl(a, b, lo, hi, bin_width):
    """Histogram of (b[j] - a[i]) over all pairs with lo <= diff < hi.

    Bin k covers [lo + k*w, lo + (k+1)*w).  Both inputs sorted ascending.
    """
    nbins = int((hi - lo + bin_width - 1) // bin_width)
    counts = np.zeros(nbins, dtype=np.int64)
    m = b.shape[0]
    start = 0
    for i in range(a.shape[0]):
        t = a[i]
        while start < m and b[start] - t < lo:
            start += 1
        k = start
        while k < m and b[k] - t < hi:
            counts[(b[k] - t - lo) // bin_width] += 1
            k += 1
    return counts


_diff_histogram_nb = njit(cache=True)(_diff_histogram_impl) if NUMBA_AVAILABLE else None


def _diff_histogram_np(a, b, lo, hi, bin_width, _max_expand=4_000_000):
    nbins = int((hi - lo + bin_width - 1) // bin_width)
    counts = np.zeros(nbins, dtype=np.int64)
    lo_idx = np.searchsorted(b, a + lo, side="left")
    hi_idx = np.searchsorted(b, a + hi, side="left")
    counts_per_a = hi_idx - lo_idx
    # process a-tags in slices whose expanded pair count stays bounded
    cum = np.cumsum(counts_per_a)
    start = 0
    while start < a.shape[0]:
        base = cum[start - 1] if start > 0 else 0
        stop = int(np.searchsorted(cum, base + _max_expand, side="left")) + 1
        stop = min(max(stop, start + 1), a.shape[0])
        cpa = counts_per_a[start:stop]
        total = int(cpa.sum())
        if total:
            rep_a = np.repeat(a[start:stop], cpa)
            starts = np.cumsum(cpa) - cpa
            offsets = np.arange(total) - np.repeat(starts, cpa)
            bidx = np.repeat(lo_idx[start:stop], cpa) + offsets
            diffs = b[bidx] - rep_a
            counts += np.bincount((diffs - lo) // bin_width, minlength=nbins)
        start = stop
    return counts


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------

def _as_i64(x):
    return np.ascontiguousarray(x, dtype=np.int64)


def dead_time_filter(times, dead_ps: int) -> np.ndarray:
    """Boolean keep-mask: a tag survives if it is at least ``dead_ps`` after
    the previous surviving tag of the same array."""
    times = _as_i64(times)
    if NUMBA_AVAILABLE:
        return _dead_time_filter_nb(times, np.int64(dead_ps))
    return _dead_time_filter_np(times, np.int64(dead_ps))


def match_nearest(a, b, half_window: int):
    """Greedy nearest-counterpart pairing of two sorted tag-time arrays.

    See ``_match_nearest_impl`` for the exact policy.  Returns (ai, bi)
    int64 index arrays.
    """
    a = _as_i64(a)
    b = _as_i64(b)
    fn = _match_nearest_nb if NUMBA_AVAILABLE else _match_nearest_np
    return fn(a, b, np.int64(half_window))


def diff_histogram(a, b, lo: int, hi: int, bin_width: int) -> np.ndarray:
    """Histogram of pairwise differences b - a restricted to [lo, hi)."""
    if hi <= lo:
        raise ValueError("empty difference range")
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    a = _as_i64(a)
    b = _as_i64(b)
    fn = _diff_histogram_nb if NUMBA_AVAILABLE else _diff_histogram_np
    return fn(a, b, np.int64(lo), np.int64(hi), np.int64(bin_width))


def implementations() -> dict:
    """Both kernel builds, keyed by path name, for tests and benchmarks."""
    numpy_build = {
        "dead_time_filter": _dead_time_filter_np,
        "match_nearest": _match_nearest_np,
        "diff_histogram": _diff_histogram_np,
    }
    numba_build = None
    if NUMBA_AVAILABLE:
        numba_build = {
            "dead_time_filter": _dead_time_filter_nb,
            "match_nearest": _match_nearest_nb,
            "diff_histogram": _diff_histogram_nb,
        }
    return {
        "active": "numba" if NUMBA_AVAILABLE else "numpy",
        "numpy": numpy_build,
        "numba": numba_build,
    }
