"""Monte-Carlo model of the photon-pair link, from emission to time tags.

Physical picture
----------------
A CW-pumped source emits photon pairs at Poisson times.  The short arm
carries a polarization qubit to Alice; en route, a polarization-selective
delay line retards the V component by one bin separation (800 ps), so
Alice's detection time tags her photon's path.  The long arm carries the
partner photon over fiber to Bob, whose decoder splits it 50/50 between a
direct arrival-time readout (time basis) and an unbalanced interferometer
with the same 800 ps imbalance (interference basis).

Relative to the unknown emission time, each pair therefore lands in one of
two timing classes:

* central (probability 1/2): both photons acquire the same bin offset.
  These are the coincidences a narrow window keeps, and their outcomes
  follow the two-qubit Born rule of :mod:`hybridqkd.quantum`, including the
  phase-sensitive interference terms.
* satellite (probability 1/2): the offsets differ by +-800 ps, the paths are
  distinguishable, and outcomes carry no phase correlation.  For the time
  basis these clicks exist and sit 800 ps off the coincidence peak (they are
  what poisons wide matching windows); for the interference basis the
  decoder's central-peak post-selection discards the Bob click outright.

Detection applies transmittance x efficiency thinning, adds channel delay
and Gaussian timing jitter (sigma = FWHM / 2.3548), merges Poisson dark
counts, and enforces a per-channel dead time.  Emissions that no detector
would record are never instantiated, which keeps 1e8-pairs-per-second
configurations tractable; the thinning is statistically exact.

All tag times are int64 picoseconds.
"""

from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .quantum import MeasurementSetting, hybrid_state, joint_probability, standard_settings

BIN_SEPARATION_PS = 800
FWHM_TO_SIGMA = 1.0 / 2.3548
PS_PER_SECOND = 1_000_000_000_000

__all__ = [
    "BIN_SEPARATION_PS",
    "SourceModel",
    "ChannelModel",
    "DetectorModel",
    "DriftModel",
    "Station",
    "TimeTag",
    "TagStream",
    "GroundTruth",
    "SessionResult",
    "combined_fwhm",
    "detector_presets",
    "alice_station",
    "bob_station",
    "generate_pair_times",
    "phase_at",
    "sample_pair_outcome",
    "detect",
    "simulate_session",
    "dump_tagstream",
    "load_tagstream",
]


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceModel:
    """Pair source: emission rate and the static interferometric phase."""

    pair_rate_hz: float
    reference_phase: float = math.pi

    def __post_init__(self):
        if self.pair_rate_hz < 0:
            raise ValueError("pair_rate_hz must be >= 0")


@dataclass(frozen=True)
class ChannelModel:
    """One party's propagation path: power transmittance and fixed delay."""

    transmittance: float
    delay_ps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.transmittance <= 1.0:
            raise ValueError("transmittance must be in [0, 1]")
        if self.delay_ps < 0:
            raise ValueError("delay_ps must be >= 0")


@dataclass(frozen=True)
class DetectorModel:
    """Per-channel detector: efficiency, timing jitter, darks, dead time."""

    efficiency: float
    jitter_fwhm_ps: float
    dark_rate_hz: float
    dead_time_ps: int

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must be in [0, 1]")
        if self.jitter_fwhm_ps < 0 or self.dark_rate_hz < 0 or self.dead_time_ps < 0:
            raise ValueError("jitter, dark rate, and dead time must be >= 0")

    @property
    def jitter_sigma_ps(self) -> float:
        return self.jitter_fwhm_ps * FWHM_TO_SIGMA


def combined_fwhm(*fwhms: float) -> float:
    """Quadrature sum, for folding detector and decoder jitter into one FWHM."""
    return math.sqrt(sum(f * f for f in fwhms))


def detector_presets() -> dict[str, DetectorModel]:
    """Stock single-photon counters for the two wavelengths of the link."""
    return {
        # silicon APD module for the short-wavelength arm
        "spcm": DetectorModel(efficiency=0.55, jitter_fwhm_ps=400.0,
                              dark_rate_hz=3000.0, dead_time_ps=50_000),
        # superconducting nanowire for the fiber arm
        "sspd": DetectorModel(efficiency=0.65, jitter_fwhm_ps=70.0,
                              dark_rate_hz=100.0, dead_time_ps=40_000),
    }


@dataclass(frozen=True)
class DriftModel:
    """Interferometric phase excursion on top of the source reference phase.

    kind "none": constant ``offset_rad``.
    kind "linear": offset + rate * t.
    kind "sine": offset + amplitude * sin(2 pi t / period).
    """

    kind: str = "none"
    offset_rad: float = 0.0
    rate_rad_per_s: float = 0.0
    amplitude_rad: float = 0.0
    period_s: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "linear", "sine"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if self.kind == "sine" and self.period_s <= 0:
            raise ValueError("sine drift needs period_s > 0")


def phase_at(source: SourceModel, drift: DriftModel, t_ps) -> np.ndarray | float:
    """Total interferometric phase at emission time(s) t_ps."""
    t_s = np.asarray(t_ps, dtype=np.float64) / PS_PER_SECOND
    if drift.kind == "none":
        out = np.full_like(t_s, drift.offset_rad)
    elif drift.kind == "linear":
        out = drift.offset_rad + drift.rate_rad_per_s * t_s
    else:
        out = drift.offset_rad + drift.amplitude_rad * np.sin(
            2.0 * math.pi * t_s / drift.period_s)
    out = source.reference_phase + out
    if np.ndim(t_ps) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Station:
    """One party's receiver: channel, detectors, analyzer settings, splitting.

    ``modes`` labels how each setting turns a photon into a click time:
    "polarizer" (bin follows the photon's path), "time" (bin follows the
    measured outcome), or "interference" (central-peak post-selected, bin
    latent).  ``splitting`` is the passive routing probability per setting.
    """

    channel: ChannelModel
    detector: DetectorModel
    settings: tuple[MeasurementSetting, ...]
    splitting: tuple[float, ...]
    modes: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.settings) == len(self.splitting) == len(self.modes)):
            raise ValueError("settings, splitting, and modes must align")
        if abs(sum(self.splitting) - 1.0) > 1e-9:
            raise ValueError("splitting ratios must sum to 1")
        for m in self.modes:
            if m not in ("polarizer", "time", "interference"):
                raise ValueError(f"unknown analyzer mode {m!r}")
        ports = [p for s in self.settings for p in (s.plus_port, s.minus_port)]
        if len(set(ports)) != len(ports):
            raise ValueError("detector channels must be distinct within a station")

    @property
    def channel_ids(self) -> tuple[int, ...]:
        return tuple(p for s in self.settings for p in (s.plus_port, s.minus_port))

    def setting_index(self, name: str) -> int:
        for i, s in enumerate(self.settings):
            if s.name == name:
                return i
        raise KeyError(name)


def alice_station(channel: ChannelModel, detector: DetectorModel) -> Station:
    """Polarization analyzer side: half the photons to the key setting a2,
    a quarter each to the test settings a0 and a1."""
    s = standard_settings()
    return Station(
        channel=channel,
        detector=detector,
        settings=(s["a2"], s["a0"], s["a1"]),
        splitting=(0.5, 0.25, 0.25),
        modes=("polarizer", "polarizer", "polarizer"),
    )


def bob_station(channel: ChannelModel, detector: DetectorModel) -> Station:
    """Time-bin decoder side: 50/50 between arrival-time readout and the
    interferometric basis."""
    s = standard_settings()
    return Station(
        channel=channel,
        detector=detector,
        settings=(s["b0"], s["b1"]),
        splitting=(0.5, 0.5),
        modes=("time", "interference"),
    )


# ---------------------------------------------------------------------------
# tag containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeTag:
    channel: int
    time_ps: int


@dataclass
class TagStream:
    """All tags one party recorded: parallel (channel, time) arrays sorted by
    time (ties by channel id).  ``duration_ps`` is the emission window; tags
    may trail slightly past it through delay, bin offset, and jitter."""

    party: str
    duration_ps: int
    channels: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        self.times = np.asarray(self.times, dtype=np.int64)
        if self.channels.shape != self.times.shape:
            raise ValueError("channels and times must have equal length")
        if self.times.size and (np.diff(self.times) < 0).any():
            raise ValueError("tag times must be sorted ascending")
        if self.times.size and self.times[0] < 0:
            raise ValueError("tag times must be >= 0")

    def __len__(self):
        return self.times.shape[0]

    def channel_times(self, channel: int) -> np.ndarray:
        return self.times[self.channels == channel]

    def rate_hz(self) -> float:
        if self.duration_ps == 0:
            return 0.0
        return len(self) * PS_PER_SECOND / self.duration_ps


@dataclass
class GroundTruth:
    """Per-tag provenance, index-aligned with the two tag streams.

    emission ids are session-local labels (-1 for dark counts); a pair of
    tags with the same nonnegative id came from the same emission.  setting
    is the index into the station's settings tuple (-1 dark), outcome the
    quantum +-1 (0 dark), bin the time-bin offset count (-1 dark).
    """

    emission_count: int
    alice_emission: np.ndarray
    alice_setting: np.ndarray
    alice_outcome: np.ndarray
    alice_bin: np.ndarray
    bob_emission: np.ndarray
    bob_setting: np.ndarray
    bob_outcome: np.ndarray
    bob_bin: np.ndarray

    def true_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Tag-index pairs whose two sides share an emission id."""
        a_ok = self.alice_emission >= 0
        b_ok = self.bob_emission >= 0
        common, ai, bi = np.intersect1d(
            self.alice_emission[a_ok], self.bob_emission[b_ok],
            assume_unique=True, return_indices=True)
        return np.flatnonzero(a_ok)[ai], np.flatnonzero(b_ok)[bi]


@dataclass
class SessionResult:
    alice: TagStream
    bob: TagStream
    truth: GroundTruth


# ---------------------------------------------------------------------------
# scalar reference operations
# ---------------------------------------------------------------------------

def generate_pair_times(source: SourceModel, duration_s: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Homogeneous Poisson emission times over [0, duration) in int64 ps."""
    lam = source.pair_rate_hz * duration_s
    n = rng.poisson(lam)
    times = np.sort(rng.uniform(0.0, duration_s * PS_PER_SECOND, size=n))
    return times.astype(np.int64)


def sample_pair_outcome(phase: float, alice: Station, bob: Station,
                        rng: np.random.Generator):
    """Sample one emitted pair's analyzer routing, outcomes, and bins.

    Returns ``(alice_part, bob_part, central)`` where each part is either
    None (click discarded by interferometric post-selection) or a tuple
    ``(setting_index, outcome, bin)``.  Detection loss is not applied here;
    see :func:`detect`.
    """
    a_idx = int(rng.choice(len(alice.settings), p=alice.splitting))
    b_idx = int(rng.choice(len(bob.settings), p=bob.splitting))
    a_set = alice.settings[a_idx]
    b_set = bob.settings[b_idx]
    b_mode = bob.modes[b_idx]
    central = bool(rng.random() < 0.5)

    if central:
        state = hybrid_state(phase)
        probs = [joint_probability(state, a_set, b_set, xa, xb)
                 for xa in (1, -1) for xb in (1, -1)]
        pick = int(rng.choice(4, p=np.asarray(probs) / sum(probs)))
        x = 1 if pick < 2 else -1
        y = 1 if pick % 2 == 0 else -1
        if b_mode == "time":
            s = 0 if y == 1 else 1          # arrival time reveals the bin
        else:
            s = int(rng.random() < 0.5)     # latent, erased by interference
        return (a_idx, x, s), (b_idx, y, s), True

    # satellite: paths distinguishable, no phase correlation
    c = int(rng.random() < 0.5)
    p = 1 - c
    x = _path_conditioned_outcome(a_set, p, rng)
    if b_mode == "time":
        y = 1 if c == 0 else -1
        return (a_idx, x, p), (b_idx, y, c), False
    # interference basis: decoder keeps the central peak only
    return (a_idx, x, p), None, False


def _path_conditioned_outcome(setting: MeasurementSetting, path: int,
                              rng: np.random.Generator) -> int:
    """Analyzer outcome for a photon of definite path (0: H-like, 1: V-like)."""
    nz = setting.bloch[2]
    p_plus = (1.0 + nz) / 2.0 if path == 0 else (1.0 - nz) / 2.0
    return 1 if rng.random() < p_plus else -1


def detect(arrival_ps: float, port: int, channel: ChannelModel,
           detector: DetectorModel, state: dict, rng: np.random.Generator):
    """One detection attempt.  ``arrival_ps`` already includes any time-bin
    offset; this applies loss thinning, channel delay, jitter, and the
    per-channel dead time (``state`` maps port -> last kept time).

    Calls must be made in nondecreasing arrival order per port.  Returns a
    TimeTag or None.
    """
    if rng.random() >= channel.transmittance * detector.efficiency:
        return None
    t = arrival_ps + channel.delay_ps
    if detector.jitter_fwhm_ps > 0:
        t += rng.normal(0.0, detector.jitter_sigma_ps)
    t = int(round(t))
    if t < 0:
        return None
    last = state.get(port)
    if last is not None and t - last < detector.dead_time_ps:
        return None
    state[port] = t
    return TimeTag(channel=port, time_ps=t)


# ---------------------------------------------------------------------------
# vectorized session simulation
# ---------------------------------------------------------------------------

def _poisson_stream_ps(rng: np.random.Generator, rate_hz: float,
                       duration_ps: int) -> np.ndarray:
    """Poisson process arrival times in [0, duration) ps, float64, sorted."""
    if rate_hz <= 0 or duration_ps <= 0:
        return np.empty(0, dtype=np.float64)
    mean_gap_ps = PS_PER_SECOND / rate_hz
    expected = duration_ps / mean_gap_ps
    chunk = int(expected + 6.0 * math.sqrt(expected + 1.0) + 16)
    parts = []
    total = 0.0
    while True:
        gaps = rng.exponential(mean_gap_ps, size=chunk)
        times = total + np.cumsum(gaps)
        parts.append(times)
        total = float(times[-1])
        if total >= duration_ps:
            break
    times = np.concatenate(parts) if len(parts) > 1 else parts[0]
    return times[times < duration_ps]


def _setting_choice(rng, n, splitting):
    edges = np.cumsum(splitting)
    idx = np.searchsorted(edges, rng.random(n), side="right")
    return np.minimum(idx, len(edges) - 1).astype(np.int8)


def _plus_probability_by_path(station: Station) -> np.ndarray:
    """P(outcome +1 | path) per setting; column 0 for path 0, column 1 for path 1."""
    nz = np.array([s.bloch[2] for s in station.settings])
    return np.stack([(1.0 + nz) / 2.0, (1.0 - nz) / 2.0], axis=1)


def _ports_for(station: Station, setting_idx: np.ndarray,
               outcome: np.ndarray) -> np.ndarray:
    plus = np.array([s.plus_port for s in station.settings], dtype=np.uint8)
    minus = np.array([s.minus_port for s in station.settings], dtype=np.uint8)
    sign = np.array([s.outcome_sign for s in station.settings], dtype=np.int8)
    hits_plus = outcome == sign[setting_idx]
    return np.where(hits_plus, plus[setting_idx], minus[setting_idx])


class _PartyAccumulator:
    """Collects click batches for one party before merge/sort/dead-time."""

    def __init__(self):
        self.times = []
        self.ports = []
        self.emission = []
        self.setting = []
        self.outcome = []
        self.bin = []

    def add(self, times, ports, emission, setting, outcome, bins):
        self.times.append(np.asarray(times))
        self.ports.append(np.asarray(ports, dtype=np.uint8))
        self.emission.append(np.asarray(emission, dtype=np.int64))
        self.setting.append(np.asarray(setting, dtype=np.int8))
        self.outcome.append(np.asarray(outcome, dtype=np.int8))
        self.bin.append(np.asarray(bins, dtype=np.int8))


def _finalize_party(acc: _PartyAccumulator, station: Station, party: str,
                    duration_ps: int):
    times = np.concatenate(acc.times) if acc.times else np.empty(0)
    ports = np.concatenate(acc.ports) if acc.ports else np.empty(0, np.uint8)
    emission = np.concatenate(acc.emission) if acc.emission else np.empty(0, np.int64)
    setting = np.concatenate(acc.setting) if acc.setting else np.empty(0, np.int8)
    outcome = np.concatenate(acc.outcome) if acc.outcome else np.empty(0, np.int8)
    bins = np.concatenate(acc.bin) if acc.bin else np.empty(0, np.int8)
    acc.times = acc.ports = acc.emission = acc.setting = acc.outcome = acc.bin = None

    times = np.rint(times).astype(np.int64)
    ok = times >= 0
    if not ok.all():
        times, ports, emission = times[ok], ports[ok], emission[ok]
        setting, outcome, bins = setting[ok], outcome[ok], bins[ok]

    order = np.lexsort((ports, times))
    times, ports = times[order], ports[order]
    emission, setting = emission[order], setting[order]
    outcome, bins = outcome[order], bins[order]

    keep = np.ones(times.shape[0], dtype=bool)
    dead = station.detector.dead_time_ps
    if dead > 0:
        for ch in station.channel_ids:
            sel = ports == ch
            keep[sel] = kernels.dead_time_filter(times[sel], dead)
    times, ports = times[keep], ports[keep]
    emission, setting = emission[keep], setting[keep]
    outcome, bins = outcome[keep], bins[keep]

    stream = TagStream(party=party, duration_ps=duration_ps,
                       channels=ports, times=times)
    return stream, emission, setting, outcome, bins


def simulate_session(source: SourceModel, drift: DriftModel, alice: Station,
                     bob: Station, duration_s: float, seed) -> SessionResult:
    """Simulate one accumulation block and return both tag streams plus truth.

    ``seed`` may be an int, a SeedSequence, or a Generator.  Identical
    arguments and seed give bit-identical streams.
    """
    rng = np.random.default_rng(seed)
    duration_ps = int(round(duration_s * PS_PER_SECOND))

    p_det_a = alice.channel.transmittance * alice.detector.efficiency
    p_det_b = bob.channel.transmittance * bob.detector.efficiency
    rate = source.pair_rate_hz

    acc_a = _PartyAccumulator()
    acc_b = _PartyAccumulator()
    next_emission = 0

    # --- pairs with both photons detected -------------------------------
    t_both = _poisson_stream_ps(rng, rate * p_det_a * p_det_b, duration_ps)
    n_both = t_both.shape[0]
    ids_both = np.arange(next_emission, next_emission + n_both, dtype=np.int64)
    next_emission += n_both

    a_set = _setting_choice(rng, n_both, alice.splitting)
    b_set = _setting_choice(rng, n_both, bob.splitting)
    central = rng.random(n_both) < 0.5

    x = np.empty(n_both, dtype=np.int8)
    y = np.empty(n_both, dtype=np.int8)
    bin_a = np.empty(n_both, dtype=np.int8)
    bin_b = np.empty(n_both, dtype=np.int8)
    b_keep = np.ones(n_both, dtype=bool)

    # central events: Born-rule joint outcomes with per-event phase
    idx_c = np.flatnonzero(central)
    if idx_c.size:
        phases = phase_at(source, drift, t_both[idx_c])
        e_pair = _pair_correlation_table(alice, bob, a_set[idx_c], b_set[idx_c], phases)
        same_sign = rng.random(idx_c.size) < (1.0 + e_pair) / 2.0
        xc = (rng.random(idx_c.size) < 0.5).astype(np.int8) * 2 - 1
        yc = np.where(same_sign, xc, -xc).astype(np.int8)
        x[idx_c], y[idx_c] = xc, yc
        is_time = _mode_mask(bob, b_set[idx_c], "time")
        latent = (rng.random(idx_c.size) < 0.5).astype(np.int8)
        bc = np.where(is_time, ((1 - yc) // 2).astype(np.int8), latent)
        bin_a[idx_c] = bc
        bin_b[idx_c] = bc

    # satellite events: distinguishable paths, uncorrelated outcomes
    idx_s = np.flatnonzero(~central)
    if idx_s.size:
        c = (rng.random(idx_s.size) < 0.5).astype(np.int8)
        p = (1 - c).astype(np.int8)
        x[idx_s] = _path_outcomes(alice, a_set[idx_s], p, rng)
        is_time = _mode_mask(bob, b_set[idx_s], "time")
        y[idx_s] = np.where(c == 0, 1, -1).astype(np.int8)
        bin_a[idx_s] = p
        bin_b[idx_s] = c
        b_keep[idx_s] = is_time          # interference satellites are discarded

    # interferometric post-selection on central clicks is already folded into
    # the central/satellite split: central b1 clicks survive, satellites don't.

    _emit_clicks(acc_a, alice, rng, t_both, ids_both, a_set, x, bin_a)
    _emit_clicks(acc_b, bob, rng, t_both[b_keep], ids_both[b_keep],
                 b_set[b_keep], y[b_keep], bin_b[b_keep])
    del t_both, ids_both, a_set, b_set, central, x, y, bin_a, bin_b, b_keep

    # --- pairs with only Alice's photon detected -------------------------
    t_a = _poisson_stream_ps(rng, rate * p_det_a * (1.0 - p_det_b), duration_ps)
    n_a = t_a.shape[0]
    ids_a = np.arange(next_emission, next_emission + n_a, dtype=np.int64)
    next_emission += n_a
    a_set = _setting_choice(rng, n_a, alice.splitting)
    p = (rng.random(n_a) < 0.5).astype(np.int8)
    x = _path_outcomes(alice, a_set, p, rng)
    _emit_clicks(acc_a, alice, rng, t_a, ids_a, a_set, x, p)
    del t_a, ids_a, a_set, p, x

    # --- pairs with only Bob's photon detected ---------------------------
    t_b = _poisson_stream_ps(rng, rate * (1.0 - p_det_a) * p_det_b, duration_ps)
    n_b = t_b.shape[0]
    ids_b = np.arange(next_emission, next_emission + n_b, dtype=np.int64)
    next_emission += n_b
    b_set = _setting_choice(rng, n_b, bob.splitting)
    is_time = _mode_mask(bob, b_set, "time")
    keep = is_time | (rng.random(n_b) < 0.5)     # central-peak post-selection
    c = (rng.random(n_b) < 0.5).astype(np.int8)
    y = np.where(is_time, np.where(c == 0, 1, -1),
                 (rng.random(n_b) < 0.5).astype(np.int8) * 2 - 1).astype(np.int8)
    _emit_clicks(acc_b, bob, rng, t_b[keep], ids_b[keep], b_set[keep],
                 y[keep], c[keep])
    del t_b, ids_b, b_set, is_time, keep, c, y

    # --- dark counts ------------------------------------------------------
    duration_s_exact = duration_ps / PS_PER_SECOND
    for station, acc in ((alice, acc_a), (bob, acc_b)):
        dark = station.detector.dark_rate_hz
        if dark <= 0:
            continue
        for ch in station.channel_ids:
            n_dark = rng.poisson(dark * duration_s_exact)
            t_dark = rng.integers(0, duration_ps, size=n_dark, dtype=np.int64)
            acc.add(t_dark.astype(np.float64), np.full(n_dark, ch, np.uint8),
                    np.full(n_dark, -1, np.int64), np.full(n_dark, -1, np.int8),
                    np.zeros(n_dark, np.int8), np.full(n_dark, -1, np.int8))

    stream_a, em_a, set_a, out_a, bin_a = _finalize_party(
        acc_a, alice, "alice", duration_ps)
    stream_b, em_b, set_b, out_b, bin_b = _finalize_party(
        acc_b, bob, "bob", duration_ps)

    truth = GroundTruth(
        emission_count=next_emission,
        alice_emission=em_a, alice_setting=set_a, alice_outcome=out_a,
        alice_bin=bin_a,
        bob_emission=em_b, bob_setting=set_b, bob_outcome=out_b, bob_bin=bin_b,
    )
    return SessionResult(alice=stream_a, bob=stream_b, truth=truth)


def _mode_mask(station: Station, setting_idx: np.ndarray, mode: str) -> np.ndarray:
    flags = np.array([m == mode for m in station.modes])
    return flags[setting_idx]


def _pair_correlation_table(alice: Station, bob: Station, a_idx, b_idx,
                            phases) -> np.ndarray:
    """Quantum E per event for central pairs: cos(2a) against the time basis,
    sin(2a)cos(phase) against the interference basis."""
    nz = np.array([s.bloch[2] for s in alice.settings])
    nx = np.array([s.bloch[0] for s in alice.settings])
    is_time = _mode_mask(bob, b_idx, "time")
    return np.where(is_time, nz[a_idx], nx[a_idx] * np.cos(phases))


def _path_outcomes(station: Station, setting_idx, path, rng) -> np.ndarray:
    p_plus = _plus_probability_by_path(station)[setting_idx, path]
    return np.where(rng.random(setting_idx.shape[0]) < p_plus, 1, -1).astype(np.int8)


def _emit_clicks(acc: _PartyAccumulator, station: Station, rng,
                 t_emit, emission_ids, setting_idx, outcome, bins):
    """Turn sampled outcomes into detector clicks: port routing, bin offset,
    channel delay, jitter."""
    n = t_emit.shape[0]
    if n == 0:
        return
    ports = _ports_for(station, setting_idx, outcome)
    t = t_emit + station.channel.delay_ps + bins.astype(np.int64) * BIN_SEPARATION_PS
    sigma = station.detector.jitter_sigma_ps
    if sigma > 0:
        t = t + rng.normal(0.0, sigma, size=n)
    acc.add(t, ports, emission_ids, setting_idx, outcome, bins)


# ---------------------------------------------------------------------------
# tag-stream serialization
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(
    r"^#tagstream v1 party=(alice|bob) duration_ps=(\d+)\s*$")


def dump_tagstream(stream: TagStream, path_or_file) -> None:
    """Write the plain-text tag dump: a one-line header, then one
    ``channel<TAB>time_ps`` line per tag in stream order."""
    own = isinstance(path_or_file, (str, bytes))
    f = open(path_or_file, "w") if own else path_or_file
    try:
        f.write(f"#tagstream v1 party={stream.party} "
                f"duration_ps={stream.duration_ps}\n")
        out = np.empty((len(stream), 2), dtype=np.int64)
        out[:, 0] = stream.channels
        out[:, 1] = stream.times
        np.savetxt(f, out, fmt="%d", delimiter="\t")
    finally:
        if own:
            f.close()


def load_tagstream(path_or_file) -> TagStream:
    own = isinstance(path_or_file, (str, bytes))
    f = open(path_or_file, "r") if own else path_or_file
    try:
        header = f.readline()
        m = _HEADER_RE.match(header)
        if not m:
            raise ValueError(f"bad tag-stream header: {header!r}")
        party, duration = m.group(1), int(m.group(2))
        body = f.read()
    finally:
        if own:
            f.close()
    if body.strip():
        data = np.loadtxt(io.StringIO(body), dtype=np.int64, delimiter="\t",
                          ndmin=2)
    else:
        data = np.empty((0, 2), dtype=np.int64)
    if data.shape[1] != 2:
        raise ValueError("tag lines must be 'channel<TAB>time_ps'")
    if data.size and ((data[:, 0] < 0).any() or (data[:, 0] > 255).any()):
        raise ValueError("channel ids must be in [0, 255]")
    return TagStream(party=party, duration_ps=duration,
                     channels=data[:, 0].astype(np.uint8), times=data[:, 1])
