"""RFI segment tagging with look-forward, spectral margin, and Sun excision.

Pulses are tallied per 954 Hz segment in tumbling four-hour windows anchored
at MJD 0.  A segment whose tally reaches the concentration threshold is
tagged for its window and, with look-forward enabled, for the following
four hours as well.  Candidates within the margin of any active tag are
dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .config import InstrumentConfig
from .geometry import ra_distance_hr

SEGCOUNT_DTYPE = np.dtype([
    ("window", "i8"), ("window_start_mjd", "f8"), ("window_end_mjd", "f8"),
    ("segment", "i8"), ("count", "i8"),
])

TAG_DTYPE = np.dtype([
    ("segment", "i8"), ("window_start_mjd", "f8"), ("window_end_mjd", "f8"),
    ("trigger_count", "i8"),
])

SUNMASK_DTYPE = np.dtype([
    ("mjd_start", "f8"), ("mjd_end", "f8"),
    ("ra_lo", "f8"), ("ra_hi", "f8"), ("ra_lo_end", "f8"), ("ra_hi_end", "f8"),
])


def _window_edges(idx, window_hours):
    w = window_hours / 24.0
    return idx * w, (idx + 1) * w


def accumulate_segment_counts(pulses: np.ndarray, config: InstrumentConfig, window_hours: float | None = None) -> np.ndarray:
    """Single-pulse tallies per (four-hour window, segment).

    Returns one ``SEGCOUNT_DTYPE`` row per non-empty cell, ordered by window
    then segment.
    """
    hours = config.rfi_window_hours if window_hours is None else window_hours
    if pulses.size == 0:
        return np.empty(0, SEGCOUNT_DTYPE)
    widx = np.floor(pulses["mjd"] * 24.0 / hours).astype(np.int64)
    seg = pulses["segment"].astype(np.int64)
    key = np.stack([widx, seg], axis=1)
    cells, counts = np.unique(key, axis=0, return_counts=True)
    out = np.empty(cells.shape[0], SEGCOUNT_DTYPE)
    out["window"] = cells[:, 0]
    out["segment"] = cells[:, 1]
    out["window_start_mjd"], out["window_end_mjd"] = _window_edges(cells[:, 0], hours)
    out["count"] = counts
    return out


def tag_rfi_segments(counts: np.ndarray, threshold: int, look_forward: bool = True, window_hours: float = 4.0) -> np.ndarray:
    """Tag segments whose window tally reaches ``threshold``.

    The validity interval is the accumulation window, extended by
    ``window_hours`` past its end when ``look_forward`` is set.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    hot = counts[counts["count"] >= threshold]
    out = np.empty(hot.size, TAG_DTYPE)
    out["segment"] = hot["segment"]
    out["window_start_mjd"] = hot["window_start_mjd"]
    ext = window_hours / 24.0 if look_forward else 0.0
    out["window_end_mjd"] = hot["window_end_mjd"] + ext
    out["trigger_count"] = hot["count"]
    return out


def spectral_margin(candidates: np.ndarray, tags: np.ndarray) -> np.ndarray:
    """Segment distance from either pulse to the nearest tag active at the candidate MJD.

    ``+inf`` when no tag is active.
    """
    n = candidates.size
    margin = np.full(n, np.inf)
    if n == 0 or tags.size == 0:
        return margin
    mjd = candidates["mjd"]
    segs = np.stack([candidates["seg1"], candidates["seg2"]], axis=1)
    intervals, inv = np.unique(np.stack([tags["window_start_mjd"], tags["window_end_mjd"]], axis=1), axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    for j, (t0, t1) in enumerate(intervals):
        sel = np.flatnonzero((mjd >= t0) & (mjd < t1))
        if sel.size == 0:
            continue
        tseg = np.sort(tags["segment"][inv == j])
        s = segs[sel]
        pos = np.searchsorted(tseg, s)
        lo = tseg[np.clip(pos - 1, 0, tseg.size - 1)]
        hi = tseg[np.clip(pos, 0, tseg.size - 1)]
        d = np.minimum(np.abs(s - lo), np.abs(s - hi)).min(axis=1).astype(np.float64)
        margin[sel] = np.minimum(margin[sel], d)
    return margin


def margin_keep(margin, config: InstrumentConfig):
    """Keep only candidates strictly farther than the margin limit."""
    return np.asarray(margin) > config.rfi_margin_segments


def poisson_segment_rate(config: InstrumentConfig, window_hours: float | None = None) -> float:
    """Expected AWGN pulses per segment per accumulation window."""
    hours = config.rfi_window_hours if window_hours is None else window_hours
    windows = hours * 3600.0 / config.trigger_period_s * config.windows_per_trigger
    return windows * config.bins_per_segment * math.exp(-2.0 * config.snr_threshold_lin)


def calibrate_concentration_threshold(config: InstrumentConfig, target_fraction: float | None = None, rate: float | None = None) -> int:
    """Smallest tally whose Poisson exceedance under AWGN is at most ``target_fraction``."""
    q = config.rfi_target_tag_fraction if target_fraction is None else target_fraction
    lam = poisson_segment_rate(config) if rate is None else rate
    c = int(stats.poisson.isf(q, lam)) + 1
    while stats.poisson.sf(c - 1, lam) > q:
        c += 1
    while c > 1 and stats.poisson.sf(c - 2, lam) <= q:
        c -= 1
    return c


def concentration_threshold(config: InstrumentConfig) -> int:
    if config.rfi_concentration_threshold is not None:
        return int(config.rfi_concentration_threshold)
    return calibrate_concentration_threshold(config)


# --------------------------------------------------------------------------
# Sun


@dataclass
class ExcisionRegion:
    """Band of RA around a moving center, active after ``mjd_min``.

    ``table`` rows are ``(mjd, ra_hr)``; the center is linearly interpolated
    (through the 24 h wrap).
    """

    table: np.ndarray
    ra_halfwidth_hr: float = 1.0
    mjd_min: float = 60540.0
    kind: str = "sun"

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.table, dtype=np.float64))[:, :2]
        if t.shape[0] < 2 or np.any(np.diff(t[:, 0]) <= 0):
            raise ValueError("ephemeris needs two or more rows with increasing MJD")
        if self.ra_halfwidth_hr <= 0:
            raise ValueError("ra_halfwidth_hr must be positive")
        self.table = t
        self._ra_unwrapped = np.unwrap(t[:, 1] * (np.pi / 12.0)) * (12.0 / np.pi)

    def center_ra(self, mjd):
        m = np.asarray(mjd, dtype=np.float64)
        t = self.table[:, 0]
        if np.any((m < t[0]) | (m > t[-1])):
            raise ValueError("ephemeris does not cover the requested MJD")
        return np.mod(np.interp(m, t, self._ra_unwrapped), 24.0)

    def contains(self, mjd, ra_hr):
        """True where ``mjd > mjd_min`` and the beam is within the half-width."""
        scalar = np.ndim(mjd) == 0 and np.ndim(ra_hr) == 0
        m, ra = np.broadcast_arrays(np.atleast_1d(np.asarray(mjd, dtype=np.float64)), np.atleast_1d(np.asarray(ra_hr, dtype=np.float64)))
        out = np.zeros(m.shape, dtype=bool)
        active = m > self.mjd_min
        if active.any():
            out[active] = ra_distance_hr(ra[active], self.center_ra(m[active])) < self.ra_halfwidth_hr
        return bool(out[0]) if scalar else out

    def mask_rows(self) -> np.ndarray:
        """Region as (MJD, RA) parallelogram rows, one per ephemeris segment.

        RA edges run linearly from ``ra_lo``/``ra_hi`` at ``mjd_start`` to
        ``ra_lo_end``/``ra_hi_end`` at ``mjd_end``, unwrapped (reduce mod 24
        when plotting).  Only the part after ``mjd_min`` is emitted.
        """
        t = self.table[:, 0]
        ra = self._ra_unwrapped
        rows = []
        for i in range(t.size - 1):
            a, b = t[i], t[i + 1]
            if b <= self.mjd_min:
                continue
            a2 = max(a, self.mjd_min)
            ra_a = np.interp(a2, t, ra)
            ra_b = ra[i + 1]
            h = self.ra_halfwidth_hr
            rows.append((a2, b, ra_a - h, ra_a + h, ra_b - h, ra_b + h))
        return np.array(rows, dtype=SUNMASK_DTYPE)


def mask_rows_contain(rows: np.ndarray, mjd, ra_hr):
    """Evaluate exported mask rows at points (half-open in MJD at the start)."""
    m = np.atleast_1d(np.asarray(mjd, dtype=np.float64))
    ra = np.atleast_1d(np.asarray(ra_hr, dtype=np.float64))
    m, ra = np.broadcast_arrays(m, ra)
    out = np.zeros(m.shape, dtype=bool)
    for r in rows:
        sel = (m > r["mjd_start"]) & (m <= r["mjd_end"])
        if not sel.any():
            continue
        frac = (m[sel] - r["mjd_start"]) / (r["mjd_end"] - r["mjd_start"])
        lo = r["ra_lo"] + frac * (r["ra_lo_end"] - r["ra_lo"])
        hi = r["ra_hi"] + frac * (r["ra_hi_end"] - r["ra_hi"])
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        out[sel] |= ra_distance_hr(ra[sel], np.mod(center, 24.0)) < half
    return out


@dataclass
class SunMask:
    region: ExcisionRegion
    rows: np.ndarray


def excise_sun(candidates: np.ndarray, region: ExcisionRegion):
    """Drop candidates inside the Sun region; return ``(kept, SunMask)``."""
    inside = region.contains(candidates["mjd"], candidates["beam_ra_hr"]) if candidates.size else np.zeros(0, bool)
    return candidates[~inside], SunMask(region, region.mask_rows())


@dataclass
class ExcisionResult:
    """Excision outcome.

    Both cuts are evaluated on every input candidate, so ``n_rfi_removed``
    and ``n_sun_removed`` each count what that cut alone would drop;
    ``n_both`` counts candidates failing both.
    """

    candidates: np.ndarray
    tags: np.ndarray
    counts: np.ndarray
    threshold: int
    n_in: int
    n_rfi_removed: int
    n_sun_removed: int
    sun_mask: SunMask | None = None
    n_both: int = 0


def run_excision(pulses: np.ndarray, candidates: np.ndarray, config: InstrumentConfig, region: ExcisionRegion | None = None) -> ExcisionResult:
    """Tag segments, fill candidate margins, apply the margin and Sun cuts."""
    thr = concentration_threshold(config)
    counts = accumulate_segment_counts(pulses, config)
    tags = tag_rfi_segments(counts, thr, config.rfi_look_forward, config.rfi_window_hours)
    c = candidates.copy()
    c["rfi_margin"] = spectral_margin(c, tags)
    rfi_ok = margin_keep(c["rfi_margin"], config)
    sun_ok = np.ones(c.size, dtype=bool)
    mask = None
    if region is not None:
        if c.size:
            sun_ok = ~np.asarray(region.contains(c["mjd"], c["beam_ra_hr"]), dtype=bool)
        mask = SunMask(region, region.mask_rows())
    keep = rfi_ok & sun_ok
    return ExcisionResult(c[keep], tags, counts, thr, int(c.size), int((~rfi_ok).sum()), int((~sun_ok).sum()),
                          mask, int((~rfi_ok & ~sun_ok).sum()))
