"""Per-trigger detection and candidate formation.

Detections, candidates and per-window summaries are numpy structured arrays
(``PULSE_DTYPE``, ``CANDIDATE_DTYPE``, ``WINDOW_DTYPE``) so whole runs can be
filtered, sorted and written without per-record Python objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import InstrumentConfig
from .geometry import expected_ew_phase, wrap_phase
from .scenario import ElementSpectrum, TriggerFrame, WindowSpectra

LN10 = math.log(10.0)

PULSE_DTYPE = np.dtype([
    ("trigger", "i8"), ("window", "i8"), ("mjd", "f8"), ("beam_ra_hr", "f8"),
    ("freq_hz", "f8"), ("bin", "i8"),
    ("snr_db_east", "f8"), ("snr_db_west", "f8"),
    ("phase_east", "f8"), ("phase_west", "f8"),
    ("segment", "i8"), ("power954_east", "f8"), ("power954_west", "f8"),
])

WINDOW_DTYPE = np.dtype([
    ("trigger", "i8"), ("window", "i8"), ("mjd", "f8"), ("beam_ra_hr", "f8"),
    ("floor_east", "f8"), ("floor_west", "f8"),
    ("wide_east", "f8"), ("wide_west", "f8"),
    ("vis_re", "f8"), ("vis_im", "f8"), ("vis_db", "f8"), ("n_pulses", "i8"),
])

CANDIDATE_DTYPE = np.dtype([
    ("id", "i8"), ("trigger", "i8"), ("window", "i8"), ("mjd", "f8"), ("beam_ra_hr", "f8"),
    ("f1_hz", "f8"), ("f2_hz", "f8"), ("delta_f_hz", "f8"),
    ("snr_e1", "f8"), ("snr_w1", "f8"), ("snr_e2", "f8"), ("snr_w2", "f8"),
    ("phi_e1", "f8"), ("phi_w1", "f8"), ("phi_e2", "f8"), ("phi_w2", "f8"),
    ("seg1", "i8"), ("seg2", "i8"),
    ("d_ew1", "f8"), ("d_ew2", "f8"), ("d_ddf", "f8"),
    ("east_power_954", "f8"), ("west_power_954", "f8"),
    ("east_power_wide", "f8"), ("west_power_wide", "f8"),
    ("vis_db", "f8"), ("log10_df_like", "f8"),
    ("log10_snr_pulse1", "f8"), ("log10_snr_pulse2", "f8"), ("log10_snr_pair", "f8"),
    ("rfi_margin", "f8"), ("rf_low_hz", "f8"),
])

# candidate id layout: trigger << 20 | window << 19 | pair index
ID_WINDOW_SHIFT = 19
ID_TRIGGER_SHIFT = 20
MAX_PAIRS_PER_WINDOW = 1 << ID_WINDOW_SHIFT


def candidate_id(trigger, window, pair_idx):
    return (np.asarray(trigger, np.int64) << ID_TRIGGER_SHIFT) | (np.asarray(window, np.int64) << ID_WINDOW_SHIFT) | np.asarray(pair_idx, np.int64)


# --------------------------------------------------------------------------
# channelizer and noise floor


def channelize(timeseries, sample_rate: float, bin_hz: float, integration_s: float | None = None):
    """DFT of one integration.

    The transform is unnormalized (``numpy.fft.fft``), so a real tone
    ``a cos(2 pi f_k t)`` centered on bin ``k`` gives ``|X_k|^2 = N^2 a^2 / 4``
    and a complex tone ``a exp(i 2 pi f_k t)`` gives ``N^2 a^2``.  Bin ``k``
    is centered on ``k * sample_rate / N``.

    Parameters
    ----------
    timeseries : array_like
        Samples of one integration.
    sample_rate : float
        Samples per second.
    bin_hz : float
        Requested bin width; ``sample_rate / bin_hz`` must be an integer
        sample count.
    integration_s : float, optional
        If given, the expected length is ``sample_rate * integration_s``.
    """
    x = np.asarray(timeseries)
    span = integration_s if integration_s is not None else 1.0 / bin_hz
    n = int(round(sample_rate * span))
    if x.ndim != 1 or x.size != n:
        raise ValueError(f"expected {n} samples, got {x.size}")
    if abs(sample_rate / x.size - bin_hz) > 0.01 * bin_hz:
        raise ValueError("sample count does not give the requested bin width")
    return np.fft.fft(x)


def estimate_noise_floor(power, bins, config: InstrumentConfig, segment_hz: float | None = None, min_bins: int = 16, strict: bool = True):
    """Per-segment noise power: median bin power divided by ln 2.

    For exponentially distributed bin power the median is ``mean * ln 2``, so
    the estimate is unbiased for pure noise and barely moves when a few bins
    carry signal.  A constant input ``p`` returns ``p / ln 2``.

    Returns
    -------
    seg_ids : ndarray of int
        Segment indices ``floor(f / segment_hz)`` present in the input.
    floor : ndarray of float
        Noise power estimate per segment.  With ``strict=False`` segments
        holding fewer than ``min_bins`` bins take the value of the nearest
        adequately filled segment instead of raising.
    """
    seg_hz = segment_hz or config.rfi_segment_hz
    p = np.asarray(power, dtype=np.float64)
    b = np.asarray(bins)
    if p.size < min_bins:
        raise ValueError(f"need at least {min_bins} bins, got {p.size}")
    seg = np.floor(b * config.fft_bin_hz / seg_hz).astype(np.int64)
    order = np.argsort(seg, kind="stable")
    seg_s, p_s = seg[order], p[order]
    ids, starts, counts = np.unique(seg_s, return_index=True, return_counts=True)
    floor = np.array([np.median(p_s[s:s + c]) for s, c in zip(starts, counts)]) / math.log(2.0)
    small = counts < min_bins
    if small.any():
        if strict:
            raise ValueError(f"segment {ids[small][0]} holds fewer than {min_bins} bins")
        good = np.flatnonzero(~small)
        if good.size == 0:
            floor[:] = np.median(p) / math.log(2.0)
        else:
            for i in np.flatnonzero(small):
                floor[i] = floor[good[np.argmin(np.abs(good - i))]]
    return ids, floor


# --------------------------------------------------------------------------
# detection and pairing


def _window_floors(win: WindowSpectra, config: InstrumentConfig):
    """Per-bin noise floors for both elements."""
    if win.east.floor is not None:
        n = win.bins.size
        return np.full(n, win.east.floor), np.full(n, win.west.floor)
    out = []
    for el in (win.east, win.west):
        ids, fl = estimate_noise_floor(np.abs(el.values) ** 2, win.bins, config, strict=False)
        seg = np.floor(win.bins * config.fft_bin_hz / config.rfi_segment_hz).astype(np.int64)
        out.append(fl[np.searchsorted(ids, seg)])
    return out[0], out[1]


def _seg_lookup(el: ElementSpectrum, seg):
    pos = np.searchsorted(el.seg_ids, seg)
    pos = np.clip(pos, 0, max(el.seg_ids.size - 1, 0))
    if el.seg_ids.size == 0:
        return np.full(np.shape(seg), np.nan)
    return np.where(el.seg_ids[pos] == seg, el.seg_power[pos], np.nan)


def detect_pulses(frame, config: InstrumentConfig) -> np.ndarray:
    """Bins at or above the SNR threshold on both elements.

    ``frame`` is a :class:`WindowSpectra` or a :class:`TriggerFrame` (all
    windows).  SNR is bin power over the per-segment noise floor.
    """
    windows = frame.windows if isinstance(frame, TriggerFrame) else [frame]
    parts = [_detect_window(w, config) for w in windows]
    return np.concatenate(parts) if parts else np.empty(0, PULSE_DTYPE)


def _detect_window(win: WindowSpectra, config: InstrumentConfig) -> np.ndarray:
    fe, fw = _window_floors(win, config)
    se = np.abs(win.east.values) ** 2 / fe
    sw = np.abs(win.west.values) ** 2 / fw
    theta = config.snr_threshold_lin
    hit = (se >= theta) & (sw >= theta)
    idx = np.flatnonzero(hit)
    out = np.empty(idx.size, PULSE_DTYPE)
    out["trigger"] = win.frame
    out["window"] = win.window_index
    out["mjd"] = win.mjd
    out["beam_ra_hr"] = win.beam_ra_hr
    b = win.bins[idx]
    out["bin"] = b
    out["freq_hz"] = b * config.fft_bin_hz
    out["snr_db_east"] = 10.0 * np.log10(se[idx])
    out["snr_db_west"] = 10.0 * np.log10(sw[idx])
    out["phase_east"] = np.angle(win.east.values[idx])
    out["phase_west"] = np.angle(win.west.values[idx])
    seg = np.floor(out["freq_hz"] / config.rfi_segment_hz).astype(np.int64)
    out["segment"] = seg
    out["power954_east"] = _seg_lookup(win.east, seg)
    out["power954_west"] = _seg_lookup(win.west, seg)
    return out


def pair_indices(pulses: np.ndarray, config: InstrumentConfig):
    """Index pairs ``(i, j)`` of pulses sharing a window with spacing in range.

    Pulses must be grouped by (trigger, window) and frequency-sorted within
    each group; ``i`` is always the lower-frequency pulse.
    """
    n = pulses.size
    if n < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    key = pulses["trigger"] * 8 + pulses["window"]
    brk = np.flatnonzero(np.diff(key) != 0) + 1
    starts = np.concatenate([[0], brk])
    sizes = np.diff(np.concatenate([starts, [n]]))
    grp_start = np.repeat(starts, sizes)
    grp_end = grp_start + np.repeat(sizes, sizes)
    partners = grp_end - np.arange(n) - 1  # later pulses in the same window
    ii = np.repeat(np.arange(n), partners)
    offs = np.arange(ii.size) - np.repeat(np.cumsum(partners) - partners, partners)
    jj = ii + 1 + offs
    df = pulses["freq_hz"][jj] - pulses["freq_hz"][ii]
    lo, hi = config.delta_f_range_hz
    ok = (df >= lo) & (df <= hi)
    return ii[ok], jj[ok]


def _sorted_pulses(pulses):
    return pulses[np.lexsort((pulses["freq_hz"], pulses["window"], pulses["trigger"]))]


def form_pairs(pulses: np.ndarray, config: InstrumentConfig) -> np.ndarray:
    """All Δt=0 pulse pairs with Δf inside the configured range.

    Phase residuals in the returned records are evaluated against the beam
    center (hour angle 0); the RA-bin hypotheses are applied in second level.
    """
    p = _sorted_pulses(pulses)
    i, j = pair_indices(p, config)
    out = np.zeros(i.size, CANDIDATE_DTYPE)
    a, b = p[i], p[j]
    out["trigger"] = a["trigger"]
    out["window"] = a["window"]
    out["mjd"] = a["mjd"]
    out["beam_ra_hr"] = a["beam_ra_hr"]
    out["f1_hz"], out["f2_hz"] = a["freq_hz"], b["freq_hz"]
    out["delta_f_hz"] = b["freq_hz"] - a["freq_hz"]
    out["rf_low_hz"] = a["freq_hz"]
    out["snr_e1"], out["snr_w1"] = a["snr_db_east"], a["snr_db_west"]
    out["snr_e2"], out["snr_w2"] = b["snr_db_east"], b["snr_db_west"]
    out["phi_e1"], out["phi_w1"] = a["phase_east"], a["phase_west"]
    out["phi_e2"], out["phi_w2"] = b["phase_east"], b["phase_west"]
    out["seg1"], out["seg2"] = a["segment"], b["segment"]
    out["east_power_954"] = 0.5 * (a["power954_east"] + b["power954_east"])
    out["west_power_954"] = 0.5 * (a["power954_west"] + b["power954_west"])
    # pair index within each window
    key = out["trigger"] * 8 + out["window"]
    if out.size:
        brk = np.concatenate([[0], np.flatnonzero(np.diff(key) != 0) + 1])
        sizes = np.diff(np.concatenate([brk, [out.size]]))
        local = np.arange(out.size) - np.repeat(brk, sizes)
        if local.max() >= MAX_PAIRS_PER_WINDOW:
            raise OverflowError("too many pairs in one window for the id layout")
        out["id"] = candidate_id(out["trigger"], out["window"], local)
    h0 = np.zeros(out.size)
    d1, d2, dd = pair_phase_residuals(out, h0, config)
    out["d_ew1"], out["d_ew2"], out["d_ddf"] = d1, d2, dd
    out["rfi_margin"] = np.inf
    return out


def pair_phase_residuals(cands, hour_angle, config: InstrumentConfig, tau_inst_s=None, phi_east=None):
    """Per-pulse residuals and their difference for a hour-angle hypothesis.

    ``phi_east`` optionally replaces the stored east phases as a ``(n, 2)``
    array (phase-noise diagnostics).
    """
    pe1 = cands["phi_e1"] if phi_east is None else phi_east[:, 0]
    pe2 = cands["phi_e2"] if phi_east is None else phi_east[:, 1]
    d1 = wrap_phase(pe1 - cands["phi_w1"] - expected_ew_phase(cands["f1_hz"], hour_angle, config, tau_inst_s=tau_inst_s))
    d2 = wrap_phase(pe2 - cands["phi_w2"] - expected_ew_phase(cands["f2_hz"], hour_angle, config, tau_inst_s=tau_inst_s))
    return d1, d2, wrap_phase(d2 - d1)


# --------------------------------------------------------------------------
# likelihoods


def pulse_snr_log_likelihood(snr_east_lin, snr_west_lin, config: InstrumentConfig):
    """log10 of the exponential tail probability in excess of the threshold.

    ``log10[P(s >= s_e) P(s >= s_w) / P(s >= theta)^2] = -(s_e + s_w - 2 theta) / ln 10``
    for unit-mean exponential SNR.
    """
    theta = config.snr_threshold_lin
    se = np.asarray(snr_east_lin, dtype=np.float64)
    sw = np.asarray(snr_west_lin, dtype=np.float64)
    tol = theta * 1e-9
    if np.any(se < theta - tol) or np.any(sw < theta - tol):
        raise ValueError("SNR below the detection threshold")
    return -(se + sw - 2.0 * theta) / LN10


def snr_log_likelihoods(pair, config: InstrumentConfig):
    """Return ``(pulse1, pulse2, pair)`` log10 likelihoods for candidate record(s)."""
    lin = lambda db: 10.0 ** (np.asarray(db, dtype=np.float64) / 10.0)
    p1 = pulse_snr_log_likelihood(lin(pair["snr_e1"]), lin(pair["snr_w1"]), config)
    p2 = pulse_snr_log_likelihood(lin(pair["snr_e2"]), lin(pair["snr_w2"]), config)
    return p1, p2, p1 + p2


def snr_likelihood_mask(p1, p2, pair, config: InstrumentConfig):
    thr_p = config.log10_pulse_snr_like_threshold
    return (p1 >= thr_p) & (p2 >= thr_p) & (pair >= config.log10_pair_snr_like_threshold)


def delta_f_log_likelihood(delta_f_hz, pulse_rate_per_hz):
    """log10 probability that a Poisson pulse lands within ±Δf of another.

    Returns ``-inf`` when the rate or the spacing is zero.
    """
    df = np.asarray(delta_f_hz, dtype=np.float64)
    rate = np.asarray(pulse_rate_per_hz, dtype=np.float64)
    if np.any(df < 0) or np.any(rate < 0):
        raise ValueError("spacing and rate must be non-negative")
    with np.errstate(divide="ignore"):
        out = np.log10(-np.expm1(-2.0 * rate * df))
    return float(out) if out.ndim == 0 else out


def awgn_pulse_rate_per_hz(config: InstrumentConfig) -> float:
    """Dual-element threshold crossings per Hz of band under pure noise."""
    return math.exp(-2.0 * config.snr_threshold_lin) / config.fft_bin_hz


# --------------------------------------------------------------------------
# visibility


def band_phase_sum(config: InstrumentConfig, delay_s: float) -> complex:
    """``sum_k exp(i 2 pi f_k delay)`` over all band bins, closed form."""
    df = config.fft_bin_hz
    x = 2.0 * np.pi * df * delay_s
    total = 0j
    for first, last in config.band_bin_ranges:
        n = int(last - first + 1)
        if abs(math.sin(x / 2)) < 1e-15:
            s = complex(n) * np.exp(1j * x * (n - 1) / 2)
        else:
            s = np.exp(1j * x * (n - 1) / 2) * math.sin(n * x / 2) / math.sin(x / 2)
        total += np.exp(2j * np.pi * first * df * delay_s) * s
    return complex(total)


def fx_visibility(east: ElementSpectrum, west: ElementSpectrum, tau_int: float, config: InstrumentConfig) -> complex:
    """Cross-correlate two element spectra after a delay compensation ``tau_int``.

    ``V = sum_k X(f_k) conj(Y(f_k)) exp(-i 2 pi f_k tau_int)`` over the
    materialized bins plus the aggregate contribution of bins that were not
    materialized.  Swapping the elements and negating ``tau_int`` conjugates
    the result exactly.
    """
    if east.bins is not west.bins and not np.array_equal(east.bins, west.bins):
        raise ValueError("element spectra cover different bins")
    f = east.bins * config.fft_bin_hz
    v = complex(np.sum(east.values * np.conj(west.values) * np.exp(-2j * np.pi * f * tau_int)))
    v += east.vis_noise
    for p, d in east.cross_terms:
        v += p * band_phase_sum(config, d - tau_int)
    return v


def visibility_db(v):
    """``10 log10 |V|`` with 0 dB_rel at ``|V| = 1``."""
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.abs(v))


def measure_associated(pair, window: WindowSpectra, config: InstrumentConfig, pulse_rate_per_hz: float | None = None) -> dict:
    """Associated measurements for one candidate from its window."""
    rate = awgn_pulse_rate_per_hz(config) if pulse_rate_per_hz is None else pulse_rate_per_hz
    v = fx_visibility(window.east, window.west, -config.tau_inst_s, config)
    seg = np.array([pair["seg1"], pair["seg2"]])
    p1, p2, pp = snr_log_likelihoods(pair, config)
    return {
        "east_power_954": float(np.mean(_seg_lookup(window.east, seg))),
        "west_power_954": float(np.mean(_seg_lookup(window.west, seg))),
        "east_power_wide": float(window.east.wide_power),
        "west_power_wide": float(window.west.wide_power),
        "vis_db": float(visibility_db(v)),
        "log10_df_like": float(delta_f_log_likelihood(pair["delta_f_hz"], rate)),
        "log10_snr_pulse1": float(p1),
        "log10_snr_pulse2": float(p2),
        "log10_snr_pair": float(pp),
        "rfi_margin": float(pair["rfi_margin"]),
        "rf_low_hz": float(min(pair["f1_hz"], pair["f2_hz"])),
        "mjd": float(pair["mjd"]),
    }


# --------------------------------------------------------------------------
# batch processing


@dataclass
class FirstLevelResult:
    pulses: np.ndarray
    candidates: np.ndarray
    windows: np.ndarray
    n_pairs_formed: int = 0

    @staticmethod
    def concat(parts: Sequence["FirstLevelResult"]) -> "FirstLevelResult":
        if not parts:
            return FirstLevelResult(np.empty(0, PULSE_DTYPE), np.empty(0, CANDIDATE_DTYPE), np.empty(0, WINDOW_DTYPE))
        return FirstLevelResult(
            np.concatenate([p.pulses for p in parts]),
            np.concatenate([p.candidates for p in parts]),
            np.concatenate([p.windows for p in parts]),
            sum(p.n_pairs_formed for p in parts),
        )


def process_windows(windows: Iterable[WindowSpectra], config: InstrumentConfig, tau_int: float | None = None, batch: int = 16384) -> FirstLevelResult:
    """Run detection, pairing, likelihood cuts and associated measurements.

    Windows are packed into batches so thresholding, segment lookups and
    the visibility sums run as a handful of array operations per batch.
    """
    tau = -config.tau_inst_s if tau_int is None else tau_int
    pulses, wins = [], []
    buf = []
    for w in windows:
        buf.append(w)
        if len(buf) >= batch:
            p, wr = _detect_batch(buf, config, tau)
            pulses.append(p)
            wins.append(wr)
            buf = []
    if buf or not wins:
        p, wr = _detect_batch(buf, config, tau)
        pulses.append(p)
        wins.append(wr)
    return finish_first_level(np.concatenate(pulses), np.concatenate(wins), config)


def _detect_batch(buf: list, config: InstrumentConfig, tau: float):
    nw = len(buf)
    wins = np.empty(nw, WINDOW_DTYPE)
    if nw == 0:
        return np.empty(0, PULSE_DTYPE), wins
    sizes = np.fromiter((w.east.bins.size for w in buf), np.int64, nw)
    row = np.repeat(np.arange(nw), sizes)
    bins = np.concatenate([w.east.bins for w in buf]).astype(np.int64, copy=False)
    e = np.concatenate([w.east.values for w in buf])
    w_ = np.concatenate([w.west.values for w in buf])
    fl_e = np.empty(bins.size)
    fl_w = np.empty(bins.size)
    floor_e = np.full(nw, np.nan)
    floor_w = np.full(nw, np.nan)
    offs = np.concatenate([[0], np.cumsum(sizes)])
    for i, w in enumerate(buf):
        if w.east.floor is not None:
            floor_e[i] = w.east.floor
            floor_w[i] = w.west.floor
        else:
            a, b = _window_floors(w, config)
            fl_e[offs[i]:offs[i + 1]] = a
            fl_w[offs[i]:offs[i + 1]] = b
    known = np.isfinite(floor_e)
    sel = known[row]
    fl_e[sel] = floor_e[row[sel]]
    fl_w[sel] = floor_w[row[sel]]
    pe = e.real ** 2 + e.imag ** 2
    pw = w_.real ** 2 + w_.imag ** 2
    se = pe / fl_e
    sw = pw / fl_w
    theta = config.snr_threshold_lin
    idx = np.flatnonzero((se >= theta) & (sw >= theta))

    frame = np.fromiter((w.frame for w in buf), np.int64, nw)
    widx = np.fromiter((w.window_index for w in buf), np.int64, nw)
    mjd = np.fromiter((w.mjd for w in buf), np.float64, nw)
    ra = np.fromiter((w.beam_ra_hr for w in buf), np.float64, nw)

    out = np.empty(idx.size, PULSE_DTYPE)
    r = row[idx]
    out["trigger"] = frame[r]
    out["window"] = widx[r]
    out["mjd"] = mjd[r]
    out["beam_ra_hr"] = ra[r]
    out["bin"] = bins[idx]
    out["freq_hz"] = bins[idx] * config.fft_bin_hz
    out["snr_db_east"] = 10.0 * np.log10(se[idx])
    out["snr_db_west"] = 10.0 * np.log10(sw[idx])
    out["phase_east"] = np.angle(e[idx])
    out["phase_west"] = np.angle(w_[idx])
    seg = np.floor(out["freq_hz"] / config.rfi_segment_hz).astype(np.int64)
    out["segment"] = seg
    # segment powers: key windows and segments into one sorted table
    ssz = np.fromiter((w.east.seg_ids.size for w in buf), np.int64, nw)
    if ssz.sum():
        srow = np.repeat(np.arange(nw), ssz)
        skey = (srow << 32) | np.concatenate([w.east.seg_ids for w in buf]).astype(np.int64)
        spe = np.concatenate([w.east.seg_power for w in buf])
        spw = np.concatenate([w.west.seg_power for w in buf])
        q = (r << 32) | seg
        pos = np.clip(np.searchsorted(skey, q), 0, skey.size - 1)
        hit = skey[pos] == q
        out["power954_east"] = np.where(hit, spe[pos], np.nan)
        out["power954_west"] = np.where(hit, spw[pos], np.nan)
    else:
        out["power954_east"] = np.nan
        out["power954_west"] = np.nan

    # visibility
    f = bins * config.fft_bin_hz
    prod = e * np.conj(w_) * np.exp(-2j * np.pi * f * tau)
    v = np.bincount(row, weights=prod.real, minlength=nw) + 1j * np.bincount(row, weights=prod.imag, minlength=nw)
    v += np.fromiter((w.east.vis_noise for w in buf), np.complex128, nw)
    for i, w in enumerate(buf):
        for pwr, d in w.east.cross_terms:
            v[i] += pwr * band_phase_sum(config, d - tau)

    wins["trigger"] = frame
    wins["window"] = widx
    wins["mjd"] = mjd
    wins["beam_ra_hr"] = ra
    wins["floor_east"] = floor_e
    wins["floor_west"] = floor_w
    wins["wide_east"] = np.fromiter((w.east.wide_power for w in buf), np.float64, nw)
    wins["wide_west"] = np.fromiter((w.west.wide_power for w in buf), np.float64, nw)
    wins["vis_re"] = v.real
    wins["vis_im"] = v.imag
    wins["vis_db"] = visibility_db(v)
    wins["n_pulses"] = np.bincount(r, minlength=nw)
    return out, wins


def finish_first_level(pulses: np.ndarray, wins: np.ndarray, config: InstrumentConfig) -> FirstLevelResult:
    """Pair pulses and attach window-level measurements.

    Only pulses whose own SNR log-likelihood clears the per-pulse limit can
    appear in a kept pair, so pairs are formed from those alone
    (``n_pairs_formed`` counts pairs among them).  All pulses are returned
    for segment tallies.
    """
    pulses = _sorted_pulses(pulses)
    lin = lambda db: 10.0 ** (db / 10.0)
    eligible = pulse_snr_log_likelihood(lin(pulses["snr_db_east"]), lin(pulses["snr_db_west"]), config) >= config.log10_pulse_snr_like_threshold
    cands = form_pairs(pulses[eligible], config)
    n_formed = cands.size
    if cands.size:
        p1, p2, pp = snr_log_likelihoods(cands, config)
        cands["log10_snr_pulse1"], cands["log10_snr_pulse2"], cands["log10_snr_pair"] = p1, p2, pp
        cands = cands[snr_likelihood_mask(p1, p2, pp, config)]
    if cands.size:
        cands["log10_df_like"] = delta_f_log_likelihood(cands["delta_f_hz"], awgn_pulse_rate_per_hz(config))
        wkey = wins["trigger"] * 8 + wins["window"]
        order = np.argsort(wkey, kind="stable")
        pos = order[np.searchsorted(wkey, cands["trigger"] * 8 + cands["window"], sorter=order)]
        cands["east_power_wide"] = wins["wide_east"][pos]
        cands["west_power_wide"] = wins["wide_west"][pos]
        cands["vis_db"] = wins["vis_db"][pos]
    return FirstLevelResult(pulses, cands, wins, n_formed)


def process_frames(frames: Iterable[TriggerFrame], config: InstrumentConfig, tau_int: float | None = None) -> FirstLevelResult:
    return process_windows((w for fr in frames for w in fr.windows), config, tau_int)


def validate_candidates(cands: np.ndarray, config: InstrumentConfig) -> None:
    """Raise ``AssertionError`` when any record breaks a candidate invariant."""
    lo, hi = config.delta_f_range_hz
    assert np.all((cands["delta_f_hz"] >= lo) & (cands["delta_f_hz"] <= hi)), "delta_f out of range"
    for col in ("f1_hz", "f2_hz"):
        ok = np.zeros(cands.size, bool)
        for a, b in config.rf_ranges_hz:
            ok |= (cands[col] >= a) & (cands[col] <= b)
        assert ok.all(), f"{col} outside RF ranges"
    for col in ("d_ew1", "d_ew2", "d_ddf"):
        assert np.all((cands[col] > -np.pi) & (cands[col] <= np.pi)), f"{col} not wrapped"
    thr = config.snr_threshold_db - 1e-9
    for col in ("snr_e1", "snr_w1", "snr_e2", "snr_w2"):
        assert np.all(cands[col] >= thr), f"{col} below threshold"
    for col in CANDIDATE_DTYPE.names:
        if col == "rfi_margin":
            assert np.all(cands[col] >= 0), "negative margin"
        elif cands.dtype[col].kind == "f":
            assert np.all(np.isfinite(cands[col])), f"{col} not finite"
