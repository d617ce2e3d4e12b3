"""FFT-bin level synthesis of two-element drift-scan runs.

The band holds millions of 3.7 Hz bins, yet first-level processing only ever
looks at bins that clear the SNR threshold on both elements.  By default a
window therefore materializes just

* bins carrying injected signal (source tones, RFI bursts), with full noise;
* AWGN bins that exceed ``threshold - 0.5 dB`` on both elements, drawn
  exactly from the conditional distribution (exponential memorylessness);

and carries the rest of the band as aggregate statistics: a per-segment
power, a wideband power and a visibility noise term.  ``dense=True`` draws
every bin instead, which is what the channelizer and noise-floor checks use
on narrow test bands.

Random streams are seeded per ``(seed, frame, window)`` so any subset of
frames can be regenerated in isolation, in any order, by any worker.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import SIDEREAL_RATE, InstrumentConfig, config_from_mapping
from .geometry import (
    angular_offset_deg,
    beam_ra_at,
    expected_ew_phase,
    geometric_delay,
    hour_angle_rad,
    quantize_mjd,
    ra_distance_hr,
    wrap_phase,
)

SCENARIO_SCHEMA = "pulsepair.scenario/1"
SECONDS_PER_DAY = 86400.0
WIDEBAND_HZ = 50.0e6
MATERIALIZE_MARGIN_DB = 0.5


def beam_gain(offset_deg, fwhm_deg):
    """Gaussian power pattern ``exp(-4 ln2 (offset/fwhm)^2)``."""
    if fwhm_deg <= 0:
        raise ValueError("fwhm_deg must be positive")
    x = np.asarray(offset_deg, dtype=np.float64) / fwhm_deg
    g = np.exp(-4.0 * math.log(2.0) * x * x)
    return float(g) if g.ndim == 0 else g


# --------------------------------------------------------------------------
# scenario description


@dataclass
class SourceSpec:
    """A transmitter emitting simultaneous two-tone pulses.

    ``amplitude_model`` is ``"rayleigh"`` (tone power exponentially
    distributed with mean set by ``snr_db_at_transit`` and the beam gain,
    drawn independently for every tone in every window) or ``"fixed"``.
    """

    ra_hr: float
    dec_deg: float
    tone_pairs: list
    snr_db_at_transit: float = 15.0
    emission_probability_per_window: float = 1.0
    phase_coherent: bool = True
    amplitude_model: str = "rayleigh"
    name: str = "source"

    def __post_init__(self):
        self.tone_pairs = [tuple(float(f) for f in p) for p in self.tone_pairs]
        if not 0.0 <= self.emission_probability_per_window <= 1.0:
            raise ValueError("emission_probability_per_window must lie in [0, 1]")
        if self.amplitude_model not in ("rayleigh", "fixed"):
            raise ValueError("amplitude_model must be 'rayleigh' or 'fixed'")
        if not 0.0 <= self.ra_hr < 24.0:
            raise ValueError("ra_hr must lie in [0, 24)")


@dataclass
class RfiSpec:
    """Bursty terrestrial emitter occupying part of one band region.

    Each burst lights ``occupancy`` of the bins in its bandwidth with
    Rayleigh-faded power.  ``element_coupling`` scales the burst power seen by
    (east, west); ``correlated`` makes both elements see one common amplitude.
    """

    segment_center_hz: float
    bandwidth_hz: float
    burst_rate_per_hour: float
    burst_snr_db: float
    element_coupling: tuple = (1.0, 1.0)
    correlated: bool = True
    occupancy: float = 0.05
    duration_s: float = 0.0
    mjd_range: tuple | None = None
    name: str = "rfi"

    def __post_init__(self):
        self.element_coupling = tuple(float(c) for c in self.element_coupling)
        if len(self.element_coupling) != 2 or not all(0.0 <= c <= 1.0 for c in self.element_coupling):
            raise ValueError("element_coupling must be two values in [0, 1]")
        if self.mjd_range is not None:
            self.mjd_range = tuple(float(v) for v in self.mjd_range)
        if not 0.0 < self.occupancy <= 1.0:
            raise ValueError("occupancy must lie in (0, 1]")


@dataclass
class SunSpec:
    """Broadband solar noise; ``ra_hr_by_mjd`` rows are ``(mjd, ra_hr[, dec_deg])``."""

    ra_hr_by_mjd: np.ndarray
    broadband_power_rise_db: float = 10.0
    sidelobe_extent_hr: float = 1.0
    sidelobe_level_db: float = -20.0
    coherence: float = 0.5

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.ra_hr_by_mjd, dtype=np.float64))
        if t.shape[1] not in (2, 3) or t.shape[0] < 2:
            raise ValueError("sun table needs at least two rows of (mjd, ra_hr[, dec_deg])")
        if np.any(np.diff(t[:, 0]) <= 0):
            raise ValueError("sun table MJDs must be strictly increasing")
        self.ra_hr_by_mjd = t
        # unwrapped RA so interpolation across 24h -> 0h is linear
        self._ra_unwrapped = np.unwrap(t[:, 1] * (np.pi / 12.0)) * (12.0 / np.pi)

    def covers(self, mjd_lo, mjd_hi) -> bool:
        t = self.ra_hr_by_mjd[:, 0]
        return t[0] <= mjd_lo and mjd_hi <= t[-1]

    def ra_at(self, mjd):
        t = self.ra_hr_by_mjd[:, 0]
        m = np.asarray(mjd, dtype=np.float64)
        if np.any((m < t[0]) | (m > t[-1])):
            raise ValueError("sun table does not cover the requested MJD")
        return np.mod(np.interp(m, t, self._ra_unwrapped), 24.0)

    def dec_at(self, mjd, default):
        if self.ra_hr_by_mjd.shape[1] < 3:
            return default
        return np.interp(mjd, self.ra_hr_by_mjd[:, 0], self.ra_hr_by_mjd[:, 2])


@dataclass
class BroadbandSpec:
    """Correlated wideband noise switched on for an MJD interval.

    ``coherence`` is the correlated fraction of the injected power and
    ``delay_s`` the east-minus-west delay of that correlated part.
    """

    mjd_start: float
    mjd_end: float
    power_db: float
    coherence: float = 1.0
    delay_s: float = 0.0


@dataclass
class Scenario:
    config: InstrumentConfig
    mjd_ranges: list
    seed: int = 1
    sources: list = field(default_factory=list)
    rfi: list = field(default_factory=list)
    sun: SunSpec | None = None
    broadband: list = field(default_factory=list)
    noise_power: float = 1.0
    dense: bool = False
    name: str = "scenario"
    _model: object = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.mjd_ranges = [tuple(float(v) for v in r) for r in self.mjd_ranges]
        if not self.mjd_ranges:
            raise ValueError("mjd_ranges is empty")
        prev = -math.inf
        for lo, hi in self.mjd_ranges:
            if not lo < hi or lo < prev:
                raise ValueError("mjd_ranges must be non-empty, disjoint and ascending")
            prev = hi
        if self.noise_power <= 0:
            raise ValueError("noise_power must be positive")
        cfg = self.config
        for s in self.sources:
            for f1, f2 in s.tone_pairs:
                df = abs(f2 - f1)
                lo, hi = cfg.delta_f_range_hz
                if not lo <= df <= hi:
                    raise ValueError(f"{s.name}: tone spacing {df} Hz outside the pair range")
                for f in (f1, f2):
                    if not any(a <= f <= b for a, b in cfg.rf_ranges_hz):
                        raise ValueError(f"{s.name}: tone {f} Hz outside the RF ranges")
        for r in self.rfi:
            if r.bandwidth_hz < cfg.fft_bin_hz:
                raise ValueError(f"{r.name}: bandwidth below one FFT bin")
        if self.sun is not None and not self.sun.covers(self.mjd_ranges[0][0], self.mjd_ranges[-1][1]):
            raise ValueError("sun table does not cover the run")

    # -- frame bookkeeping

    def frame_counts(self) -> np.ndarray:
        p = self.config.trigger_period_s
        return np.array(
            [math.floor(round((hi - lo) * SECONDS_PER_DAY, 6) / p) for lo, hi in self.mjd_ranges],
            dtype=np.int64,
        )

    @property
    def n_frames(self) -> int:
        return int(self.frame_counts().sum())

    def frame_mjd(self, frame):
        """Quantized MJD of global trigger index ``frame`` (vectorized)."""
        fr = np.asarray(frame, dtype=np.int64)
        counts = self.frame_counts()
        starts = np.concatenate([[0], np.cumsum(counts)])
        if np.any((fr < 0) | (fr >= starts[-1])):
            raise IndexError("frame index out of range")
        r = np.searchsorted(starts, fr, side="right") - 1
        lo = np.array([a for a, _ in self.mjd_ranges])[r]
        t = lo + (fr - starts[r]) * self.config.trigger_period_s / SECONDS_PER_DAY
        return quantize_mjd(t)

    def window_mjd(self, frame, window):
        cfg = self.config
        fr = np.asarray(frame, dtype=np.int64)
        counts = self.frame_counts()
        starts = np.concatenate([[0], np.cumsum(counts)])
        r = np.searchsorted(starts, fr, side="right") - 1
        lo = np.array([a for a, _ in self.mjd_ranges])[r]
        t = lo + ((fr - starts[r]) * cfg.trigger_period_s + np.asarray(window) * cfg.integration_s) / SECONDS_PER_DAY
        return quantize_mjd(t)

    def model(self) -> "_Model":
        if self._model is None:
            self._model = _Model(self)
        return self._model

    def duty_cycle_note(self) -> str:
        cfg = self.config
        return (
            f"{cfg.windows_per_trigger} x {cfg.integration_s} s per {cfg.trigger_period_s} s trigger"
            f" = {cfg.duty_cycle:.4f} (nominal 1/6 = {1 / 6:.4f})"
        )


# --------------------------------------------------------------------------
# frame containers


@dataclass
class ElementSpectrum:
    """One element's view of a window.

    ``values`` align with the shared ``bins``; ``floor`` is the known per-bin
    noise level (``None`` for dense windows where it must be estimated);
    ``vis_noise`` and ``cross_terms`` carry the visibility contribution of
    bins that were not materialized, seen from this element as the first
    factor of the cross product.
    """

    label: str
    bins: np.ndarray
    values: np.ndarray
    floor: float | None
    wide_power: float
    seg_ids: np.ndarray
    seg_power: np.ndarray
    vis_noise: complex = 0j
    cross_terms: tuple = ()


@dataclass
class WindowSpectra:
    frame: int
    window_index: int
    mjd: float
    beam_ra_hr: float
    east: ElementSpectrum
    west: ElementSpectrum
    dense: bool = False

    @property
    def bins(self) -> np.ndarray:
        return self.east.bins


@dataclass
class TriggerFrame:
    index: int
    mjd: float
    beam_ra_hr: float
    windows: list


# --------------------------------------------------------------------------
# compiled scenario


class _Model:
    """Per-scenario lookup tables reused by every window."""

    def __init__(self, sc: Scenario):
        cfg = sc.config
        self.sc = sc
        self.cfg = cfg
        r = cfg.band_bin_ranges
        self.band_first = r[:, 0].copy()
        self.band_len = r[:, 1] - r[:, 0] + 1
        self.band_cum = np.concatenate([[0], np.cumsum(self.band_len)])
        self.n_bins = int(self.band_cum[-1])
        self.theta = cfg.snr_threshold_lin
        self.theta_m = self.theta * 10.0 ** (-MATERIALIZE_MARGIN_DB / 10.0)
        self.p_pair = math.exp(-2.0 * self.theta_m)
        self.p_single = math.exp(-self.theta_m)
        self.n_wide = WIDEBAND_HZ / cfg.fft_bin_hz
        self.sources = []
        reach_deg = 4.0 * cfg.element_fwhm_deg
        for s in sc.sources:
            bins = np.array([[round(f1 / cfg.fft_bin_hz), round(f2 / cfg.fft_bin_hz)] for f1, f2 in s.tone_pairs], dtype=np.int64)
            freqs = np.array(s.tone_pairs, dtype=np.float64)
            cosd = max(math.cos(math.radians(s.dec_deg)), 1e-6)
            reach_hr = min(12.0, reach_deg / 15.0 / cosd + abs(s.dec_deg - cfg.dec_deg) / 15.0)
            self.sources.append((s, bins, freqs, reach_hr, 10.0 ** (s.snr_db_at_transit / 10.0)))
        self.rfi = []
        for spec in sc.rfi:
            lo = spec.segment_center_hz - spec.bandwidth_hz / 2
            hi = spec.segment_center_hz + spec.bandwidth_hz / 2
            cand = np.arange(math.ceil(lo / cfg.fft_bin_hz), math.floor(hi / cfg.fft_bin_hz) + 1, dtype=np.int64)
            cand = cand[self.in_band(cand)]
            n_lit = max(1, int(round(spec.occupancy * cand.size))) if cand.size else 0
            rate = spec.burst_rate_per_hour * (cfg.integration_s + spec.duration_s) / 3600.0
            self.rfi.append((spec, cand, n_lit, rate, 10.0 ** (spec.burst_snr_db / 10.0)))
        # bins per 954 Hz segment, restricted to the band
        seg_lo = int(self.band_first.min() * cfg.fft_bin_hz // cfg.rfi_segment_hz)
        seg_hi = int((r[:, 1].max() * cfg.fft_bin_hz) // cfg.rfi_segment_hz)
        self.seg_offset = seg_lo
        self.seg_nbins = np.zeros(seg_hi - seg_lo + 1, dtype=np.int64)
        for first, last in r:
            s0 = int(first * cfg.fft_bin_hz // cfg.rfi_segment_hz)
            s1 = int(last * cfg.fft_bin_hz // cfg.rfi_segment_hz)
            edges = np.arange(s0, s1 + 2) * cfg.rfi_segment_hz / cfg.fft_bin_hz
            lo_b = np.maximum(np.ceil(edges[:-1] - 1e-9), first)
            hi_b = np.minimum(np.ceil(edges[1:] - 1e-9) - 1, last)
            self.seg_nbins[s0 - seg_lo:s1 - seg_lo + 1] += (hi_b - lo_b + 1).astype(np.int64)

    def in_band(self, bins):
        b = np.asarray(bins)
        ok = np.zeros(b.shape, dtype=bool)
        for first, n in zip(self.band_first, self.band_len):
            ok |= (b >= first) & (b < first + n)
        return ok

    def flat_to_bin(self, flat):
        r = np.searchsorted(self.band_cum, flat, side="right") - 1
        return self.band_first[r] + (flat - self.band_cum[r])

    def all_bins(self):
        return np.concatenate([np.arange(f, f + n, dtype=np.int64) for f, n in zip(self.band_first, self.band_len)])

    def segment_of_bin(self, bins):
        return np.floor(np.asarray(bins) * self.cfg.fft_bin_hz / self.cfg.rfi_segment_hz).astype(np.int64)

    def segment_bin_count(self, seg):
        return self.seg_nbins[np.asarray(seg) - self.seg_offset]

    def band_phase_sum(self, delay_s):
        """``sum_k exp(i 2 pi f_k delay)`` over every band bin (closed form)."""
        df = self.cfg.fft_bin_hz
        total = 0j
        for first, n in zip(self.band_first, self.band_len):
            x = 2.0 * np.pi * df * delay_s
            if abs(np.sin(x / 2)) < 1e-15:
                s = complex(n)
            else:
                s = np.exp(1j * x * (n - 1) / 2) * np.sin(n * x / 2) / np.sin(x / 2)
            total += np.exp(2j * np.pi * first * df * delay_s) * s
        return total


def _cn(rng, n, power):
    return np.sqrt(power / 2.0) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def _cross(freqs, cross_terms):
    c = np.zeros(np.shape(freqs), dtype=np.complex128)
    for p, d in cross_terms:
        c += p * np.exp(2j * np.pi * freqs * d)
    return c


def _correlated_noise(rng, n, fe, fw, cross):
    """Draw (east, west) noise with ``E[east conj(west)] = cross``."""
    w = _cn(rng, n, fw)
    resid = np.maximum(fe - np.abs(cross) ** 2 / fw, 0.0)
    e = (cross / fw) * w + _cn(rng, n, resid)
    return e, w


def _unique_indices(rng, n_pop, k):
    """``k`` distinct sorted integers from ``[0, n_pop)``."""
    idx = np.sort(rng.integers(0, n_pop, size=k))
    if k < 2 or np.all(idx[1:] != idx[:-1]):
        return idx
    u = np.unique(idx)
    while u.size < k:
        u = np.unique(np.concatenate([u, rng.integers(0, n_pop, size=k - u.size)]))
    return u


def _broadband_state(sc: Scenario, model: _Model, mjd, beam_ra):
    """Extra per-bin power and correlated cross terms active in this window."""
    cfg = sc.config
    extra = 0.0
    cross = []
    if sc.sun is None and not sc.broadband:
        return extra, ()
    if sc.sun is not None:
        sun = sc.sun
        sra = float(sun.ra_at(mjd))
        if ra_distance_hr(beam_ra, sra) < sun.sidelobe_extent_hr:
            sdec = float(sun.dec_at(mjd, cfg.dec_deg))
            off = angular_offset_deg(beam_ra, cfg.dec_deg, sra, sdec)
            g = max(beam_gain(off, cfg.element_fwhm_deg), 10.0 ** (sun.sidelobe_level_db / 10.0))
            p = sc.noise_power * 10.0 ** (sun.broadband_power_rise_db / 10.0) * g
            extra += p
            if sun.coherence > 0:
                h = float(hour_angle_rad(beam_ra, sra))
                tau = geometric_delay(h, sdec, cfg.baseline_m) - cfg.tau_inst_s
                cross.append((sun.coherence * p, tau))
    for bb in sc.broadband:
        if bb.mjd_start <= mjd < bb.mjd_end:
            p = sc.noise_power * 10.0 ** (bb.power_db / 10.0)
            extra += p
            if bb.coherence > 0:
                cross.append((bb.coherence * p, bb.delay_s))
    return extra, tuple(cross)


def synthesize_window(scenario: Scenario, mjd: float, window_index: int, rng, frame: int = -1, beam_ra=None) -> WindowSpectra:
    """Draw both element spectra for one integration window.

    Parameters
    ----------
    scenario : Scenario
    mjd : float
        Window start MJD (already quantized).
    window_index : int
        Position of the window inside its trigger.
    rng : numpy.random.Generator
        Stream dedicated to this (frame, window).

    Returns
    -------
    WindowSpectra
    """
    sc = scenario
    cfg = sc.config
    m = sc.model()
    if beam_ra is None:
        beam_ra = beam_ra_at(mjd, cfg)
    f0 = sc.noise_power
    extra, cross_terms = _broadband_state(sc, m, mjd, beam_ra)
    fe = fw = f0 + extra

    # injected signal bins
    sb, se, sw = [], [], []
    for s, bins, freqs, reach_hr, snr_lin in m.sources:
        if ra_distance_hr(beam_ra, s.ra_hr) > reach_hr:
            continue
        off = angular_offset_deg(beam_ra, cfg.dec_deg, s.ra_hr, s.dec_deg)
        gain = beam_gain(off, cfg.element_fwhm_deg)
        if gain < 1e-4:
            continue
        emit = rng.random(len(bins)) < s.emission_probability_per_window
        if not emit.any():
            continue
        mean_p = snr_lin * gain * f0
        if s.amplitude_model == "rayleigh":
            amp = np.sqrt(mean_p * rng.standard_exponential(2 * int(emit.sum())))
        else:
            amp = math.sqrt(mean_p)
        b = bins[emit].ravel()
        f = freqs[emit].ravel()
        psi = rng.uniform(-np.pi, np.pi, size=b.size)
        if s.phase_coherent:
            h = float(hour_angle_rad(beam_ra, s.ra_hr))
            dphi = expected_ew_phase(f, h, cfg, dec_deg=s.dec_deg)
        else:
            dphi = rng.uniform(-np.pi, np.pi, size=b.size)
        w_sig = amp * np.exp(1j * psi)
        sb.append(b)
        sw.append(w_sig)
        se.append(w_sig * np.exp(1j * dphi))
    rfi_wide_e = rfi_wide_w = 0.0
    for spec, cand, n_lit, rate, snr_lin in m.rfi:
        if spec.mjd_range is not None and not spec.mjd_range[0] <= mjd < spec.mjd_range[1]:
            continue
        nb = rng.poisson(rate)
        for _ in range(nb):
            lit = cand[rng.choice(cand.size, n_lit, replace=False)]
            a = _cn(rng, n_lit, snr_lin * f0)
            a2 = a if spec.correlated else _cn(rng, n_lit, snr_lin * f0)
            ce, cw = spec.element_coupling
            sb.append(lit)
            se.append(math.sqrt(ce) * a)
            sw.append(math.sqrt(cw) * a2)
            rfi_wide_e += ce * float(np.sum(np.abs(a) ** 2))
            rfi_wide_w += cw * float(np.sum(np.abs(a2) ** 2))

    if sb:
        allb = np.concatenate(sb)
        inband = m.in_band(allb)
        sig_bins, inv = np.unique(allb[inband], return_inverse=True)
        sig_e = np.zeros(sig_bins.size, dtype=np.complex128)
        sig_w = np.zeros(sig_bins.size, dtype=np.complex128)
        np.add.at(sig_e, inv, np.concatenate(se)[inband])
        np.add.at(sig_w, inv, np.concatenate(sw)[inband])
    else:
        sig_bins = np.empty(0, dtype=np.int64)
        sig_e = sig_w = np.empty(0, dtype=np.complex128)

    if sc.dense:
        bins = m.all_bins()
        freqs = bins * cfg.fft_bin_hz
        e, w = _correlated_noise(rng, bins.size, fe, fw, _cross(freqs, cross_terms)) if cross_terms else (
            _cn(rng, bins.size, fe), _cn(rng, bins.size, fw))
        pos = np.searchsorted(bins, sig_bins)
        e[pos] += sig_e
        w[pos] += sig_w
        seg = m.segment_of_bin(bins)
        useg, sinv = np.unique(seg, return_inverse=True)
        pe = np.bincount(sinv, weights=np.abs(e) ** 2)
        pw = np.bincount(sinv, weights=np.abs(w) ** 2)
        vis_noise = 0j
        cross_out = ()
        floor_e = floor_w = None
    else:
        # noise under the signal bins
        if sig_bins.size:
            c = _cross(sig_bins * cfg.fft_bin_hz, cross_terms)
            ne, nw = _correlated_noise(rng, sig_bins.size, fe, fw, c)
            sig_e = sig_e + ne
            sig_w = sig_w + nw
        tm = m.theta_m
        if cross_terms:
            k = rng.binomial(m.n_bins, m.p_single)
            flat = _unique_indices(rng, m.n_bins, k)
            xb = m.flat_to_bin(flat)
            xw = np.sqrt(fw * (tm + rng.standard_exponential(k))) * np.exp(1j * rng.uniform(-np.pi, np.pi, k))
            c = _cross(xb * cfg.fft_bin_hz, cross_terms)
            resid = np.maximum(fe - np.abs(c) ** 2 / fw, 0.0)
            xe = (c / fw) * xw + _cn(rng, k, resid)
            keep = np.abs(xe) ** 2 >= tm * fe
            xb, xe, xw = xb[keep], xe[keep], xw[keep]
        else:
            k = rng.binomial(m.n_bins, m.p_pair)
            flat = _unique_indices(rng, m.n_bins, k)
            xb = m.flat_to_bin(flat)
            ex = rng.standard_exponential(2 * k)
            ph = np.exp(2j * np.pi * rng.random(2 * k))
            xe = np.sqrt(fe * (tm + ex[:k])) * ph[:k]
            xw = np.sqrt(fw * (tm + ex[k:])) * ph[k:]
        if sig_bins.size:
            clash = np.isin(xb, sig_bins)
            xb, xe, xw = xb[~clash], xe[~clash], xw[~clash]
            bins = np.concatenate([sig_bins, xb])
            e = np.concatenate([sig_e, xe])
            w = np.concatenate([sig_w, xw])
            order = np.argsort(bins, kind="stable")
            bins, e, w = bins[order], e[order], w[order]
        else:
            bins, e, w = xb, xe, xw
        # aggregate power of each touched segment: materialized bins plus a
        # gamma draw for the remaining bins of the segment
        seg = m.segment_of_bin(bins)
        if seg.size:
            first = np.concatenate([[True], seg[1:] != seg[:-1]])
            useg = seg[first]
            sinv = np.cumsum(first) - 1
        else:
            useg = seg
            sinv = seg
        n_rest = np.maximum(m.segment_bin_count(useg) - np.bincount(sinv, minlength=useg.size), 1)
        g = rng.gamma(np.concatenate([n_rest, n_rest]), 1.0)
        pe = np.bincount(sinv, weights=e.real ** 2 + e.imag ** 2, minlength=useg.size) + fe * g[:useg.size]
        pw = np.bincount(sinv, weights=w.real ** 2 + w.imag ** 2, minlength=useg.size) + fw * g[useg.size:]
        n_rest_band = max(m.n_bins - bins.size, 0)
        z = rng.standard_normal(2)
        vis_noise = complex(z[0], z[1]) * math.sqrt(n_rest_band * fe * fw / 2.0)
        cross_out = cross_terms
        floor_e, floor_w = fe, fw

    zw = rng.standard_normal(2)
    wide_e = m.n_wide * fe + math.sqrt(m.n_wide) * fe * zw[0] + rfi_wide_e
    wide_w = m.n_wide * fw + math.sqrt(m.n_wide) * fw * zw[1] + rfi_wide_w
    east = ElementSpectrum("east", bins, e, floor_e, wide_e, useg, pe, vis_noise, cross_out)
    west = ElementSpectrum(
        "west", bins, w, floor_w, wide_w, useg, pw, complex(np.conj(vis_noise)),
        tuple((p, -d) for p, d in cross_out),
    )
    return WindowSpectra(frame, window_index, float(mjd), float(beam_ra), east, west, sc.dense)


def window_rng(seed: int, frame: int, window: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(frame), int(window)])


def generate_frame(scenario: Scenario, frame: int) -> TriggerFrame:
    cfg = scenario.config
    mjd = float(scenario.frame_mjd(frame))
    windows = []
    for j in range(cfg.windows_per_trigger):
        wm = float(scenario.window_mjd(frame, j))
        rng = window_rng(scenario.seed, frame, j)
        windows.append(synthesize_window(scenario, wm, j, rng, frame=frame))
    return TriggerFrame(frame, mjd, float(beam_ra_at(mjd, cfg)), windows)


def generate_run(scenario: Scenario, start: int = 0, stop: int | None = None) -> Iterator[TriggerFrame]:
    """Yield trigger frames ``start .. stop-1`` in order (all frames by default)."""
    n = scenario.n_frames
    if n == 0:
        raise ValueError("scenario has no complete trigger periods")
    stop = n if stop is None else min(stop, n)
    cfg = scenario.config
    frames = np.arange(start, stop)
    mjd = scenario.frame_mjd(frames)
    beam = beam_ra_at(mjd, cfg)
    wmjd = [scenario.window_mjd(frames, j) for j in range(cfg.windows_per_trigger)]
    wra = [beam_ra_at(x, cfg) for x in wmjd]
    seed = int(scenario.seed)
    for i, fr in enumerate(range(start, stop)):
        windows = []
        for j in range(cfg.windows_per_trigger):
            rng = np.random.default_rng([seed, fr, j])
            windows.append(synthesize_window(scenario, float(wmjd[j][i]), j, rng, frame=fr, beam_ra=float(wra[j][i])))
        yield TriggerFrame(fr, float(mjd[i]), float(beam[i]), windows)


# --------------------------------------------------------------------------
# helpers for building runs


def transit_ranges(ra_hr: float, mjd_start: float, n_days: int, halfwidth_hr: float, config: InstrumentConfig) -> list:
    """MJD intervals during which the beam RA is within ``halfwidth_hr`` of ``ra_hr``.

    One interval per sidereal day, starting with the first whose start is
    at or after ``mjd_start``.
    """
    if not 0 < halfwidth_hr < 12:
        raise ValueError("halfwidth_hr must lie in (0, 12)")
    ra0 = beam_ra_at(mjd_start, config)
    lead_hr = np.mod(ra_hr - halfwidth_hr - ra0, 24.0)
    rate = 24.0 * SIDEREAL_RATE
    t0 = mjd_start + lead_hr / rate
    sidereal_day = 1.0 / SIDEREAL_RATE
    span = 2.0 * halfwidth_hr / rate
    return [[t0 + i * sidereal_day, t0 + i * sidereal_day + span] for i in range(n_days)]


def linear_sun_table(mjd_start: float, mjd_end: float, ra_start_hr: float, ra_rate_hr_per_day: float = 24.0 / 365.2422, n_rows: int = 2, dec_deg=None) -> np.ndarray:
    """Sun ephemeris rows with RA drifting linearly (mod 24).

    Rows are added as needed so consecutive RAs differ by at most 6 h;
    interpolation unwraps along the shorter arc.
    """
    n_rows = max(n_rows, int(math.ceil(abs(ra_rate_hr_per_day) * (mjd_end - mjd_start) / 6.0)) + 1)
    t = np.linspace(mjd_start, mjd_end, n_rows)
    ra = np.mod(ra_start_hr + (t - mjd_start) * ra_rate_hr_per_day, 24.0)
    if dec_deg is None:
        return np.column_stack([t, ra])
    return np.column_stack([t, ra, np.full_like(t, dec_deg)])


# --------------------------------------------------------------------------
# persistence


def scenario_to_dict(sc: Scenario) -> dict:
    d = {
        "schema": SCENARIO_SCHEMA,
        "name": sc.name,
        "seed": sc.seed,
        "noise_power": sc.noise_power,
        "dense": sc.dense,
        "mjd_ranges": [list(r) for r in sc.mjd_ranges],
        "config": sc.config.to_dict(),
        "sources": [asdict(s) for s in sc.sources],
        "rfi": [asdict(r) for r in sc.rfi],
        "broadband": [asdict(b) for b in sc.broadband],
        "sun": None,
    }
    for s in d["sources"]:
        s["tone_pairs"] = [list(p) for p in s["tone_pairs"]]
    for r in d["rfi"]:
        r["element_coupling"] = list(r["element_coupling"])
        r["mjd_range"] = None if r["mjd_range"] is None else list(r["mjd_range"])
    if sc.sun is not None:
        d["sun"] = {
            "ra_hr_by_mjd": sc.sun.ra_hr_by_mjd.tolist(),
            "broadband_power_rise_db": sc.sun.broadband_power_rise_db,
            "sidelobe_extent_hr": sc.sun.sidelobe_extent_hr,
            "sidelobe_level_db": sc.sun.sidelobe_level_db,
            "coherence": sc.sun.coherence,
        }
    return d


def scenario_from_dict(d: dict, config: InstrumentConfig | None = None) -> Scenario:
    schema = d.get("schema", SCENARIO_SCHEMA)
    if schema != SCENARIO_SCHEMA:
        raise ValueError(f"unsupported scenario schema {schema!r}")
    if config is None:
        cfg_d = dict(d.get("config", {}))
        for key in ("rf_ranges_hz", "delta_f_range_hz"):
            if key in cfg_d:
                cfg_d[key] = json.dumps(cfg_d[key])
        config = config_from_mapping({k: ("auto" if v is None else v) for k, v in cfg_d.items()})
    sun = None
    if d.get("sun"):
        sun = SunSpec(**d["sun"])
    return Scenario(
        config=config,
        mjd_ranges=d["mjd_ranges"],
        seed=int(d.get("seed", 1)),
        sources=[SourceSpec(**s) for s in d.get("sources", [])],
        rfi=[RfiSpec(**r) for r in d.get("rfi", [])],
        sun=sun,
        broadband=[BroadbandSpec(**b) for b in d.get("broadband", [])],
        noise_power=float(d.get("noise_power", 1.0)),
        dense=bool(d.get("dense", False)),
        name=d.get("name", "scenario"),
    )


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=2, sort_keys=True))


def load_scenario(path, config: InstrumentConfig | None = None) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()), config=config)


# --------------------------------------------------------------------------
# presets


def doi_tones(config: InstrumentConfig, n: int = 36, min_spacing_hz: float = 200e3, min_tau_shift_rad: float = 0.7, step_hz: float = 25e3) -> np.ndarray:
    """Tone frequencies for a test source, split evenly over the RF ranges.

    Within each range tones are picked greedily on a ``step_hz`` grid, at
    least ``min_spacing_hz`` apart, keeping only frequencies where dropping
    the instrument delay moves the expected east-west phase by at least
    ``min_tau_shift_rad``.
    """
    ranges = config.rf_ranges_hz
    per = [n // len(ranges) + (1 if i < n % len(ranges) else 0) for i in range(len(ranges))]
    tones = []
    for (lo, hi), want in zip(ranges, per):
        got = []
        f = lo + 0.5 * min_spacing_hz
        while f <= hi - 0.5 * min_spacing_hz and len(got) < want:
            shift = abs(wrap_phase(2.0 * np.pi * f * config.tau_inst_s))
            if shift >= min_tau_shift_rad and (not got or f - got[-1] >= min_spacing_hz):
                got.append(f)
            f += step_hz
        if len(got) < want:
            raise ValueError(f"only {len(got)} of {want} tones fit in {lo:.0f}-{hi:.0f} Hz")
        tones.extend(got)
    return np.asarray(tones)


def doi_tone_pairs(config: InstrumentConfig, n_tones: int = 36, **kw) -> list:
    """:func:`doi_tones` paired across the two halves of each RF range."""
    t = doi_tones(config, n_tones, **kw)
    pairs = []
    for lo, hi in config.rf_ranges_hz:
        r = t[(t >= lo) & (t < hi)]
        h = r.size // 2
        pairs.extend((float(r[i]), float(r[i + h])) for i in range(h))
    return pairs


DOI_RA_HR = 8.83875
DOI_TRANSITS = 6
INCOHERENT_TRANSITS = 4
SOURCE_RFI_THRESHOLD = 100000


def source_preset(config: InstrumentConfig, seed: int = 1, days: int = 1, coherent: bool = True,
                  emission_probability: float = 1.0, halfwidth_hr: float | None = None, ra_hr: float = DOI_RA_HR) -> Scenario:
    """One 15 dB source observed over ``days`` transit arcs.

    The coherent source uses 144 tones whose expected phase moves by at
    least 0.7 rad without the instrument delay; its arcs (+/-0.15 hr) just
    cover the central bin and both alias partners.  The incoherent source
    uses 100 tones and +/-1 hr arcs so that bins well off the source set the
    background level.

    Segment tagging is switched off by an explicit concentration threshold:
    a fixed-tone emitter that fires in every window is, by construction,
    a concentrated narrowband segment.
    """
    cfg = config.replace(rfi_concentration_threshold=SOURCE_RFI_THRESHOLD)
    if coherent:
        pairs = doi_tone_pairs(cfg, 144, min_spacing_hz=50e3)
        hw = 0.15 if halfwidth_hr is None else halfwidth_hr
    else:
        pairs = doi_tone_pairs(cfg, 100, min_spacing_hz=100e3, min_tau_shift_rad=0.0)
        hw = 1.0 if halfwidth_hr is None else halfwidth_hr
    src = SourceSpec(
        ra_hr=ra_hr, dec_deg=cfg.dec_deg, tone_pairs=pairs,
        snr_db_at_transit=15.0, emission_probability_per_window=emission_probability,
        phase_coherent=coherent, name="doi" if coherent else "incoherent",
    )
    ranges = transit_ranges(ra_hr, 60500.0, days, hw, cfg)
    return Scenario(cfg, ranges, seed=seed, sources=[src], name="single-doi" if coherent else "incoherent-doi")


def preset(name: str, config: InstrumentConfig | None = None, seed: int = 1, days: float | None = None) -> Scenario:
    """Ready-made scenarios named in :data:`PRESETS`.

    For the source presets ``days`` counts transit arcs (default
    :data:`DOI_TRANSITS` coherent, :data:`INCOHERENT_TRANSITS` incoherent);
    otherwise it is the run length in days (default 1).  The Sun preset
    starts after the Sun-excision start date.
    """
    from .config import desk_config

    cfg = config or desk_config()
    t0 = 60500.0
    if name == "single-doi":
        return source_preset(cfg, seed, DOI_TRANSITS if days is None else max(1, int(round(days))))
    if name == "incoherent-doi":
        return source_preset(cfg, seed, INCOHERENT_TRANSITS if days is None else max(1, int(round(days))), coherent=False)
    days = 1.0 if days is None else days
    if name == "null":
        return Scenario(cfg, [[t0, t0 + days]], seed=seed, name="null")
    if name == "rfi-storm":
        lo, hi = cfg.rf_ranges_hz[0]
        storm = RfiSpec(
            segment_center_hz=lo + 0.25 * (hi - lo), bandwidth_hz=954.0 * 3,
            burst_rate_per_hour=2000.0, burst_snr_db=12.0,
            mjd_range=(t0 + 0.1 * days, t0 + 0.3 * days), name="storm",
        )
        one_sided = RfiSpec(
            segment_center_hz=lo + 0.6 * (hi - lo), bandwidth_hz=954.0,
            burst_rate_per_hour=2000.0, burst_snr_db=30.0, element_coupling=(1.0, 0.0),
            correlated=False, name="east-only",
        )
        return Scenario(cfg, [[t0, t0 + days]], seed=seed, rfi=[storm, one_sided], name="rfi-storm")
    if name == "sun-transit":
        t0 = max(t0, cfg.sun_mjd_min + 5.0)
        beam0 = beam_ra_at(t0, cfg)
        table = linear_sun_table(t0 - 1, t0 + days + 1, (beam0 + 6.0) % 24.0, dec_deg=cfg.dec_deg)
        sun = SunSpec(table, broadband_power_rise_db=10.0, sidelobe_extent_hr=1.0)
        return Scenario(cfg, [[t0, t0 + days]], seed=seed, sun=sun, name="sun-transit")
    raise ValueError(f"unknown preset {name!r}")


PRESETS = ("null", "single-doi", "incoherent-doi", "rfi-storm", "sun-transit")
