"""Angles, delays and RA binning for an east-west drift-scan baseline.

Sign conventions (held fixed throughout the package):

* hour angle ``H = RA_beam - RA_source``, positive west of the meridian;
* geometric delay ``tau_g = (B/c) cos(dec) sin(H)``;
* per-pulse phase residual ``d_ew = phi_east - phi_west - expected_ew_phase``.

All functions are pure and operate elementwise on numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import SIDEREAL_RATE, SPEED_OF_LIGHT, InstrumentConfig

TWO_PI = 2.0 * np.pi
HR_TO_RAD = np.pi / 12.0


def _require_finite(x, name):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")


def wrap_phase(angle_rad):
    """Reduce angles to the half-open interval (-pi, pi].

    Parameters
    ----------
    angle_rad : float or array_like
        Finite angle(s) in radians.

    Returns
    -------
    float or ndarray
        ``angle - 2 pi m`` with integer ``m`` chosen so the result lies in (-pi, pi].
    """
    a = np.asarray(angle_rad, dtype=np.float64)
    _require_finite(a, "angle_rad")
    out = a - TWO_PI * np.ceil((a - np.pi) / TWO_PI)
    # floating round-off can leave -pi or a hair above pi
    out = np.where(out <= -np.pi, out + TWO_PI, out)
    out = np.where(out > np.pi, out - TWO_PI, out)
    return float(out) if out.ndim == 0 else out


def geometric_delay(hour_angle_rad, dec_deg, baseline_m):
    """East-west baseline delay in seconds, zero at transit.

    Positive ``H`` (source west of the meridian) gives a positive delay,
    meaning the wavefront reaches the west element first so the east
    element's phase leads.
    """
    h = np.asarray(hour_angle_rad, dtype=np.float64)
    _require_finite(h, "hour_angle_rad")
    _require_finite(dec_deg, "dec_deg")
    tau = (baseline_m / SPEED_OF_LIGHT) * np.cos(np.radians(dec_deg)) * np.sin(h)
    return float(tau) if np.ndim(tau) == 0 else tau


def fringe_period_ra_hr(baseline_wavelengths: float, dec_deg: float) -> float:
    """RA interval over which the delay grows by one wavelength near transit."""
    if baseline_wavelengths <= 0:
        raise ValueError("baseline_wavelengths must be positive")
    c = math.cos(math.radians(dec_deg))
    if abs(dec_deg) >= 90.0 or c < 1e-12:
        raise ValueError("fringe period is singular at the pole")
    return 12.0 / (math.pi * baseline_wavelengths * c)


def alias_ratio(fringe_period_hr: float, ra_bin_hr: float) -> float:
    return fringe_period_hr / ra_bin_hr


def alias_offset_bins(fringe_period_hr: float, ra_bin_hr: float) -> int:
    """Fringe period quantized up to a whole number of RA bins.

    Rounding is by ceiling (15.48 -> 16 for the default instrument); a
    tolerance of 1e-9 keeps exact multiples from stepping up a bin.
    """
    if fringe_period_hr <= 0 or ra_bin_hr <= 0:
        raise ValueError("fringe period and bin width must be positive")
    return max(1, math.ceil(fringe_period_hr / ra_bin_hr - 1e-9))


def ra_bin_of(ra_hr, config: InstrumentConfig):
    """RA bin index ``floor(ra / width)``; RA must lie in [0, 24)."""
    ra = np.asarray(ra_hr, dtype=np.float64)
    _require_finite(ra, "ra_hr")
    if np.any((ra < 0.0) | (ra >= 24.0)):
        raise ValueError("ra_hr must lie in [0, 24)")
    k = np.floor(ra / config.ra_bin_hr).astype(np.int64)
    k = np.minimum(k, config.ra_bins_per_day - 1)
    return int(k) if k.ndim == 0 else k


def bin_center(k, config: InstrumentConfig):
    """Center RA in hours of bin ``k``."""
    kk = np.asarray(k)
    if np.any((kk < 0) | (kk >= config.ra_bins_per_day)):
        raise ValueError("bin index out of range")
    c = (kk + 0.5) * config.ra_bin_hr
    return float(c) if np.ndim(c) == 0 else c


def beam_ra_at(mjd, config: InstrumentConfig, lst_ref: tuple[float, float] | None = None):
    """Beam RA (local sidereal time of the meridian) at ``mjd``.

    ``lst_ref`` is a calibration pair ``(mjd0, lst0_hr)``; by default it is
    taken from the config.
    """
    mjd0, lst0 = lst_ref if lst_ref is not None else (config.lst_ref_mjd, config.lst_ref_hr)
    m = np.asarray(mjd, dtype=np.float64)
    ra = np.mod(lst0 + (m - mjd0) * 24.0 * SIDEREAL_RATE, 24.0)
    ra = np.where(ra >= 24.0, 0.0, ra)
    return float(ra) if ra.ndim == 0 else ra


def hour_angle_rad(beam_ra_hr, source_ra_hr):
    """Hour angle of a source under the beam, wrapped to (-pi, pi]."""
    return wrap_phase((np.asarray(beam_ra_hr) - np.asarray(source_ra_hr)) * HR_TO_RAD)


def expected_ew_phase(freq_hz, hour_angle, config: InstrumentConfig, tau_inst_s=None, dec_deg=None):
    """East-minus-west phase of a point source after instrument delay compensation.

    ``2 pi f (tau_g(H) - tau_inst)`` wrapped to (-pi, pi].  ``tau_inst_s`` and
    ``dec_deg`` default to the config values and exist so diagnostics and the
    simulator can override them.
    """
    tau_inst = config.tau_inst_s if tau_inst_s is None else tau_inst_s
    dec = config.dec_deg if dec_deg is None else dec_deg
    tau = geometric_delay(hour_angle, dec, config.baseline_m)
    f = np.asarray(freq_hz, dtype=np.float64)
    # split f*tau to keep the large 2*pi*f*tau_inst term accurate before wrapping
    return wrap_phase(TWO_PI * np.mod(f * (np.asarray(tau) - tau_inst), 1.0))


@dataclass(frozen=True)
class SkyPointing:
    mjd: float
    beam_ra_hr: float
    dec_deg: float

    def __post_init__(self):
        if not 0.0 <= self.beam_ra_hr < 24.0:
            raise ValueError("beam_ra_hr must lie in [0, 24)")


def quantize_mjd(mjd, step_s: float = 0.25):
    """Round MJD to the nearest ``step_s`` seconds of the day."""
    m = np.asarray(mjd, dtype=np.float64)
    day = np.floor(m)
    ticks = np.round((m - day) * 86400.0 / step_s)
    out = day + ticks * step_s / 86400.0
    return float(out) if out.ndim == 0 else out


def ra_distance_hr(a, b):
    """Circular RA separation in hours, in [0, 12]."""
    d = np.abs(np.mod(np.asarray(a) - np.asarray(b), 24.0))
    return np.minimum(d, 24.0 - d)


def angular_offset_deg(ra1_hr, dec1_deg, ra2_hr, dec2_deg):
    """Great-circle separation in degrees (haversine form)."""
    ra1 = np.asarray(ra1_hr) * HR_TO_RAD
    ra2 = np.asarray(ra2_hr) * HR_TO_RAD
    d1 = np.radians(dec1_deg)
    d2 = np.radians(dec2_deg)
    s = np.sin((d2 - d1) / 2) ** 2 + np.cos(d1) * np.cos(d2) * np.sin((ra2 - ra1) / 2) ** 2
    return np.degrees(2 * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0))))
