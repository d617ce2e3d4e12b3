"""Instrument and analysis settings.

Each measurement dial has a field here, along with the knobs the automated
stages need: the RFI concentration threshold, DOI thresholds and the Sun
excision window.  Config files are INI with one section per settings block.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
SIDEREAL_RATE = 1.0027379094

ENV_PREFIX = "PULSEPAIR_"


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending setting."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass(frozen=True)
class InstrumentConfig:
    # measurement
    baseline_wavelengths: float = 33.0
    ref_frequency_hz: float = 1.425e9
    dec_deg: float = -4.3
    element_fwhm_deg: float = 5.3
    tau_inst_s: float = -82.0e-9
    ra_bins_per_day: int = 3200
    fft_bin_hz: float = 3.7
    integration_s: float = 0.27
    trigger_period_s: float = 3.0
    windows_per_trigger: int = 2
    rf_ranges_hz: tuple = ((1398.0e6, 1424.0e6), (1426.0e6, 1451.0e6))
    baseline_azimuth_deg: float = 180.0
    lst_ref_mjd: float = 60000.0
    lst_ref_hr: float = 0.0
    # first level
    snr_threshold_db: float = 8.5
    delta_f_range_hz: tuple = (1.0, 7.0e6)
    log10_pulse_snr_like_threshold: float = -1.60
    log10_pair_snr_like_threshold: float = -2.70
    # second level filters (half-widths around zero)
    ew_phase_filter_rad: float = 0.10
    ddf_phase_filter_rad: float = 0.80
    # RFI excision
    rfi_segment_hz: float = 954.0
    rfi_margin_segments: int = 500
    rfi_window_hours: float = 4.0
    rfi_look_forward: bool = True
    rfi_concentration_threshold: int | None = None
    rfi_target_tag_fraction: float = 1.0e-6
    # Sun excision
    sun_ra_halfwidth_hr: float = 1.0
    sun_mjd_min: float = 60540.0
    # DOI detection
    doi_min_events: int = 8
    doi_median_d: float = 3.0
    doi_max_low_fraction: float = 0.10
    doi_merge_adjacent: bool = True
    doi_family_alpha: float = 1.0e-3

    def __post_init__(self):
        ranges = tuple(tuple(float(v) for v in r) for r in self.rf_ranges_hz)
        object.__setattr__(self, "rf_ranges_hz", ranges)
        object.__setattr__(
            self, "delta_f_range_hz", tuple(float(v) for v in self.delta_f_range_hz)
        )
        self.validate()

    def validate(self) -> None:
        if self.baseline_wavelengths <= 0:
            raise ConfigError("baseline_wavelengths", "must be positive")
        if self.ref_frequency_hz <= 0:
            raise ConfigError("ref_frequency_hz", "must be positive")
        if not abs(self.dec_deg) < 90.0:
            raise ConfigError("dec_deg", "must lie strictly between -90 and 90")
        if self.element_fwhm_deg <= 0:
            raise ConfigError("element_fwhm_deg", "must be positive")
        if self.ra_bins_per_day <= 0:
            raise ConfigError("ra_bins_per_day", "must be positive")
        if self.fft_bin_hz <= 0 or self.integration_s <= 0:
            raise ConfigError("fft_bin_hz", "bin width and integration must be positive")
        if abs(self.integration_s * self.fft_bin_hz - 1.0) > 0.01:
            raise ConfigError(
                "integration_s", "integration_s * fft_bin_hz must be 1 within 1%"
            )
        if self.windows_per_trigger < 1:
            raise ConfigError("windows_per_trigger", "must be at least 1")
        if self.windows_per_trigger * self.integration_s > self.trigger_period_s:
            raise ConfigError("windows_per_trigger", "windows do not fit in the trigger period")
        if not self.rf_ranges_hz:
            raise ConfigError("rf_ranges_hz", "at least one range required")
        prev_hi = -math.inf
        for lo, hi in self.rf_ranges_hz:
            if not lo < hi:
                raise ConfigError("rf_ranges_hz", f"range [{lo}, {hi}] is empty")
            if lo <= prev_hi:
                raise ConfigError("rf_ranges_hz", "ranges must be disjoint and ascending")
            prev_hi = hi
        lo, hi = self.delta_f_range_hz
        if not 0 < lo < hi:
            raise ConfigError("delta_f_range_hz", "need 0 < low < high")
        if self.rfi_segment_hz < 16 * self.fft_bin_hz:
            raise ConfigError("rfi_segment_hz", "segment must hold at least 16 FFT bins")
        if self.rfi_margin_segments < 0:
            raise ConfigError("rfi_margin_segments", "must be non-negative")
        if self.rfi_concentration_threshold is not None and self.rfi_concentration_threshold <= 0:
            raise ConfigError("rfi_concentration_threshold", "must be positive")
        if self.ew_phase_filter_rad <= 0 or self.ddf_phase_filter_rad <= 0:
            raise ConfigError("ew_phase_filter_rad", "filter half-widths must be positive")
        if self.doi_min_events < 1:
            raise ConfigError("doi_min_events", "must be at least 1")
        if not 0 < self.doi_family_alpha < 1:
            raise ConfigError("doi_family_alpha", "must lie in (0, 1)")

    # derived quantities -------------------------------------------------

    @property
    def ra_bin_hr(self) -> float:
        return 24.0 / self.ra_bins_per_day

    @property
    def baseline_m(self) -> float:
        return self.baseline_wavelengths * SPEED_OF_LIGHT / self.ref_frequency_hz

    @property
    def snr_threshold_lin(self) -> float:
        return 10.0 ** (self.snr_threshold_db / 10.0)

    @property
    def bins_per_segment(self) -> float:
        return self.rfi_segment_hz / self.fft_bin_hz

    @property
    def band_bin_ranges(self) -> np.ndarray:
        """Inclusive ``[first, last]`` global FFT bin index per RF range."""
        out = []
        for lo, hi in self.rf_ranges_hz:
            first = math.ceil(lo / self.fft_bin_hz - 1e-9)
            last = math.floor(hi / self.fft_bin_hz + 1e-9)
            out.append((first, last))
        return np.asarray(out, dtype=np.int64)

    @property
    def n_band_bins(self) -> int:
        r = self.band_bin_ranges
        return int(np.sum(r[:, 1] - r[:, 0] + 1))

    @property
    def duty_cycle(self) -> float:
        return self.windows_per_trigger * self.integration_s / self.trigger_period_s

    def replace(self, **changes) -> "InstrumentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["rf_ranges_hz"] = [list(r) for r in self.rf_ranges_hz]
        d["delta_f_range_hz"] = list(self.delta_f_range_hz)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# INI layout: section -> fields, mirroring the figure settings blocks.
SECTIONS: dict[str, tuple[str, ...]] = {
    "measurement": (
        "baseline_wavelengths", "ref_frequency_hz", "dec_deg", "element_fwhm_deg",
        "tau_inst_s", "ra_bins_per_day", "fft_bin_hz", "integration_s",
        "trigger_period_s", "windows_per_trigger", "rf_ranges_hz",
        "baseline_azimuth_deg", "lst_ref_mjd", "lst_ref_hr",
    ),
    "first_level": (
        "snr_threshold_db", "delta_f_range_hz",
        "log10_pulse_snr_like_threshold", "log10_pair_snr_like_threshold",
    ),
    "filters": ("ew_phase_filter_rad", "ddf_phase_filter_rad"),
    "rfi": (
        "rfi_segment_hz", "rfi_margin_segments", "rfi_window_hours",
        "rfi_look_forward", "rfi_concentration_threshold", "rfi_target_tag_fraction",
    ),
    "sun": ("sun_ra_halfwidth_hr", "sun_mjd_min"),
    "doi": (
        "doi_min_events", "doi_median_d", "doi_max_low_fraction",
        "doi_merge_adjacent", "doi_family_alpha",
    ),
}

_FIELDS = {f.name: f for f in dataclasses.fields(InstrumentConfig)}


def _parse_value(key: str, text: str) -> Any:
    text = text.strip()
    default = _FIELDS[key].default
    try:
        if key == "rf_ranges_hz":
            # "1398.0e6-1424.0e6, 1426.0e6-1451.0e6" or JSON list of pairs
            if text.startswith("["):
                return tuple(tuple(p) for p in json.loads(text))
            pairs = []
            for chunk in text.split(","):
                lo, hi = chunk.strip().split(":")
                pairs.append((float(lo), float(hi)))
            return tuple(pairs)
        if key == "delta_f_range_hz":
            if text.startswith("["):
                return tuple(json.loads(text))
            lo, hi = text.split(":")
            return (float(lo), float(hi))
        if key == "rfi_concentration_threshold":
            return None if text.lower() in ("", "none", "auto") else int(text)
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        return float(text)
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, f"cannot parse {text!r}") from exc


def _format_value(key: str, value: Any) -> str:
    if key == "rf_ranges_hz":
        return ", ".join(f"{lo!r}:{hi!r}" for lo, hi in value)
    if key == "delta_f_range_hz":
        return f"{value[0]!r}:{value[1]!r}"
    if value is None:
        return "auto"
    return repr(value) if isinstance(value, float) else str(value)


def config_from_mapping(values: Mapping[str, str], base: InstrumentConfig | None = None) -> InstrumentConfig:
    base = base or InstrumentConfig()
    changes = {}
    for key, text in values.items():
        if key not in _FIELDS:
            raise ConfigError(key, "unknown setting")
        changes[key] = _parse_value(key, str(text))
    return base.replace(**changes)


def read_ini(path: str | Path, extra_sections: Sequence[str] = ()) -> tuple[dict[str, str], dict[str, dict[str, str]]]:
    """Setting values from an INI file plus the raw contents of ``extra_sections``."""
    values: dict[str, str] = {}
    extras: dict[str, dict[str, str]] = {}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    for section in parser.sections():
        if section in extra_sections:
            extras[section] = dict(parser.items(section))
            continue
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        for key, text in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(key, f"not a setting of section [{section}]")
            values[key] = text
    return values, extras


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None,
                base: InstrumentConfig | None = None) -> InstrumentConfig:
    """Read an INI config over ``base``, then apply ``PULSEPAIR_<KEY>`` environment overrides."""
    values: dict[str, str] = read_ini(path)[0] if path is not None else {}
    env = os.environ if env is None else env
    for name, text in env.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in _FIELDS:
                values[key] = text
    return config_from_mapping(values, base)


def save_config(config: InstrumentConfig, path: str | Path) -> None:
    lines = ["# pulsepair instrument config v1"]
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(key, getattr(config, key))}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def desk_config(**changes) -> InstrumentConfig:
    """Default settings with a narrower RF band (two 6 MHz ranges).

    Keeps the two-range layout and the 7 MHz pair spacing limit meaningful
    while cutting per-window AWGN pulse counts by roughly 4x, which keeps
    multi-day desk runs inside a few minutes.
    """
    base = InstrumentConfig(rf_ranges_hz=((1418.0e6, 1424.0e6), (1426.0e6, 1432.0e6)))
    return base.replace(**changes) if changes else base
