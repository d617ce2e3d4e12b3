"""RA-bin hypothesis filtering, sorted heap, Cohen's d and DOI detection."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .config import InstrumentConfig
from .first_level import pair_phase_residuals
from .geometry import HR_TO_RAD, alias_offset_bins, bin_center, fringe_period_ra_hr, ra_bin_of, wrap_phase

BOLTZMANN = 1.380649e-23
PLANCK = 6.62607015e-34

HEAP_DTYPE = np.dtype([
    ("rank", "i8"), ("abs_ddf", "f8"), ("bin", "i8"), ("d", "f8"), ("count", "i8"),
    ("id", "i8"), ("mjd", "f8"), ("f1_hz", "f8"),
    ("d_ew1", "f8"), ("d_ew2", "f8"), ("d_ddf", "f8"), ("cand", "i8"),
])

BIN_DTYPE = np.dtype([
    ("bin", "i8"), ("ra_hr", "f8"), ("p", "f8"), ("event_p", "f8"), ("count", "i8"),
    ("max_d", "f8"), ("median_d", "f8"), ("final_d", "f8"), ("count_d_gt_m2", "i8"),
])


# --------------------------------------------------------------------------
# exposure


@dataclass
class ExposureModel:
    """Per-bin exposure.

    ``p`` is the unmasked observing-time fraction per RA bin.  ``event_p``
    is the binomial probability that an AWGN heap record lands in a bin:
    records for bin ``k`` come from beams at ``k`` and its alias partners,
    so it is ``p`` summed over those partners (only where ``p_k > 0``) and
    renormalized.  It equals ``p`` when exposure is uniform.  Left as
    ``None`` it defaults to ``p``.
    """

    p: np.ndarray
    exposure_seconds: np.ndarray
    n_windows: int
    n_masked: int
    event_p: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.p < 0):
            raise ValueError("negative bin probability")
        if self.event_p is None:
            self.event_p = self.p

    @property
    def active_bins(self) -> int:
        return int(np.count_nonzero(self.p))


def alias_offset(config: InstrumentConfig) -> int:
    return alias_offset_bins(fringe_period_ra_hr(config.baseline_wavelengths, config.dec_deg), config.ra_bin_hr)


def build_exposure(mjd, beam_ra_hr, config: InstrumentConfig, masks=(), seconds_per_record: float | None = None) -> ExposureModel:
    """Per-bin unmasked observing time and its normalization ``p_k``.

    ``mjd`` and ``beam_ra_hr`` list every observed window (or trigger, with
    ``seconds_per_record`` set accordingly); each mask is any object with a
    ``contains(mjd, ra)`` method.
    """
    mjd = np.asarray(mjd, dtype=np.float64)
    ra = np.asarray(beam_ra_hr, dtype=np.float64)
    sec = config.integration_s if seconds_per_record is None else seconds_per_record
    masked = np.zeros(mjd.size, dtype=bool)
    for m in masks:
        masked |= np.asarray(m.contains(mjd, ra), dtype=bool)
    k = ra_bin_of(ra[~masked], config) if mjd.size else np.empty(0, np.int64)
    counts = np.bincount(k, minlength=config.ra_bins_per_day)
    exposure = counts * sec
    total = counts.sum()
    if total == 0:
        raise ValueError("zero total exposure")
    p = counts / total
    q = hypothesis_probability(p, alias_offset(config))
    return ExposureModel(p, exposure.astype(np.float64), int(mjd.size), int(masked.sum()), q)


def hypothesis_probability(p, alias: int) -> np.ndarray:
    """Event probability per bin from time fractions ``p`` and the alias offset."""
    p = np.asarray(p, dtype=np.float64)
    w = (p + np.roll(p, alias) + np.roll(p, -alias)) * (p > 0)
    tot = w.sum()
    if tot <= 0:
        raise ValueError("zero total exposure")
    return w / tot


# --------------------------------------------------------------------------
# phase filters


@dataclass(frozen=True)
class FilterOverrides:
    """Second-level knobs that diagnostics may replace.

    Windows are ``(lo, hi)`` bounds on the absolute residual.
    """

    tau_inst_s: float | None = None
    ew_window: tuple | None = None
    ddf_window: tuple | None = None
    phi_east: np.ndarray | None = field(default=None, compare=False)


def default_windows(config: InstrumentConfig):
    return (0.0, config.ew_phase_filter_rad), (0.0, config.ddf_phase_filter_rad)


def hypotheses(cands: np.ndarray, exposure: ExposureModel, config: InstrumentConfig):
    """RA-bin hypotheses per candidate: its beam bin and the two alias partners.

    Returns ``(cand_index, bin)`` arrays, skipping bins with zero exposure.
    """
    n = cands.size
    k0 = ra_bin_of(cands["beam_ra_hr"], config) if n else np.empty(0, np.int64)
    a = alias_offset(config)
    nb = config.ra_bins_per_day
    idx = np.concatenate([np.arange(n)] * 3)
    k = np.concatenate([k0, np.mod(k0 - a, nb), np.mod(k0 + a, nb)])
    ok = exposure.p[k] > 0
    return idx[ok], k[ok]


def hypothesis_hour_angle(beam_ra_hr, k, config: InstrumentConfig):
    return wrap_phase((np.asarray(beam_ra_hr) - bin_center(k, config)) * HR_TO_RAD)


def apply_phase_filters(cands: np.ndarray, k, config: InstrumentConfig, overrides: FilterOverrides | None = None):
    """Evaluate residuals against RA-bin hypotheses ``k`` (one per candidate).

    Returns ``(keep, d_ew1, d_ew2, d_ddf)``.
    """
    ov = overrides or FilterOverrides()
    ew_def, ddf_def = default_windows(config)
    ew = ov.ew_window or ew_def
    ddf = ov.ddf_window or ddf_def
    h = hypothesis_hour_angle(cands["beam_ra_hr"], k, config)
    d1, d2, dd = pair_phase_residuals(cands, h, config, tau_inst_s=ov.tau_inst_s, phi_east=ov.phi_east)
    a1, a2, ad = np.abs(d1), np.abs(d2), np.abs(dd)
    keep = (a1 >= ew[0]) & (a1 <= ew[1]) & (a2 >= ew[0]) & (a2 <= ew[1]) & (ad >= ddf[0]) & (ad <= ddf[1])
    return keep, d1, d2, dd


def window_overlap_warning(config: InstrumentConfig, ew_window, ddf_window) -> str | None:
    """Message when a modified window set shares positive measure with the defaults."""
    ew_def, ddf_def = default_windows(config)

    def overlap(a, b):
        return min(a[1], b[1]) - max(a[0], b[0])

    if overlap(ew_window, ew_def) > 0 and overlap(ddf_window, ddf_def) > 0:
        return (
            f"modified windows ew={tuple(ew_window)} ddf={tuple(ddf_window)} overlap the default "
            "acceptance region; the comparison is not between disjoint event sets"
        )
    return None


# --------------------------------------------------------------------------
# heap and Cohen's d


def build_sorted_heap(cands: np.ndarray, cand_index, k, d1, d2, dd) -> np.ndarray:
    """Order filtered (candidate, bin) records by ascending ``|d_ddf|``.

    Ties break by MJD, lower frequency, candidate id, then bin.
    """
    n = np.size(cand_index)
    out = np.zeros(n, HEAP_DTYPE)
    if n == 0:
        return out
    c = cands[cand_index]
    absd = np.abs(dd)
    order = np.lexsort((k, c["id"], c["f1_hz"], c["mjd"], absd))
    out["rank"] = np.arange(1, n + 1)
    out["abs_ddf"] = absd[order]
    out["bin"] = np.asarray(k)[order]
    out["id"] = c["id"][order]
    out["mjd"] = c["mjd"][order]
    out["f1_hz"] = c["f1_hz"][order]
    out["d_ew1"] = np.asarray(d1)[order]
    out["d_ew2"] = np.asarray(d2)[order]
    out["d_ddf"] = np.asarray(dd)[order]
    out["cand"] = np.asarray(cand_index)[order]
    return out


def _cumulative_counts(bins: np.ndarray) -> np.ndarray:
    """Running count of each record's bin up to and including the record."""
    n = bins.size
    if n == 0:
        return np.empty(0, np.int64)
    order = np.argsort(bins, kind="stable")
    sb = bins[order]
    first = np.concatenate([[True], sb[1:] != sb[:-1]])
    start = np.maximum.accumulate(np.where(first, np.arange(n), 0))
    c = np.empty(n, np.int64)
    c[order] = np.arange(n) - start + 1
    return c


def cohens_d(count, n, p):
    """``(C - n p) / sqrt(n p (1 - p))``."""
    count = np.asarray(count, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return (count - n * p) / np.sqrt(n * p * (1.0 - p))


def cohens_d_stream(heap: np.ndarray, exposure: ExposureModel) -> np.ndarray:
    """Fill ``count`` and ``d`` for every heap record (vectorized)."""
    h = heap.copy()
    if h.size == 0:
        return h
    p = exposure.event_p[h["bin"]]
    if np.any(p == 0):
        raise ValueError("heap record in a bin with zero exposure")
    c = _cumulative_counts(h["bin"])
    h["count"] = c
    h["d"] = cohens_d(c, h["rank"], p)
    return h


def cohens_d_incremental(heap: np.ndarray, exposure: ExposureModel) -> np.ndarray:
    """Reference fold over the heap, one record at a time."""
    counts: dict[int, int] = {}
    d = np.empty(heap.size)
    for i, rec in enumerate(heap):
        k = int(rec["bin"])
        p = float(exposure.event_p[k])
        if p == 0.0:
            raise ValueError("heap record in a bin with zero exposure")
        counts[k] = counts.get(k, 0) + 1
        n = float(rec["rank"])
        d[i] = (counts[k] - n * p) / math.sqrt(n * p * (1.0 - p))
    return d


def final_rank_d(heap: np.ndarray, exposure: ExposureModel) -> np.ndarray:
    """Per-bin d at the last heap rank (zero-count bins included)."""
    n = heap.size
    counts = np.bincount(heap["bin"], minlength=exposure.p.size)
    p = exposure.event_p
    out = np.full(p.size, np.nan)
    ok = (p > 0) & (p < 1)
    if n:
        out[ok] = cohens_d(counts[ok], n, p[ok])
    return out


def bin_summary(heap: np.ndarray, exposure: ExposureModel, config: InstrumentConfig) -> np.ndarray:
    nb = config.ra_bins_per_day
    out = np.zeros(nb, BIN_DTYPE)
    out["bin"] = np.arange(nb)
    out["ra_hr"] = bin_center(np.arange(nb), config)
    out["p"] = exposure.p
    out["event_p"] = exposure.event_p
    out["count"] = np.bincount(heap["bin"], minlength=nb)
    out["max_d"] = np.nan
    out["median_d"] = np.nan
    if heap.size:
        order = np.argsort(heap["bin"], kind="stable")
        b = heap["bin"][order]
        dv = heap["d"][order]
        ub, starts = np.unique(b, return_index=True)
        ends = np.append(starts[1:], b.size)
        out["max_d"][ub] = np.maximum.reduceat(dv, starts)
        out["median_d"][ub] = [np.median(dv[s:e]) for s, e in zip(starts, ends)]
        out["count_d_gt_m2"] = np.bincount(heap["bin"][heap["d"] > -2.0], minlength=nb)
    out["final_d"] = final_rank_d(heap, exposure)
    return out


def mean_count_per_bin(heap: np.ndarray, config: InstrumentConfig) -> float:
    return float(np.bincount(heap["bin"], minlength=config.ra_bins_per_day).mean())


# --------------------------------------------------------------------------
# DOIs


@dataclass
class DoiReport:
    central_bin: int
    center_ra_hr: float
    total_count: int
    bin_count: int
    adjacent_counts: tuple
    alias_bins: tuple
    alias_counts: tuple
    alias_max_d: tuple
    median_d: float
    max_d: float
    final_d: float
    frac_d_gt3: float
    frac_d_lt0: float
    count_threshold: int
    dispersion: float = 1.0
    notes: str = ""


def count_dispersion(heap: np.ndarray) -> float:
    """Variance inflation of per-bin counts from records that arrive together.

    Pairs built from one window share pulses and often pass the filters
    together, so a bin receives records in clumps.  For clumps of size ``m``
    arriving independently the count variance is ``sum(m^2) / sum(m)`` times
    the binomial one (the design effect); clumps are the records sharing a
    window and a bin.
    """
    if heap.size == 0:
        return 1.0
    order = np.lexsort((heap["bin"], heap["mjd"]))
    mj = heap["mjd"][order]
    bn = heap["bin"][order]
    new = np.concatenate([[True], (mj[1:] != mj[:-1]) | (bn[1:] != bn[:-1])])
    m = np.diff(np.append(np.flatnonzero(new), heap.size)).astype(np.float64)
    return float(max(1.0, (m * m).sum() / m.sum()))


def count_guard(n_records: int, p_merged, n_active: int, alpha: float, m_min: int, dispersion: float = 1.0):
    """Smallest count that is both ``>= m_min`` and family-wise significant.

    With ``dispersion > 1`` the binomial critical value is widened to a
    quasi-binomial normal bound with the inflated variance.
    """
    q = alpha / max(n_active, 1)
    p = np.clip(np.asarray(p_merged, dtype=np.float64), 0.0, 1.0)
    crit = np.where(p > 0, sps.binom.isf(q, n_records, p) + 1, np.inf)
    if dispersion > 1.0:
        mu = n_records * p
        quasi = np.floor(mu + sps.norm.isf(q) * np.sqrt(dispersion * mu * (1.0 - p))) + 1
        crit = np.where(p > 0, np.maximum(crit, quasi), np.inf)
    return np.maximum(crit, m_min)


def detect_dois(heap: np.ndarray, exposure: ExposureModel, config: InstrumentConfig) -> list:
    """Automated direction-of-interest rule.

    A bin qualifies when its events, merged with those of bins ``k +/- 1``
    (``doi_merge_adjacent``), number at least the count guard, have median
    d at or above ``doi_median_d`` and include at most ``doi_max_low_fraction``
    with d below zero.  Runs of adjacent qualifying bins report once, at the
    bin with the largest merged count.
    """
    nb = config.ra_bins_per_day
    n = heap.size
    if n == 0:
        return []
    counts = np.bincount(heap["bin"], minlength=nb)
    p = exposure.event_p
    if config.doi_merge_adjacent:
        merged = counts + np.roll(counts, 1) + np.roll(counts, -1)
        p_m = p + np.roll(p, 1) + np.roll(p, -1)
    else:
        merged = counts
        p_m = p
    phi = count_dispersion(heap)
    guard = count_guard(n, p_m, exposure.active_bins, config.doi_family_alpha, config.doi_min_events, phi)
    cand_bins = np.flatnonzero(merged >= guard)
    if cand_bins.size == 0:
        return []
    order = np.argsort(heap["bin"], kind="stable")
    sb = heap["bin"][order]
    sd = heap["d"][order]
    lo = np.searchsorted(sb, np.arange(nb), side="left")
    hi = np.searchsorted(sb, np.arange(nb), side="right")

    def events(k):
        ks = [(k - 1) % nb, k, (k + 1) % nb] if config.doi_merge_adjacent else [k]
        return np.concatenate([sd[lo[j]:hi[j]] for j in ks])

    qualifying = []
    for k in cand_bins:
        ev = events(k)
        if ev.size == 0:
            continue
        if np.median(ev) >= config.doi_median_d and np.mean(ev < 0) <= config.doi_max_low_fraction:
            qualifying.append(int(k))
    if not qualifying:
        return []
    # cluster circularly adjacent bins
    qualifying.sort()
    clusters = [[qualifying[0]]]
    for k in qualifying[1:]:
        if k - clusters[-1][-1] <= 1:
            clusters[-1].append(k)
        else:
            clusters.append([k])
    if len(clusters) > 1 and clusters[0][0] == 0 and clusters[-1][-1] == nb - 1:
        clusters[0] = clusters.pop() + clusters[0]
    fin = final_rank_d(heap, exposure)
    a = alias_offset(config)
    reports = []
    for cl in clusters:
        k = max(cl, key=lambda j: (merged[j], np.median(events(j))))
        ev = events(k)
        own = sd[lo[k]:hi[k]]
        al = ((k - a) % nb, (k + a) % nb)
        al_max = tuple(float(sd[lo[j]:hi[j]].max()) if hi[j] > lo[j] else float("nan") for j in al)
        reports.append(DoiReport(
            central_bin=int(k),
            center_ra_hr=float(bin_center(k, config)),
            total_count=int(merged[k]),
            bin_count=int(counts[k]),
            adjacent_counts=(int(counts[(k - 1) % nb]), int(counts[(k + 1) % nb])),
            alias_bins=tuple(int(j) for j in al),
            alias_counts=tuple(int(counts[j]) for j in al),
            alias_max_d=al_max,
            median_d=float(np.median(ev)),
            max_d=float(own.max()) if own.size else float("nan"),
            final_d=float(fin[k]),
            frac_d_gt3=float(np.mean(ev > 3.0)),
            frac_d_lt0=float(np.mean(ev < 0.0)),
            count_threshold=int(guard[k]),
            dispersion=phi,
            notes=f"cluster bins {cl[0]}-{cl[-1]}" if len(cl) > 1 else "",
        ))
    return reports


def doi_strength(heap: np.ndarray, exposure: ExposureModel, k: int, config: InstrumentConfig, reach: int = 1) -> float:
    """Largest final-rank d within ``reach`` bins of ``k`` (``-inf`` if none)."""
    fin = final_rank_d(heap, exposure)
    nb = config.ra_bins_per_day
    vals = fin[[(k + j) % nb for j in range(-reach, reach + 1)]]
    vals = vals[np.isfinite(vals)]
    return float(vals.max()) if vals.size else float("-inf")


# --------------------------------------------------------------------------
# second level driver


@dataclass
class SecondLevelResult:
    heap: np.ndarray
    bins: np.ndarray
    dois: list
    exposure: ExposureModel
    n_candidates: int
    n_hypotheses: int
    overrides: dict
    warnings: list = field(default_factory=list)


def run_second_level(cands: np.ndarray, exposure: ExposureModel, config: InstrumentConfig, overrides: FilterOverrides | None = None) -> SecondLevelResult:
    ov = overrides or FilterOverrides()
    ci, k = hypotheses(cands, exposure, config)
    sub = cands[ci]
    sub_ov = ov
    if ov.phi_east is not None:
        sub_ov = FilterOverrides(ov.tau_inst_s, ov.ew_window, ov.ddf_window, ov.phi_east[ci])
    keep, d1, d2, dd = apply_phase_filters(sub, k, config, sub_ov)
    heap = build_sorted_heap(cands, ci[keep], k[keep], d1[keep], d2[keep], dd[keep])
    heap = cohens_d_stream(heap, exposure)
    warn = []
    if ov.ew_window is not None or ov.ddf_window is not None:
        ew_def, ddf_def = default_windows(config)
        msg = window_overlap_warning(config, ov.ew_window or ew_def, ov.ddf_window or ddf_def)
        if msg:
            warnings.warn(msg)
            warn.append(msg)
    desc = {
        "tau_inst_s": config.tau_inst_s if ov.tau_inst_s is None else ov.tau_inst_s,
        "ew_window": list(ov.ew_window or default_windows(config)[0]),
        "ddf_window": list(ov.ddf_window or default_windows(config)[1]),
        "phase_noise": ov.phi_east is not None,
    }
    return SecondLevelResult(
        heap, bin_summary(heap, exposure, config), detect_dois(heap, exposure, config),
        exposure, int(cands.size), int(k.size), desc, warn,
    )


# --------------------------------------------------------------------------
# closed-form helpers


def bayes_update(pr_t: float, pr_b_given_t: float, pr_b: float) -> float:
    """``Pr(T|B) = Pr(T) Pr(B|T) / Pr(B)``."""
    for name, v in (("pr_t", pr_t), ("pr_b_given_t", pr_b_given_t), ("pr_b", pr_b)):
        if not 0.0 < v <= 1.0:
            raise ValueError(f"{name} must lie in (0, 1]")
    num = pr_t * pr_b_given_t
    if num > pr_b * (1.0 + 1e-12):
        raise ValueError("Pr(T) Pr(B|T) exceeds Pr(B)")
    return num / pr_b


def photon_count(antenna_temp_k: float, freq_hz: float, bin_hz: float = 3.7, integration_s: float = 0.27) -> float:
    """Thermal photons per time-frequency cell in the Rayleigh-Jeans limit.

    ``N = k T / (h nu)`` per unit time-bandwidth product; the cell product
    ``bin_hz * integration_s`` is taken as one (it is 0.999 for the default
    instrument).
    """
    if antenna_temp_k <= 0 or freq_hz <= 0:
        raise ValueError("temperature and frequency must be positive")
    ratio = PLANCK * freq_hz / (BOLTZMANN * antenna_temp_k)
    if ratio >= 1e-3:
        raise ValueError(f"h nu / k T = {ratio:.3g} is not small; the thermal limit does not hold")
    if abs(bin_hz * integration_s - 1.0) > 0.01:
        raise ValueError("cell time-bandwidth product must be 1 within 1%")
    return 1.0 / ratio


def _circle_intervals(window):
    lo, hi = window
    return [(-hi, -lo), (lo, hi)]


def _overlap_on_circle(ivs_a, ivs_b, shift):
    """Length of ``A`` intersected with ``B + shift`` on the circle of length 2 pi."""
    total = 0.0
    for a0, a1 in ivs_a:
        for b0, b1 in ivs_b:
            for wrap in (-2 * np.pi, 0.0, 2 * np.pi):
                lo = np.maximum(a0, b0 + shift + wrap)
                hi = np.minimum(a1, b1 + shift + wrap)
                total = total + np.clip(hi - lo, 0.0, None)
    return total


def uniform_pass_probability(ew_window, ddf_window, n_grid: int = 200001) -> float:
    """Chance that two independent uniform residuals clear the joint windows.

    The difference of two residuals restricted to the per-pulse window has
    density given by the circular self-overlap of that window; integrating
    it over the pair window gives the probability.  The midpoint rule on the
    one-dimensional difference is accurate to about 1e-5.
    """
    ivs = _circle_intervals(ew_window)
    edges = np.linspace(-np.pi, np.pi, n_grid + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    dens = _overlap_on_circle(ivs, ivs, mid) / (2 * np.pi) ** 2
    ad = np.abs(mid)
    ok = (ad >= ddf_window[0]) & (ad <= ddf_window[1])
    return float(np.sum(dens[ok]) * (2 * np.pi / n_grid))
