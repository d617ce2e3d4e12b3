"""Plot-data tables, one delimited-text file per figure class.

Each class holds the data behind one plot.  Every file carries the usual
versioned header; variant-dependent classes include a ``variant`` column so
one file covers all variants.

=======  ==================================================================
class    columns
=======  ==================================================================
fig2     doi_bin, panel, bin, ra_hr, rank, d, alias_bin, alias_final_d
fig3     bin, ra_hr, count_d_gt_m2, count (events with d > -2.0 per bin)
fig4     variant, bin, ra_hr, rank, d (every heap event)
fig10    variant, bin, ra_hr, rank, d and the associated measurements
fig19    record, mjd, ra_hr (heap candidates, then Sun-mask corners)
fig20    bin, ra_hr, p, event_p
fig21    bin, ra_hr, final_d, wide_east, wide_west, vis_db (per-bin means)
fig23    variant, bin, ra_hr, count (baseline)
fig24    variant, bin, ra_hr, count (phase-noise variants)
fig25    bin, ra_hr, final_d_default, final_d_modified
fig26    trigger, window, mjd, beam_ra_hr, vis_db above the threshold
=======  ==================================================================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import InstrumentConfig
from .diagnostics import high_visibility_scan
from .geometry import bin_center, ra_bin_of
from .io import write_table
from .stats import ExposureModel, alias_offset, final_rank_d

FIGURE_CLASSES = ("fig2", "fig3", "fig4", "fig10", "fig19", "fig20", "fig21", "fig23", "fig24", "fig25", "fig26")

ASSOC_FIELDS = (
    "mjd", "f1_hz", "f2_hz", "delta_f_hz", "snr_e1", "snr_w1", "snr_e2", "snr_w2",
    "east_power_954", "west_power_954", "east_power_wide", "west_power_wide",
    "vis_db", "log10_df_like", "log10_snr_pulse1", "log10_snr_pulse2", "log10_snr_pair", "rfi_margin",
)


@dataclass
class AnalysisBundle:
    """Everything the figure emitters read."""

    config: InstrumentConfig
    candidates: np.ndarray
    windows: np.ndarray
    exposure: ExposureModel
    variants: dict
    sun_mask: np.ndarray | None = None
    highvis_threshold_db: float = 144.0
    extra: dict = field(default_factory=dict)

    def variant(self, label):
        if label not in self.variants:
            raise KeyError(f"figure needs the {label!r} variant")
        return self.variants[label]


def _dois_rows(b: AnalysisBundle) -> list:
    cfg = b.config
    nb = cfg.ra_bins_per_day
    a = alias_offset(cfg)
    res = b.variant("baseline")
    fin = final_rank_d(res.heap, res.exposure)
    rows = []
    order = np.argsort(res.heap["bin"], kind="stable")
    hb = res.heap[order]
    for doi in res.dois:
        k0 = doi.central_bin
        for panel, centre in (("central", k0), ("alias_minus", (k0 - a) % nb), ("alias_plus", (k0 + a) % nb)):
            for j in (-1, 0, 1):
                k = (centre + j) % nb
                lo, hi = np.searchsorted(hb["bin"], [k, k + 1])
                partner = (k - a) % nb if panel != "alias_minus" else (k + a) % nb
                for e in hb[lo:hi]:
                    rows.append({
                        "doi_bin": k0, "panel": panel, "bin": k, "ra_hr": float(bin_center(k, cfg)),
                        "rank": int(e["rank"]), "d": float(e["d"]),
                        "alias_bin": partner, "alias_final_d": float(fin[partner]),
                    })
    return rows


def _heap_rows(b: AnalysisBundle, labels, assoc: bool = False) -> list:
    rows = []
    for label in labels:
        h = b.variant(label).heap
        ra = bin_center(h["bin"], b.config)
        extra = b.candidates[h["cand"]] if assoc else None
        for i in range(h.size):
            r = {"variant": label, "bin": int(h["bin"][i]), "ra_hr": float(ra[i]), "rank": int(h["rank"][i]), "d": float(h["d"][i])}
            if assoc:
                for f in ASSOC_FIELDS:
                    r[f] = float(extra[f][i])
            rows.append(r)
    return rows


def _count_rows(b: AnalysisBundle, labels) -> list:
    nb = b.config.ra_bins_per_day
    ra = bin_center(np.arange(nb), b.config)
    rows = []
    for label in labels:
        c = np.bincount(b.variant(label).heap["bin"], minlength=nb)
        rows.extend({"variant": label, "bin": k, "ra_hr": float(ra[k]), "count": int(c[k])} for k in range(nb))
    return rows


def _per_bin_window_means(b: AnalysisBundle):
    nb = b.config.ra_bins_per_day
    w = b.windows
    k = ra_bin_of(w["beam_ra_hr"], b.config) if w.size else np.empty(0, np.int64)
    n = np.bincount(k, minlength=nb).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return {col: np.bincount(k, weights=w[src], minlength=nb) / n
                for col, src in (("wide_east", "wide_east"), ("wide_west", "wide_west"), ("vis_db", "vis_db"))}


def figure_table(bundle: AnalysisBundle, which: str):
    """Rows (structured array or list of dicts) for one figure class."""
    b = bundle
    cfg = b.config
    nb = cfg.ra_bins_per_day
    ks = np.arange(nb)
    ra = bin_center(ks, cfg)
    if which == "fig2":
        return _dois_rows(b)
    if which == "fig3":
        s = b.variant("baseline").bins
        return [{"bin": int(k), "ra_hr": float(ra[k]), "count_d_gt_m2": int(s["count_d_gt_m2"][k]), "count": int(s["count"][k])} for k in ks]
    if which == "fig4":
        return _heap_rows(b, list(b.variants))
    if which == "fig10":
        return _heap_rows(b, list(b.variants), assoc=True)
    if which == "fig19":
        h = b.variant("baseline").heap
        c = b.candidates[h["cand"]]
        rows = [{"record": "candidate", "mjd": float(m), "ra_hr": float(r)} for m, r in zip(c["mjd"], c["beam_ra_hr"])]
        if b.sun_mask is not None:
            for m in b.sun_mask:
                for mjd, r in ((m["mjd_start"], m["ra_lo"]), (m["mjd_start"], m["ra_hi"]),
                               (m["mjd_end"], m["ra_hi_end"]), (m["mjd_end"], m["ra_lo_end"])):
                    rows.append({"record": "mask_corner", "mjd": float(mjd), "ra_hr": float(np.mod(r, 24.0))})
        return rows
    if which == "fig20":
        return [{"bin": int(k), "ra_hr": float(ra[k]), "p": float(b.exposure.p[k]), "event_p": float(b.exposure.event_p[k])} for k in ks]
    if which == "fig21":
        s = b.variant("baseline").bins
        means = _per_bin_window_means(b)
        return [{"bin": int(k), "ra_hr": float(ra[k]), "final_d": float(s["final_d"][k]),
                 "wide_east": float(means["wide_east"][k]), "wide_west": float(means["wide_west"][k]),
                 "vis_db": float(means["vis_db"][k])} for k in ks]
    if which == "fig23":
        return _count_rows(b, ["baseline"])
    if which == "fig24":
        labels = [l for l in b.variants if l.startswith("phase_noise")]
        if not labels:
            raise KeyError("figure needs at least one phase_noise variant")
        return _count_rows(b, labels)
    if which == "fig25":
        base = b.variant("baseline").bins["final_d"]
        mod = b.variant("modified_filter").bins["final_d"]
        return [{"bin": int(k), "ra_hr": float(ra[k]), "final_d_default": float(base[k]), "final_d_modified": float(mod[k])} for k in ks]
    if which == "fig26":
        return high_visibility_scan(b.windows, b.highvis_threshold_db)
    raise ValueError(f"unknown figure class {which!r}; choose from {', '.join(FIGURE_CLASSES)}")


_EMPTY_COLUMNS = {
    "fig2": ["doi_bin", "panel", "bin", "ra_hr", "rank", "d", "alias_bin", "alias_final_d"],
    "fig4": ["variant", "bin", "ra_hr", "rank", "d"],
    "fig10": ["variant", "bin", "ra_hr", "rank", "d", *ASSOC_FIELDS],
    "fig19": ["record", "mjd", "ra_hr"],
}


def emit_figure_data(bundle: AnalysisBundle, which, outdir) -> list:
    """Write one ``<class>.csv`` per requested figure class; return the paths."""
    names = [which] if isinstance(which, str) else list(which)
    for w in names:
        if w not in FIGURE_CLASSES:
            raise ValueError(f"unknown figure class {w!r}; choose from {', '.join(FIGURE_CLASSES)}")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for w in names:
        rows = figure_table(bundle, w)
        path = out / f"{w}.csv"
        if isinstance(rows, list) and not rows:
            path.write_text(f"# pulsepair {w} v1\n" + ",".join(_EMPTY_COLUMNS.get(w, ["empty"])) + "\n")
        else:
            write_table(path, rows, w)
        paths.append(path)
    return paths
