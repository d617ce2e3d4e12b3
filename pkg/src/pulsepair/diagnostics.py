"""Falsification variants and the high-visibility scan.

Each variant re-runs second level over the same first-level candidates
with exactly one declared change: east phases replaced by seeded uniform
noise, a different instrument delay, or different phase-filter windows.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .config import InstrumentConfig
from .stats import (
    ExposureModel,
    FilterOverrides,
    SecondLevelResult,
    default_windows,
    doi_strength,
    run_second_level,
)

VARIANT_KINDS = ("baseline", "phase_noise", "tau_zero", "modified_filter")

HIGHVIS_DTYPE = np.dtype([
    ("trigger", "i8"), ("window", "i8"), ("mjd", "f8"), ("beam_ra_hr", "f8"), ("vis_db", "f8"),
])


def modified_windows_default():
    """Complement of the default pair window, per-pulse window opened fully."""
    return (0.0, np.pi), (0.80, np.pi)


@dataclass(frozen=True)
class TestVariant:
    __test__ = False  # keep pytest from collecting this class

    kind: str = "baseline"
    seed: int | None = None
    tau_override_s: float = 0.0
    filter_windows: tuple | None = None

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown variant kind {self.kind!r}")
        if self.kind == "phase_noise" and (self.seed is None or self.seed < 1):
            raise ValueError("phase_noise needs a seed >= 1")

    @property
    def label(self) -> str:
        if self.kind == "phase_noise":
            return f"phase_noise_{self.seed}"
        if self.kind == "tau_zero" and self.tau_override_s != 0.0:
            return f"tau_{self.tau_override_s:g}"
        return self.kind

    def declared_override(self) -> dict:
        if self.kind == "phase_noise":
            return {"phase_noise_seed": self.seed}
        if self.kind == "tau_zero":
            return {"tau_inst_s": self.tau_override_s}
        if self.kind == "modified_filter":
            ew, ddf = self.filter_windows or modified_windows_default()
            return {"ew_window": list(ew), "ddf_window": list(ddf)}
        return {}

    def overrides(self, cands: np.ndarray) -> FilterOverrides:
        if self.kind == "phase_noise":
            return FilterOverrides(phi_east=random_east_phases(cands["id"], self.seed))
        if self.kind == "tau_zero":
            return FilterOverrides(tau_inst_s=self.tau_override_s)
        if self.kind == "modified_filter":
            ew, ddf = self.filter_windows or modified_windows_default()
            return FilterOverrides(ew_window=tuple(ew), ddf_window=tuple(ddf))
        return FilterOverrides()


def parse_variants(text: str) -> list:
    """Parse ``baseline,phase_noise:1..4,tau_zero,modified_filter``.

    ``phase_noise:a..b`` expands to one variant per seed; ``phase_noise:3``
    is a single seed; ``tau_zero:<seconds>`` sets a non-zero override.
    """
    out = []
    for tok in filter(None, (t.strip() for t in text.split(","))):
        name, _, arg = tok.partition(":")
        if name == "phase_noise":
            m = re.fullmatch(r"(\d+)(?:\.\.(\d+))?", arg or "1")
            if not m:
                raise ValueError(f"bad phase_noise seeds {arg!r}")
            a = int(m.group(1))
            b = int(m.group(2) or a)
            out.extend(TestVariant("phase_noise", seed=s) for s in range(a, b + 1))
        elif name == "tau_zero":
            out.append(TestVariant("tau_zero", tau_override_s=float(arg) if arg else 0.0))
        elif name in ("baseline", "modified_filter"):
            if arg:
                raise ValueError(f"{name} takes no argument")
            out.append(TestVariant(name))
        else:
            raise ValueError(f"unknown variant {name!r}")
    return out


# --------------------------------------------------------------------------
# seeded phase noise


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def random_east_phases(ids, seed: int) -> np.ndarray:
    """Uniform phases on (-pi, pi], one per (candidate id, pulse), fixed by ``seed``.

    Returns an ``(n, 2)`` array.  The value for a given id never depends on
    which other candidates are present.
    """
    ids = np.asarray(ids, dtype=np.int64).astype(np.uint64)
    out = np.empty((ids.size, 2))
    with np.errstate(over="ignore"):
        base = _splitmix64(_splitmix64(np.full(ids.size, seed, dtype=np.uint64)) ^ ids)
        for j in range(2):
            h = _splitmix64(base + np.uint64(j + 1))
            u = (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
            out[:, j] = np.pi - 2.0 * np.pi * u
    return out


def phase_noise_variant(candidates: np.ndarray, seed: int) -> np.ndarray:
    """Copy of the candidates with both east phases replaced by seeded noise."""
    if seed < 1:
        raise ValueError("seed must be >= 1")
    c = candidates.copy()
    ph = random_east_phases(c["id"], seed)
    c["phi_e1"] = ph[:, 0]
    c["phi_e2"] = ph[:, 1]
    return c


# --------------------------------------------------------------------------
# variant runs


@dataclass
class VariantResult:
    variant: TestVariant
    result: SecondLevelResult
    audit: dict = field(default_factory=dict)


def run_variant(candidates: np.ndarray, exposure: ExposureModel, config: InstrumentConfig, variant: TestVariant) -> VariantResult:
    res = run_second_level(candidates, exposure, config, variant.overrides(candidates))
    audit = {
        "config_digest": config.digest(),
        "variant": variant.label,
        "declared_override": variant.declared_override(),
        "effective": res.overrides,
    }
    return VariantResult(variant, res, audit)


def tau_override_variant(candidates, exposure, config: InstrumentConfig, tau_s: float = 0.0) -> VariantResult:
    return run_variant(candidates, exposure, config, TestVariant("tau_zero", tau_override_s=tau_s))


def modified_filter_variant(candidates, exposure, config: InstrumentConfig, windows=None) -> VariantResult:
    return run_variant(candidates, exposure, config, TestVariant("modified_filter", filter_windows=windows))


def effective_settings(config: InstrumentConfig, variant: TestVariant) -> dict:
    """Second-level settings in force for a variant (used by the audit)."""
    ew, ddf = default_windows(config)
    s = {"tau_inst_s": config.tau_inst_s, "ew_window": list(ew), "ddf_window": list(ddf), "phase_noise_seed": None}
    s.update(variant.declared_override())
    return s


def audit_differences(config: InstrumentConfig, variant: TestVariant) -> set:
    """Keys whose effective value differs from baseline."""
    base = effective_settings(config, TestVariant("baseline"))
    var = effective_settings(config, variant)
    return {k for k in base if base[k] != var[k]}


# --------------------------------------------------------------------------
# classification and summaries


def classify_source(baseline: SecondLevelResult, modified: SecondLevelResult, k: int, config: InstrumentConfig) -> dict:
    """RFI-like when the modified-filter strength matches or beats the default."""
    s_def = doi_strength(baseline.heap, baseline.exposure, k, config)
    s_mod = doi_strength(modified.heap, modified.exposure, k, config)
    return {"bin": int(k), "default_strength": s_def, "modified_strength": s_mod, "rfi_like": bool(s_mod >= s_def)}


def comparison_rows(results: dict) -> list:
    """One summary row per variant with DOI deltas against the baseline."""
    base = results.get("baseline")
    base_bins = {d.central_bin for d in base.result.dois} if base else set()
    rows = []
    for label, vr in results.items():
        bins = {d.central_bin for d in vr.result.dois}
        rows.append({
            "variant": label,
            "heap_records": int(vr.result.heap.size),
            "n_dois": len(bins),
            "doi_bins": " ".join(str(b) for b in sorted(bins)),
            "gained": " ".join(str(b) for b in sorted(bins - base_bins)),
            "lost": " ".join(str(b) for b in sorted(base_bins - bins)),
            "config_digest": vr.audit.get("config_digest", ""),
            "override": str(vr.audit.get("declared_override", {})),
        })
    return rows


def doi_count_test(counts_a, counts_b) -> float:
    """Exact conditional test that two sets of runs share one DOI rate.

    Given the pooled total, the count in ``a`` is binomial with probability
    ``n_a / (n_a + n_b)`` under equal rates; returns the two-sided p-value
    (1 when no DOIs occur at all).
    """
    a = int(np.sum(counts_a))
    b = int(np.sum(counts_b))
    na, nb = len(counts_a), len(counts_b)
    if a + b == 0:
        return 1.0
    return float(sps.binomtest(a, a + b, na / (na + nb)).pvalue)


def high_visibility_scan(windows: np.ndarray, threshold_db_rel: float = 144.0) -> np.ndarray:
    """Windows with ``10 log10 |V|`` above the threshold."""
    sel = windows[windows["vis_db"] > threshold_db_rel]
    out = np.empty(sel.size, HIGHVIS_DTYPE)
    for name in HIGHVIS_DTYPE.names:
        out[name] = sel[name]
    return out
