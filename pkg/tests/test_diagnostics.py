import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from pulsepair.diagnostics import (
    TestVariant,
    audit_differences,
    classify_source,
    comparison_rows,
    doi_count_test,
    high_visibility_scan,
    modified_filter_variant,
    parse_variants,
    phase_noise_variant,
    random_east_phases,
    run_variant,
    tau_override_variant,
)
from pulsepair.first_level import band_phase_sum
from pulsepair.geometry import beam_ra_at, ra_bin_of, ra_distance_hr
from pulsepair.pipeline import run_first_level
from pulsepair.scenario import DOI_RA_HR, BroadbandSpec, Scenario, SunSpec, linear_sun_table
from pulsepair.stats import uniform_pass_probability


# variant parsing ---------------------------------------------------------


def test_parse_variants_expands_seed_ranges():
    v = parse_variants("baseline,phase_noise:1..4,tau_zero,modified_filter")
    assert [x.label for x in v] == ["baseline", "phase_noise_1", "phase_noise_2", "phase_noise_3",
                                    "phase_noise_4", "tau_zero", "modified_filter"]
    assert parse_variants("phase_noise:7")[0].seed == 7
    assert parse_variants("tau_zero:-5e-8")[0].tau_override_s == -5e-8


@pytest.mark.parametrize("bad", ["bogus", "phase_noise:x", "baseline:3", "phase_noise:0"])
def test_parse_variants_rejects(bad):
    with pytest.raises(ValueError):
        parse_variants(bad)


def test_variant_kind_checked():
    with pytest.raises(ValueError):
        TestVariant("shuffle")


# seeded phase noise ------------------------------------------------------


def test_random_phases_are_fixed_per_id():
    ids = np.arange(1000) * 7919
    a = random_east_phases(ids, 3)
    b = random_east_phases(ids[::-1], 3)[::-1]
    assert np.array_equal(a, b)
    assert np.array_equal(random_east_phases(ids[10:20], 3), a[10:20])
    assert not np.array_equal(a, random_east_phases(ids, 4))


def test_random_phases_uniform():
    ph = random_east_phases(np.arange(200000), 1)
    assert np.all((ph > -np.pi) & (ph <= np.pi))
    for j in range(2):
        assert stats.kstest(ph[:, j], stats.uniform(-np.pi, 2 * np.pi).cdf).pvalue > 0.001
    # the two pulses of a pair are independent
    assert abs(np.corrcoef(ph[:, 0], ph[:, 1])[0, 1]) < 0.01


def test_phase_noise_variant_replaces_only_east(short_null):
    c = short_null.first.candidates
    v = phase_noise_variant(c, 2)
    assert np.array_equal(v["phi_w1"], c["phi_w1"])
    assert not np.array_equal(v["phi_e1"], c["phi_e1"])
    with pytest.raises(ValueError):
        phase_noise_variant(c, 0)


@given(st.integers(1, 2 ** 40), st.integers(1, 1000))
def test_random_phases_deterministic(i, seed):
    assert np.array_equal(random_east_phases([i], seed), random_east_phases([i], seed))


# audit -------------------------------------------------------------------


@pytest.mark.parametrize("text, key", [
    ("phase_noise:1", "phase_noise_seed"),
    ("tau_zero", "tau_inst_s"),
])
def test_audit_single_declared_difference(text, key, cfg):
    (v,) = parse_variants(text)
    assert audit_differences(cfg, v) == {key}


def test_audit_modified_filter_changes_only_windows(cfg):
    d = audit_differences(cfg, TestVariant("modified_filter"))
    assert d == {"ew_window", "ddf_window"}  # one declared override: the window pair
    assert audit_differences(cfg, TestVariant("baseline")) == set()


def test_variant_runs_record_audit(short_null, cfg):
    for label, vr in short_null.variants.items():
        assert vr.audit["config_digest"] == cfg.digest()
        assert vr.audit["variant"] == label
        eff = vr.result.overrides
        if label == "tau_zero":
            assert eff["tau_inst_s"] == 0.0
        else:
            assert eff["tau_inst_s"] == cfg.tau_inst_s
        assert eff["phase_noise"] == label.startswith("phase_noise")


def test_comparison_rows(short_null):
    rows = comparison_rows(short_null.variants)
    assert [r["variant"] for r in rows] == list(short_null.variants)
    base = rows[0]
    assert base["gained"] == base["lost"] == ""
    assert all(r["heap_records"] >= 0 for r in rows)


def test_overlapping_modified_windows_warn(short_null, cfg):
    c = short_null.excision.candidates
    with pytest.warns(UserWarning, match="overlap"):
        vr = modified_filter_variant(c, short_null.exposure, cfg, windows=((0.0, 0.5), (0.0, 1.0)))
    assert vr.result.warnings
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        modified_filter_variant(c, short_null.exposure, cfg)


# pass rate under phase noise ---------------------------------------------


def test_phase_noise_pass_rate_matches_window_measure(short_null, cfg):
    c = short_null.excision.candidates
    hits = hyp = 0
    for seed in range(1, 5):
        vr = run_variant(c, short_null.exposure, cfg, TestVariant("phase_noise", seed=seed))
        hits += vr.result.heap.size
        hyp += vr.result.n_hypotheses
    p = uniform_pass_probability((0.0, cfg.ew_phase_filter_rad), (0.0, cfg.ddf_phase_filter_rad))
    assert p == pytest.approx((0.2 / (2 * math.pi)) ** 2, rel=1e-4)
    assert abs(hits - hyp * p) < 4 * math.sqrt(hyp * p)


def test_modified_filter_pass_rate_on_noise(short_null, cfg):
    vr = short_null.variants["modified_filter"]
    c = short_null.excision.candidates
    p = uniform_pass_probability((0.0, math.pi), (0.8, math.pi))
    n = vr.result.n_hypotheses
    assert abs(vr.result.heap.size - n * p) < 5 * math.sqrt(n * p * (1 - p)) * 3  # pairs share pulses
    assert c.size > 0


# exact count test --------------------------------------------------------


def test_doi_count_test_cases():
    assert doi_count_test([0, 0, 0, 0], [0, 0, 0, 0]) == 1.0
    assert doi_count_test([2, 1], [1, 2]) == pytest.approx(1.0)
    assert doi_count_test([0, 0, 0, 0], [5, 6, 4, 5]) < 1e-5
    # oracle: binomial two-sided test on the pooled count
    assert doi_count_test([3], [1, 0, 1]) == pytest.approx(stats.binomtest(3, 5, 0.25).pvalue)


def test_phase_noise_dois_match_null_counts(short_null):
    noise = [len(v.result.dois) for k, v in short_null.variants.items() if k.startswith("phase_noise")]
    null = [len(short_null.baseline.dois)] * len(noise)
    assert doi_count_test(noise, null) > 0.05


# source contrasts --------------------------------------------------------


def test_variants_remove_source_doi(short_source, cfg):
    k0 = ra_bin_of(DOI_RA_HR, cfg)
    base = [d.central_bin for d in short_source.baseline.dois]
    assert any(abs(b - k0) <= 1 for b in base)
    assert short_source.variants["phase_noise_1"].result.dois == []
    # without the instrument delay the source bin loses its DOI
    tz = [d.central_bin for d in short_source.variants["tau_zero"].result.dois]
    assert not any(abs(b - k0) <= 1 for b in tz)


def test_coherent_source_not_rfi_like(short_source, cfg):
    k0 = ra_bin_of(DOI_RA_HR, cfg)
    cl = classify_source(short_source.baseline, short_source.variants["modified_filter"].result, k0, cfg)
    assert not cl["rfi_like"]
    assert cl["default_strength"] > cl["modified_strength"]


def test_tau_override_helper_matches_variant(short_source, cfg):
    c = short_source.excision.candidates
    a = tau_override_variant(c, short_source.exposure, cfg)
    b = short_source.variants["tau_zero"]
    assert np.array_equal(a.result.heap, b.result.heap)


# high-visibility scan ----------------------------------------------------


def test_highvis_finds_broadband_injection(cfg):
    t0 = 60500.0
    bb = BroadbandSpec(t0 + 0.004, t0 + 0.006, 0.0, 1.0, 0.0)
    sc = Scenario(cfg, [[t0, t0 + 0.01]], seed=2, broadband=[bb])
    first = run_first_level(sc)
    w = first.windows
    rows = high_visibility_scan(w, 50.0)
    inside = (w["mjd"] >= bb.mjd_start) & (w["mjd"] < bb.mjd_end)
    assert rows.size == inside.sum() > 0
    assert np.array_equal(rows["mjd"], w["mjd"][inside])
    assert np.allclose(rows["beam_ra_hr"], beam_ra_at(rows["mjd"], cfg), atol=1e-6)
    # correlated unit power: |V| = |sum_k exp(i 2 pi f_k (delay - tau_int))| plus noise
    expect = abs(band_phase_sum(cfg, bb.delay_s + cfg.tau_inst_s))
    assert np.median(rows["vis_db"]) == pytest.approx(10 * math.log10(expect), abs=0.2)


def test_highvis_near_sun(cfg):
    t0 = 60600.0
    sun_ra = (beam_ra_at(t0, cfg) + 1.0) % 24.0
    sun = SunSpec(linear_sun_table(t0 - 1, t0 + 2, sun_ra, dec_deg=cfg.dec_deg), sidelobe_extent_hr=1.0)
    sc = Scenario(cfg, [[t0, t0 + 0.1]], seed=5, sun=sun)
    first = run_first_level(sc)
    rows = high_visibility_scan(first.windows, 45.0)
    assert rows.size > 100
    assert np.all(ra_distance_hr(rows["beam_ra_hr"], sun.ra_at(rows["mjd"])) < 1.0)


def test_highvis_threshold_monotone(short_null):
    w = short_null.first.windows
    a = high_visibility_scan(w, 30.0).size
    b = high_visibility_scan(w, 33.0).size
    assert a >= b
    assert high_visibility_scan(w).size == 0
