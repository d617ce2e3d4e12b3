import hashlib
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from pulsepair.config import desk_config
from pulsepair.first_level import detect_pulses
from pulsepair.geometry import beam_ra_at, expected_ew_phase, geometric_delay, ra_distance_hr, wrap_phase
from pulsepair.scenario import (
    PRESETS,
    RfiSpec,
    Scenario,
    SourceSpec,
    SunSpec,
    beam_gain,
    doi_tone_pairs,
    doi_tones,
    generate_frame,
    generate_run,
    linear_sun_table,
    load_scenario,
    preset,
    save_scenario,
    synthesize_window,
    transit_ranges,
)

NARROW = desk_config(rf_ranges_hz=((1.42e9, 1.42e9 + 2.0e5),))


def stream_digest(sc, start=0, stop=None):
    h = hashlib.sha256()
    for fr in generate_run(sc, start, stop):
        for w in fr.windows:
            for arr in (w.bins, w.east.values, w.west.values, w.east.seg_power, w.west.seg_power):
                h.update(np.ascontiguousarray(arr).tobytes())
            h.update(np.array([w.mjd, w.beam_ra_hr, w.east.wide_power, w.west.wide_power]).tobytes())
    return h.hexdigest()


def circ_mean(x):
    return float(np.angle(np.mean(np.exp(1j * np.asarray(x)))))


# beam and geometry helpers -------------------------------------------------


def test_beam_gain_at_fwhm():
    assert beam_gain(5.3, 5.3) == pytest.approx(math.exp(-4 * math.log(2)), rel=1e-12)
    assert beam_gain(5.3, 5.3) == pytest.approx(0.0625)
    assert beam_gain(0.0, 5.3) == 1.0
    assert beam_gain(2.65, 5.3) == pytest.approx(0.5)


@given(st.floats(0, 90), st.floats(0.1, 20))
def test_beam_gain_in_unit_interval(off, fwhm):
    assert 0.0 <= beam_gain(off, fwhm) <= 1.0


def test_one_day_has_28800_frames(cfg):
    sc = Scenario(cfg, [[60500.0, 60501.0]])
    assert sc.n_frames == 86400 // 3 == 28800


def test_frames_hold_windows_per_trigger(cfg):
    sc = preset("null", cfg, days=0.002)
    for fr in generate_run(sc):
        assert len(fr.windows) == cfg.windows_per_trigger
        for w in fr.windows:
            assert np.array_equal(w.east.bins, w.west.bins)
            assert 0.0 <= w.beam_ra_hr < 24.0


def test_window_mjds_monotone(cfg):
    sc = preset("null", cfg, days=0.01)
    mjd = [w.mjd for fr in generate_run(sc) for w in fr.windows]
    assert np.all(np.diff(mjd) > 0)


def test_transit_ranges_start_on_the_arc(cfg):
    r = transit_ranges(8.83875, 60500.0, 3, 0.15, cfg)
    assert len(r) == 3
    for lo, hi in r:
        assert lo >= 60500.0
        assert ra_distance_hr(beam_ra_at(lo, cfg), 8.83875 - 0.15) < 1e-6
        assert ra_distance_hr(beam_ra_at(hi, cfg), 8.83875 + 0.15) < 1e-6


# validation ---------------------------------------------------------------


def test_scenario_rejects_overlapping_ranges(cfg):
    with pytest.raises(ValueError):
        Scenario(cfg, [[60500.0, 60501.0], [60500.5, 60502.0]])
    with pytest.raises(ValueError):
        Scenario(cfg, [])


def test_source_tone_spacing_checked(cfg):
    lo = cfg.rf_ranges_hz[0][0]
    bad = SourceSpec(1.0, cfg.dec_deg, [(lo + 1e3, lo + 1e3 + 8e6)])
    with pytest.raises(ValueError):
        Scenario(cfg, [[60500.0, 60501.0]], sources=[bad])
    outside = SourceSpec(1.0, cfg.dec_deg, [(1.0e9, 1.0e9 + 1e3)])
    with pytest.raises(ValueError):
        Scenario(cfg, [[60500.0, 60501.0]], sources=[outside])


def test_rfi_bandwidth_checked(cfg):
    r = RfiSpec(cfg.rf_ranges_hz[0][0] + 1e5, 1.0, 10.0, 20.0)
    with pytest.raises(ValueError):
        Scenario(cfg, [[60500.0, 60501.0]], rfi=[r])


def test_sun_table_must_cover_run(cfg):
    sun = SunSpec(linear_sun_table(60500.0, 60500.5, 3.0))
    with pytest.raises(ValueError):
        Scenario(cfg, [[60500.0, 60501.0]], sun=sun)


def test_spec_field_checks():
    with pytest.raises(ValueError):
        SourceSpec(1.0, 0.0, [], emission_probability_per_window=1.5)
    with pytest.raises(ValueError):
        SourceSpec(24.0, 0.0, [])
    with pytest.raises(ValueError):
        RfiSpec(1.4e9, 1e3, 1.0, 10.0, element_coupling=(1.0, 2.0))


# determinism and persistence ---------------------------------------------


def test_same_seed_same_stream(cfg):
    a = preset("null", cfg, seed=5, days=0.003)
    b = preset("null", cfg, seed=5, days=0.003)
    c = preset("null", cfg, seed=6, days=0.003)
    assert stream_digest(a) == stream_digest(b)
    assert stream_digest(a) != stream_digest(c)


def test_frames_regenerate_in_isolation(cfg):
    sc = preset("null", cfg, seed=5, days=0.003)
    whole = list(generate_run(sc))
    fr = generate_frame(sc, 7)
    assert np.array_equal(fr.windows[1].east.values, whole[7].windows[1].east.values)
    assert stream_digest(sc, 20, 40) == stream_digest(sc, 20, 40)


def test_scenario_json_round_trip(tmp_path, cfg):
    for name in PRESETS:
        sc = preset(name, cfg, days=0.01 if name not in ("single-doi", "incoherent-doi") else 1)
        save_scenario(sc, tmp_path / "s.json")
        back = load_scenario(tmp_path / "s.json")
        assert back.config == sc.config
        assert back.mjd_ranges == sc.mjd_ranges
        assert len(back.sources) == len(sc.sources)
        assert stream_digest(back, 0, 3) == stream_digest(sc, 0, 3)


def test_unknown_preset(cfg):
    with pytest.raises(ValueError):
        preset("nope", cfg)


# noise calibration --------------------------------------------------------


def test_dense_awgn_power_is_exponential():
    sc = Scenario(NARROW, [[60500.0, 60500.01]], dense=True, noise_power=2.0, seed=11)
    rng = np.random.default_rng(1)
    p = []
    for j in range(2):
        w = synthesize_window(sc, 60500.0, j, rng)
        p.append(np.abs(w.east.values) ** 2)
        p.append(np.abs(w.west.values) ** 2)
    p = np.concatenate(p)
    assert p.size >= 1e5
    ks = stats.kstest(p, stats.expon(scale=2.0).cdf).statistic
    assert ks < 0.01


def test_dense_dual_threshold_rate():
    # a low threshold makes the dual crossing common enough to count densely
    cfg = NARROW.replace(snr_threshold_db=3.0)
    sc = Scenario(cfg, [[60500.0, 60500.01]], dense=True, seed=12)
    rng = np.random.default_rng(2)
    theta = cfg.snr_threshold_lin
    hits = n = 0
    for j in range(4):
        w = synthesize_window(sc, 60500.0, j, rng)
        both = (np.abs(w.east.values) ** 2 >= theta) & (np.abs(w.west.values) ** 2 >= theta)
        hits += int(both.sum())
        n += both.size
    p = math.exp(-theta) ** 2
    assert abs(hits - n * p) < 3 * math.sqrt(n * p * (1 - p))


def test_sparse_dual_threshold_rate(cfg):
    sc = preset("null", cfg, seed=13, days=0.05)
    n_win = hits = 0
    for fr in generate_run(sc):
        for w in fr.windows:
            hits += detect_pulses(w, cfg).size
            n_win += 1
    n_bins = sc.model().n_bins
    lam = n_win * n_bins * math.exp(-2 * cfg.snr_threshold_lin)
    assert abs(hits - lam) < 3 * math.sqrt(lam)


# injected sources ---------------------------------------------------------


def _transit_windows(cfg, n, coherent=True, snr_db=30.0, seed=0):
    mjd = 60500.0
    ra = beam_ra_at(mjd, cfg)
    pairs = doi_tone_pairs(cfg, 8, min_spacing_hz=200e3)
    src = SourceSpec(ra, cfg.dec_deg, pairs, snr_db_at_transit=snr_db, amplitude_model="fixed", phase_coherent=coherent)
    sc = Scenario(cfg, [[mjd, mjd + 0.01]], sources=[src], seed=seed)
    rng = np.random.default_rng(seed)
    return src, [synthesize_window(sc, mjd, 0, rng, beam_ra=ra) for _ in range(n)], ra


def _tone_phases(cfg, win, freqs):
    idx = np.searchsorted(win.bins, np.round(np.asarray(freqs) / cfg.fft_bin_hz).astype(np.int64))
    return np.angle(win.east.values[idx] * np.conj(win.west.values[idx]))


def test_coherent_tone_phase_matches_geometry(cfg):
    src, wins, ra = _transit_windows(cfg, 200)
    f = np.array(src.tone_pairs).ravel()
    expect = expected_ew_phase(f, 0.0, cfg)
    res = np.concatenate([wrap_phase(_tone_phases(cfg, w, f) - expect) for w in wins])
    s = 10 ** 3.0
    sigma = 1 / math.sqrt(s)  # two elements, each adding phase variance 1/(2 s)
    assert abs(circ_mean(res)) < 4 * sigma / math.sqrt(res.size)
    assert np.std(res) == pytest.approx(sigma, rel=0.15)


def test_coherent_pair_difference_concentrates(cfg):
    src, wins, ra = _transit_windows(cfg, 100)
    pairs = np.array(src.tone_pairs)
    tau_g = geometric_delay(0.0, cfg.dec_deg, cfg.baseline_m)
    for f1, f2 in pairs:
        dd = [wrap_phase(_tone_phases(cfg, w, [f2])[0] - _tone_phases(cfg, w, [f1])[0]) for w in wins]
        target = wrap_phase(2 * math.pi * (f2 - f1) * (tau_g - cfg.tau_inst_s))
        assert abs(wrap_phase(circ_mean(dd) - target)) < 0.02


def test_incoherent_tone_phase_is_uniform(cfg):
    src, wins, ra = _transit_windows(cfg, 200, coherent=False)
    f = np.array(src.tone_pairs).ravel()
    res = np.concatenate([wrap_phase(_tone_phases(cfg, w, f) - expected_ew_phase(f, 0.0, cfg)) for w in wins])
    assert stats.kstest(res, stats.uniform(-math.pi, 2 * math.pi).cdf).pvalue > 1e-3


def test_rayleigh_tone_power_mean(cfg):
    mjd = 60500.0
    ra = beam_ra_at(mjd, cfg)
    pairs = doi_tone_pairs(cfg, 8, min_spacing_hz=200e3)
    src = SourceSpec(ra, cfg.dec_deg, pairs, snr_db_at_transit=20.0)
    sc = Scenario(cfg, [[mjd, mjd + 0.01]], sources=[src])
    rng = np.random.default_rng(3)
    f = np.array(pairs).ravel()
    pw = []
    for _ in range(400):
        w = synthesize_window(sc, mjd, 0, rng, beam_ra=ra)
        idx = np.searchsorted(w.bins, np.round(f / cfg.fft_bin_hz).astype(np.int64))
        pw.append(np.abs(w.west.values[idx]) ** 2)
    pw = np.concatenate(pw)
    # exponential signal power plus unit noise
    assert pw.mean() == pytest.approx(100.0 + 1.0, rel=0.05)
    assert pw.std() == pytest.approx(math.sqrt(100.0 ** 2 + 2 * 100.0 + 1.0), rel=0.1)


def test_emission_probability_zero_emits_nothing(cfg):
    mjd = 60500.0
    ra = beam_ra_at(mjd, cfg)
    pairs = doi_tone_pairs(cfg, 8, min_spacing_hz=200e3)
    src = SourceSpec(ra, cfg.dec_deg, pairs, snr_db_at_transit=40.0, emission_probability_per_window=0.0)
    sc = Scenario(cfg, [[mjd, mjd + 0.01]], sources=[src])
    w = synthesize_window(sc, mjd, 0, np.random.default_rng(0), beam_ra=ra)
    assert not np.any(np.abs(w.east.values) ** 2 > 1e3)


def test_doi_tones_respect_constraints(cfg):
    t = doi_tones(cfg, 36)
    assert t.size == 36
    assert np.all(np.abs(wrap_phase(2 * np.pi * t * cfg.tau_inst_s)) >= 0.7)
    for lo, hi in cfg.rf_ranges_hz:
        r = t[(t >= lo) & (t <= hi)]
        assert r.size == 18
        assert np.all(np.diff(r) >= 200e3 - 1e-6)
    pairs = doi_tone_pairs(cfg, 36)
    df = np.array([b - a for a, b in pairs])
    assert np.all((df >= 1.0e6) & (df <= cfg.delta_f_range_hz[1]))


def test_doi_tones_overfull_raises(cfg):
    with pytest.raises(ValueError):
        doi_tones(cfg, 1000, min_spacing_hz=200e3)


# broadband and Sun --------------------------------------------------------


def test_sun_raises_wide_power_near_sun(cfg):
    sc = preset("sun-transit", cfg, days=0.02)
    sun_ra = float(sc.sun.ra_at(sc.mjd_ranges[0][0]))
    rng = np.random.default_rng(4)
    near = synthesize_window(sc, sc.mjd_ranges[0][0], 0, rng, beam_ra=sun_ra)
    far = synthesize_window(sc, sc.mjd_ranges[0][0], 0, rng, beam_ra=(sun_ra + 6.0) % 24)
    assert near.east.wide_power > 5 * far.east.wide_power
    assert near.east.floor > far.east.floor
