import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pulsepair.cli import main, resolve_scenario, verify_manifest
from pulsepair.config import ConfigError, desk_config
from pulsepair.figures import FIGURE_CLASSES, AnalysisBundle, emit_figure_data, figure_table
from pulsepair.first_level import process_windows
from pulsepair.io import SchemaError, file_digest, load_frames, read_table, save_frames, write_table
from pulsepair.scenario import BroadbandSpec, Scenario, generate_run, preset, save_scenario
from pulsepair.stats import BIN_DTYPE

SMALL = ["--scenario", "null", "--days", "0.02", "--seed", "4"]


def digests(run: Path) -> dict:
    return {str(p.relative_to(run)): file_digest(p) for p in sorted(run.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


# tables ------------------------------------------------------------------


REC = np.dtype([("a", "i8"), ("x", "f8"), ("y", "f8")])


@given(st.lists(st.tuples(st.integers(-2 ** 62, 2 ** 62),
                          st.floats(allow_nan=False, allow_infinity=False, width=64),
                          st.floats(allow_nan=False, width=64)), min_size=1, max_size=30))
@settings(max_examples=60, deadline=None)
def test_table_round_trip_byte_identical(tmp_path_factory, rows):
    d = tmp_path_factory.mktemp("t")
    arr = np.array(rows, dtype=REC)
    write_table(d / "a.csv", arr, "thing")
    back = read_table(d / "a.csv", REC, "thing")
    assert np.array_equal(back["a"], arr["a"])
    assert np.array_equal(back["x"], arr["x"])
    assert np.array_equal(back["y"], arr["y"])
    write_table(d / "b.csv", back, "thing")
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()


def test_table_header_checks(tmp_path):
    arr = np.zeros(2, REC)
    write_table(tmp_path / "a.csv", arr, "thing")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "# pulsepair thing v1"
    with pytest.raises(SchemaError):
        read_table(tmp_path / "a.csv", REC, "other")
    (tmp_path / "b.csv").write_text("a,x,y\n1,2,3\n")
    with pytest.raises(SchemaError):
        read_table(tmp_path / "b.csv", REC)
    (tmp_path / "c.csv").write_text("# pulsepair thing v9\na,x,y\n1,2,3\n")
    with pytest.raises(SchemaError):
        read_table(tmp_path / "c.csv", REC)
    with pytest.raises(SchemaError):
        read_table(tmp_path / "a.csv", BIN_DTYPE)


# frames ------------------------------------------------------------------


def _windows(sc):
    return [w for fr in generate_run(sc) for w in fr.windows]


@pytest.mark.parametrize("kind", ["sparse", "broadband"])
def test_frames_round_trip(tmp_path, kind, cfg):
    bb = [BroadbandSpec(60500.0, 60500.002, 3.0, 0.5, 1e-8)] if kind == "broadband" else []
    sc = Scenario(cfg, [[60500.0, 60500.004]], seed=3, broadband=bb)
    wins = _windows(sc)
    save_frames(tmp_path / "f.npz", wins)
    back = load_frames(tmp_path / "f.npz")
    assert len(back) == len(wins)
    a = process_windows(wins, cfg)
    b = process_windows(back, cfg)
    assert np.array_equal(a.candidates, b.candidates)
    assert np.array_equal(a.windows, b.windows)
    save_frames(tmp_path / "g.npz", back)
    assert file_digest(tmp_path / "f.npz") == file_digest(tmp_path / "g.npz")


# CLI ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("cli") / "run"
    assert main(["run", *SMALL, "--out", str(run)]) == 0
    return run


def test_run_writes_every_stage(cli_run):
    for name in ("scenario.json", "config.ini", "pulses.csv", "candidates.csv", "windows.csv", "tags.csv",
                 "exposure.csv", "sun_mask.csv", "excision.json", "variants.json", "comparison.csv",
                 "audit.json", "highvis.csv", "classification.csv", "report.txt", "manifest.json"):
        assert (cli_run / name).exists(), name
    assert sorted(p.stem for p in (cli_run / "figures").glob("*.csv")) == sorted(FIGURE_CLASSES)
    for label in ("baseline", "phase_noise_1", "phase_noise_4", "tau_zero", "modified_filter"):
        assert (cli_run / f"heap_{label}.csv").exists()


def test_manifest_lists_digests(cli_run):
    m = json.loads((cli_run / "manifest.json").read_text())
    assert m["schema"] == "pulsepair.manifest/1"
    assert m["files"] == digests(cli_run)
    assert set(m["stages"]) == {"simulate", "detect", "excise", "analyze", "diagnose", "report"}
    assert m["config_digest"] == desk_config().digest()
    assert "rfi_concentration_threshold" in m["thresholds"]
    assert verify_manifest(cli_run) == []


def test_manifest_detects_tampering(cli_run, tmp_path):
    import shutil

    copy = tmp_path / "copy"
    shutil.copytree(cli_run, copy)
    with open(copy / "tags.csv", "a") as fh:
        fh.write("\n")
    assert verify_manifest(copy) == ["tags.csv"]


def test_staged_verbs_match_one_shot(cli_run, tmp_path):
    run = tmp_path / "staged"
    assert main(["simulate", *SMALL, "--out", str(run), "--workers", "2"]) == 0
    assert main(["detect", "--in", str(run), "--workers", "2"]) == 0
    assert main(["excise", "--in", str(run)]) == 0
    assert main(["analyze", "--in", str(run), "--variant", "baseline,phase_noise:1..4,tau_zero,modified_filter"]) == 0
    assert main(["diagnose", "--in", str(run)]) == 0
    assert main(["report", "--in", str(run)]) == 0
    assert digests(run) == digests(cli_run)


def test_detect_without_frames(cli_run, tmp_path):
    run = tmp_path / "noframes"
    assert main(["simulate", *SMALL, "--out", str(run), "--no-frames"]) == 0
    assert not (run / "frames").exists() or not any((run / "frames").iterdir())
    assert main(["detect", "--in", str(run)]) == 0
    assert (run / "candidates.csv").read_bytes() == (cli_run / "candidates.csv").read_bytes()


def test_config_error_exit_code(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[first_level]\nsnr_threshold_db = loud\n")
    code = main(["simulate", *SMALL, "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "r")])
    assert code == 2
    assert "snr_threshold_db" in capsys.readouterr().err


def test_env_config_error_exit_code(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PULSEPAIR_DEC_DEG", "95")
    assert main(["simulate", *SMALL, "--out", str(tmp_path / "r")]) == 2
    assert "dec_deg" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["detect", "--in", "/nonexistent/run"],
    ["simulate", "--scenario", "no-such-preset", "--out", "x"],
])
def test_operational_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_unknown_figure_exit_1(cli_run, capsys):
    assert main(["report", "--in", str(cli_run), "--figure", "fig99"]) == 1
    assert "fig99" in capsys.readouterr().err


def test_report_skips_figures_without_variants(tmp_path):
    run = tmp_path / "r"
    assert main(["run", *SMALL, "--out", str(run), "--variant", "baseline", "--no-frames"]) == 0
    names = {p.stem for p in (run / "figures").glob("*.csv")}
    assert "fig24" not in names and "fig25" not in names
    assert "fig24" in (run / "report.txt").read_text()


def test_seed_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("PULSEPAIR_SEED", "17")
    assert main(["simulate", "--scenario", "null", "--days", "0.001", "--no-frames", "--out", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a" / "scenario.json").read_text())["seed"] == 17
    assert main(["simulate", "--scenario", "null", "--days", "0.001", "--seed", "3", "--no-frames", "--out", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "scenario.json").read_text())["seed"] == 3


def test_scenario_json_and_ini(tmp_path):
    sc = preset("rfi-storm", desk_config(), seed=9, days=0.05)
    save_scenario(sc, tmp_path / "s.json")
    back = resolve_scenario(str(tmp_path / "s.json"), env={})
    assert back.seed == 9 and back.name == "rfi-storm"
    (tmp_path / "s.ini").write_text("[scenario]\npreset = sun-transit\ndays = 0.05\nseed = 4\n[first_level]\nsnr_threshold_db = 9.0\n")
    s2 = resolve_scenario(str(tmp_path / "s.ini"), env={})
    assert (s2.name, s2.seed, s2.config.snr_threshold_db) == ("sun-transit", 4, 9.0)
    (tmp_path / "bad.ini").write_text("[scenario]\npreset = moon\n")
    with pytest.raises(ConfigError):
        resolve_scenario(str(tmp_path / "bad.ini"), env={})


# figure data -------------------------------------------------------------


def _bundle(short_null):
    return AnalysisBundle(short_null.scenario.config, short_null.excision.candidates, short_null.first.windows,
                          short_null.exposure, {k: v.result for k, v in short_null.variants.items()})


def test_figure_columns(short_null, tmp_path):
    b = _bundle(short_null)
    paths = emit_figure_data(b, ["fig3", "fig20", "fig23"], tmp_path)
    heads = {p.stem: p.read_text().splitlines()[1].split(",") for p in paths}
    assert heads["fig3"][:4] == ["bin", "ra_hr", "count_d_gt_m2", "count"]
    assert heads["fig20"] == ["bin", "ra_hr", "p", "event_p"]
    assert heads["fig23"] == ["variant", "bin", "ra_hr", "count"]
    t = pd.DataFrame(figure_table(b, "fig20"))
    assert np.isclose(t["p"].sum(), 1.0)


def test_figure_counts_match_heap(short_null):
    b = _bundle(short_null)
    t = pd.DataFrame(figure_table(b, "fig23"))
    counts = np.bincount(short_null.baseline.heap["bin"], minlength=3200)
    got = t.set_index("bin")["count"].reindex(range(3200), fill_value=0).to_numpy()
    assert np.array_equal(got, counts)


def test_every_figure_class_emits(short_null, tmp_path):
    b = _bundle(short_null)
    paths = emit_figure_data(b, list(FIGURE_CLASSES), tmp_path)
    assert [p.stem for p in paths] == list(FIGURE_CLASSES)
    for p in paths:
        assert p.read_text().startswith(f"# pulsepair {p.stem} v1\n")


def test_unknown_figure_class(short_null, tmp_path):
    with pytest.raises(ValueError):
        emit_figure_data(_bundle(short_null), "fig99", tmp_path)


def test_missing_variant_figure(short_null):
    b = _bundle(short_null)
    b.variants = {"baseline": b.variants["baseline"]}
    with pytest.raises(KeyError):
        figure_table(b, "fig25")
